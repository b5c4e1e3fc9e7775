//! Mini-batch training for the trajectory predictor: Adam updates with a
//! reduce-on-plateau learning-rate schedule and a held-out validation split.

use super::{ModelConfig, Norm, PredictorError, PredictorWeights, Record};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

/// Training hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Learning-rate multiplier applied when validation loss plateaus.
    pub plateau_factor: f64,
    /// Epochs without validation improvement tolerated before decaying.
    pub plateau_patience: usize,
    pub min_lr: f64,
    /// Fraction of records held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            lr: 1e-3,
            batch_size: 64,
            epochs: 15,
            plateau_factor: 0.5,
            plateau_patience: 3,
            min_lr: 1e-5,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

/// Loss trace for one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub lr: f64,
}

/// Full training trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub final_val_mse: f64,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(shapes: &[usize]) -> Self {
        Adam {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    /// One update: `grads` hold accumulated sums, `scale` converts them to
    /// mean-loss gradients.
    fn update(&mut self, weights: &mut [&mut [f64]], grads: &[&mut [f64]], scale: f64, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step as i32);
        let c2 = 1.0 - Self::BETA2.powi(self.step as i32);
        for (ti, w) in weights.iter_mut().enumerate() {
            let g = &grads[ti];
            let m = &mut self.m[ti];
            let v = &mut self.v[ti];
            for i in 0..w.len() {
                let gi = g[i] * scale;
                m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * gi;
                v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                w[i] -= lr * mh / (vh.sqrt() + Self::EPS);
            }
        }
    }
}

fn check_shapes(records: &[Record], cfg: &ModelConfig) -> Result<(), PredictorError> {
    for r in records {
        if r.targets.len() != cfg.horizon || r.input.controls.len() != cfg.horizon - 1 {
            return Err(PredictorError::ShapeMismatch(format!(
                "record with {} targets / {} controls incompatible with horizon {}",
                r.targets.len(),
                r.input.controls.len(),
                cfg.horizon
            )));
        }
    }
    Ok(())
}

/// Train a fresh model on `records`. The split, shuffling, initialization,
/// and updates are all driven by `cfg.seed`, so identical inputs produce
/// identical weights.
pub fn train(
    records: &[Record],
    norm: Norm,
    cfg: &TrainConfig,
) -> Result<(PredictorWeights, TrainReport), PredictorError> {
    if records.len() < 2 {
        return Err(PredictorError::DatasetTooSmall {
            needed: 2,
            got: records.len(),
        });
    }
    check_shapes(records, &cfg.model)?;

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut indices: Vec<usize> = (0..records.len()).collect();
    indices.shuffle(&mut rng);
    let n_val = ((records.len() as f64 * cfg.val_fraction) as usize)
        .max(1)
        .min(records.len() - 1);
    let (val_idx, train_idx) = indices.split_at(n_val);
    let val_idx = val_idx.to_vec();
    let mut train_idx = train_idx.to_vec();

    let mut weights = PredictorWeights::init(cfg.model.clone(), norm, cfg.seed ^ 0x5eed);
    let mut grads = weights.zero_grads();
    let shapes: Vec<usize> = grads.tensors_mut().iter().map(|t| t.len()).collect();
    let mut adam = Adam::new(&shapes);

    let mut lr = cfg.lr;
    let mut best_val = f64::INFINITY;
    let mut stale = 0usize;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut final_val = f64::NAN;

    for epoch in 0..cfg.epochs {
        train_idx.shuffle(&mut rng);
        let mut sse = 0.0;
        let mut count = 0usize;
        for batch in train_idx.chunks(cfg.batch_size.max(1)) {
            for t in grads.tensors_mut() {
                t.fill(0.0);
            }
            let mut batch_components = 0usize;
            for &i in batch {
                let (s, c) = weights.loss_and_grads(&records[i], &mut grads);
                sse += s;
                count += c;
                batch_components += c;
            }
            let scale = 1.0 / batch_components as f64;
            let gviews = grads.tensors_mut();
            let mut wviews = weights.tensors_mut();
            adam.update(&mut wviews, &gviews, scale, lr);
        }
        let train_mse = sse / count as f64;
        if !train_mse.is_finite() {
            return Err(PredictorError::NanLoss { epoch });
        }

        let (vs, vc) = val_idx.iter().fold((0.0, 0usize), |(s, c), &i| {
            let (si, ci) = weights.loss(&records[i]);
            (s + si, c + ci)
        });
        let val_mse = vs / vc as f64;
        if !val_mse.is_finite() {
            return Err(PredictorError::NanLoss { epoch });
        }
        if val_mse + 1e-12 < best_val {
            best_val = val_mse;
            stale = 0;
        } else {
            stale += 1;
            if stale > cfg.plateau_patience {
                lr = (lr * cfg.plateau_factor).max(cfg.min_lr);
                stale = 0;
            }
        }
        final_val = val_mse;
        epochs.push(EpochStats {
            epoch,
            train_mse,
            val_mse,
            lr,
        });
    }

    Ok((
        weights,
        TrainReport {
            epochs,
            final_val_mse: final_val,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::{PedSnapshot, PredictorInput, TrajectoryPredictor};
    use crate::sim::{Vec2, VehicleState};
    use rand::Rng;

    fn constant_velocity_records(n: usize, horizon: usize, seed: u64) -> Vec<Record> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let dt = 0.1;
        (0..n)
            .map(|_| {
                let pos = Vec2::new(rng.random_range(5.0..45.0), rng.random_range(-8.0..8.0));
                let vel = Vec2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
                let controls: Vec<f64> =
                    (0..horizon - 1).map(|_| rng.random_range(0.0..1.5)).collect();
                let targets = (1..=horizon)
                    .map(|k| pos + vel * (dt * k as f64))
                    .collect();
                Record {
                    input: PredictorInput {
                        vehicle: VehicleState {
                            position: rng.random_range(0.0..40.0),
                            lane_offset: 0.0,
                        },
                        ped: PedSnapshot {
                            position: pos,
                            velocity: vel,
                        },
                        controls,
                    },
                    targets,
                }
            })
            .collect()
    }

    fn tiny_config(horizon: usize) -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                horizon,
                hidden: 8,
                layers: 1,
                include_velocity: true,
            },
            lr: 3e-3,
            batch_size: 32,
            epochs: 40,
            seed: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let cfg = ModelConfig {
            horizon: 4,
            hidden: 4,
            layers: 2,
            include_velocity: true,
        };
        let w = PredictorWeights::init(cfg, Norm::default(), 17);
        let record = constant_velocity_records(1, 4, 3).pop().unwrap();

        let mut grads = w.zero_grads();
        let (_, _) = w.loss_and_grads(&record, &mut grads);
        let gviews = grads.tensors_mut();

        let shapes: Vec<usize> = gviews.iter().map(|t| t.len()).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let h = 1e-6;
        for _ in 0..40 {
            let ti = rng.random_range(0..shapes.len());
            if shapes[ti] == 0 {
                continue;
            }
            let ei = rng.random_range(0..shapes[ti]);
            let eval = |delta: f64| {
                let mut wp = w.clone();
                wp.tensors_mut()[ti][ei] += delta;
                wp.loss(&record).0
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let analytic = gviews[ti][ei];
            let denom = fd.abs().max(analytic.abs()).max(1e-3);
            assert!(
                (fd - analytic).abs() / denom < 1e-4,
                "tensor {ti} entry {ei}: analytic {analytic} vs fd {fd}"
            );
        }
    }

    #[test]
    fn model_learns_constant_velocity_extrapolation() {
        let records = constant_velocity_records(300, 4, 8);
        let (weights, report) = train(&records, Norm::default(), &tiny_config(4)).unwrap();
        let first = report.epochs.first().unwrap().val_mse;
        let last = report.final_val_mse;
        assert!(
            last < 0.05 && last < 0.5 * first,
            "val mse should drop: first {first}, last {last}"
        );
        // Spot-check a held-out example.
        let probe = constant_velocity_records(1, 4, 99).pop().unwrap();
        let pred = weights.predict(&probe.input);
        let err = pred
            .iter()
            .zip(&probe.targets)
            .map(|(p, t)| p.dist(*t))
            .fold(0.0_f64, f64::max);
        assert!(err < 0.6, "worst-step error {err}");
    }

    #[test]
    fn training_is_deterministic() {
        let records = constant_velocity_records(80, 4, 8);
        let mut cfg = tiny_config(4);
        cfg.epochs = 3;
        let (w1, r1) = train(&records, Norm::default(), &cfg).unwrap();
        let (w2, r2) = train(&records, Norm::default(), &cfg).unwrap();
        assert_eq!(w1, w2);
        assert_eq!(r1, r2);
    }

    #[test]
    fn corrupt_targets_surface_as_divergence_error() {
        let mut records = constant_velocity_records(40, 4, 8);
        records[7].targets[2] = Vec2::new(f64::NAN, 0.0);
        let mut cfg = tiny_config(4);
        cfg.epochs = 2;
        match train(&records, Norm::default(), &cfg) {
            Err(PredictorError::NanLoss { .. }) => {}
            other => panic!("expected divergence error, got {other:?}"),
        }
    }

    #[test]
    fn undersized_dataset_is_rejected() {
        let records = constant_velocity_records(1, 4, 8);
        match train(&records, Norm::default(), &tiny_config(4)) {
            Err(PredictorError::DatasetTooSmall { .. }) => {}
            other => panic!("expected dataset error, got {other:?}"),
        }
    }

    #[test]
    fn mismatched_horizon_is_rejected() {
        let records = constant_velocity_records(10, 5, 8);
        match train(&records, Norm::default(), &tiny_config(4)) {
            Err(PredictorError::ShapeMismatch(_)) => {}
            other => panic!("expected shape error, got {other:?}"),
        }
    }
}
