//! Learned pedestrian-trajectory predictor.
//!
//! A scene encoder maps the normalized vehicle/pedestrian state to the
//! initial hidden state of a gated recurrent decoder. The decoder consumes
//! the planned control sequence one step at a time (holding the last control
//! for the final step) and emits per-step position deltas that accumulate
//! onto the pedestrian's current position, so horizon-`T` predictions are
//! differentiable in the `T−1` planned controls. Reverse-mode accumulation
//! provides both weight gradients for training and the control Jacobians the
//! planner linearizes against.

mod train;

pub use train::{train, EpochStats, TrainConfig, TrainReport};

use crate::sim::{Vec2, VehicleState};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Serialized weight-file format revision.
pub const WEIGHTS_FORMAT_VERSION: u32 = 1;

/// Errors from training, inference setup, and weight persistence.
#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("weights file i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("weights file encoding: {0}")]
    Json(#[from] serde_json::Error),
    #[error("weights format version {found} unsupported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("inconsistent tensor shapes in weights: {0}")]
    ShapeMismatch(String),
    #[error("training diverged: non-finite loss at epoch {epoch}")]
    NanLoss { epoch: usize },
    #[error("training needs at least {needed} records, got {got}")]
    DatasetTooSmall { needed: usize, got: usize },
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `y = A·x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|i| {
                self.row(i)
                    .iter()
                    .zip(x)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .collect()
    }

    /// `y += Aᵀ·x`, accumulated in place.
    pub fn matvec_t_add(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(y.len(), self.cols);
        for i in 0..self.rows {
            let xi = x[i];
            if xi == 0.0 {
                continue;
            }
            for (yj, aij) in y.iter_mut().zip(self.row(i)) {
                *yj += aij * xi;
            }
        }
    }

    /// Rank-one accumulation `A += u·vᵀ`.
    pub fn add_outer(&mut self, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for i in 0..self.rows {
            let ui = u[i];
            if ui == 0.0 {
                continue;
            }
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (a, vj) in row.iter_mut().zip(v) {
                *a += ui * vj;
            }
        }
    }
}

/// Pedestrian kinematics visible to the predictor at planning time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PedSnapshot {
    pub position: Vec2,
    pub velocity: Vec2,
}

/// One prediction query: current scene plus the planned control sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorInput {
    pub vehicle: VehicleState,
    pub ped: PedSnapshot,
    /// Planned displacements for the next `horizon − 1` steps.
    pub controls: Vec<f64>,
}

/// One supervised example: a query plus the realized pedestrian positions
/// over the next `horizon` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub input: PredictorInput,
    pub targets: Vec<Vec2>,
}

/// Architecture hyper-parameters baked into a weights file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Prediction horizon `T` in steps.
    pub horizon: usize,
    /// Recurrent state width.
    pub hidden: usize,
    /// Stacked recurrent layers.
    pub layers: usize,
    /// Whether pedestrian velocity joins the encoder features.
    pub include_velocity: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            horizon: 10,
            hidden: 32,
            layers: 2,
            include_velocity: true,
        }
    }
}

impl ModelConfig {
    /// Encoder feature count.
    pub fn n_features(&self) -> usize {
        if self.include_velocity {
            6
        } else {
            4
        }
    }
}

/// Input/output normalization constants stored with the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Norm {
    pub feat_offset: Vec<f64>,
    pub feat_scale: Vec<f64>,
    /// Divisor bringing controls to O(1).
    pub u_scale: f64,
    /// Multiplier mapping head outputs to per-step position deltas.
    pub delta_scale: f64,
}

impl Norm {
    /// Normalization for a road of the given dimensions.
    pub fn new(
        road_length: f64,
        road_width: f64,
        u_max: f64,
        v_ped_max: f64,
        dt: f64,
        include_velocity: bool,
    ) -> Self {
        let half_len = road_length / 2.0;
        let half_wid = road_width / 2.0;
        let mut feat_offset = vec![half_len, 0.0, half_len, 0.0];
        let mut feat_scale = vec![half_len, half_wid, half_len, half_wid];
        if include_velocity {
            feat_offset.extend([0.0, 0.0]);
            feat_scale.extend([v_ped_max, v_ped_max]);
        }
        Norm {
            feat_offset,
            feat_scale,
            u_scale: u_max,
            delta_scale: v_ped_max * dt,
        }
    }
}

impl Default for Norm {
    fn default() -> Self {
        Norm::new(50.0, 20.0, 1.5, 3.0, 0.1, true)
    }
}

/// Parameters of one recurrent layer, PyTorch gate convention:
/// `z = σ(Wz·x + Uz·h + bz)`, `r = σ(Wr·x + Ur·h + br)`,
/// `n = tanh(Wn·x + bn_i + r ⊙ (Un·h + bn_h))`, `h' = (1−z)⊙n + z⊙h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruLayer {
    pub wz: Mat,
    pub uz: Mat,
    pub bz: Vec<f64>,
    pub wr: Mat,
    pub ur: Mat,
    pub br: Vec<f64>,
    pub wn: Mat,
    pub un: Mat,
    pub bn_i: Vec<f64>,
    pub bn_h: Vec<f64>,
}

impl GruLayer {
    fn zeros(input: usize, hidden: usize) -> Self {
        GruLayer {
            wz: Mat::zeros(hidden, input),
            uz: Mat::zeros(hidden, hidden),
            bz: vec![0.0; hidden],
            wr: Mat::zeros(hidden, input),
            ur: Mat::zeros(hidden, hidden),
            br: vec![0.0; hidden],
            wn: Mat::zeros(hidden, input),
            un: Mat::zeros(hidden, hidden),
            bn_i: vec![0.0; hidden],
            bn_h: vec![0.0; hidden],
        }
    }
}

/// Full predictor: architecture, normalization, and all trainable tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorWeights {
    pub version: u32,
    pub cfg: ModelConfig,
    pub norm: Norm,
    /// Encoder trunk: features → shared embedding.
    pub enc_w: Mat,
    pub enc_b: Vec<f64>,
    /// Per-layer heads mapping the embedding to initial hidden states.
    pub enc_h0_w: Vec<Mat>,
    pub enc_h0_b: Vec<Vec<f64>>,
    pub gru: Vec<GruLayer>,
    /// Linear readout from the top hidden state to a position delta.
    pub head_w: Mat,
    pub head_b: Vec<f64>,
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Per-step, per-layer forward activations kept for reverse sweeps.
struct CellCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    /// `Un·h_prev + bn_h`, the recurrent half of the candidate pre-activation.
    q: Vec<f64>,
    n: Vec<f64>,
}

struct ForwardCache {
    feats: Vec<f64>,
    embedding: Vec<f64>,
    h0: Vec<Vec<f64>>,
    /// `steps[t][l]` for decode step `t+1`, layer `l`.
    steps: Vec<Vec<CellCache>>,
    /// Top hidden state at each decode step.
    h_top: Vec<Vec<f64>>,
}

impl PredictorWeights {
    /// Allocate a model of the given architecture with small random weights
    /// (uniform ±1/√fan_in per matrix, biases zero).
    pub fn init(cfg: ModelConfig, norm: Norm, seed: u64) -> Self {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let mut w = Self::zeros_like_cfg(&cfg, norm);
        let mut fill = |m: &mut Mat| {
            let bound = 1.0 / (m.cols.max(1) as f64).sqrt();
            for v in m.data.iter_mut() {
                *v = rng.random_range(-bound..bound);
            }
        };
        fill(&mut w.enc_w);
        for m in w.enc_h0_w.iter_mut() {
            fill(m);
        }
        for layer in w.gru.iter_mut() {
            fill(&mut layer.wz);
            fill(&mut layer.uz);
            fill(&mut layer.wr);
            fill(&mut layer.ur);
            fill(&mut layer.wn);
            fill(&mut layer.un);
        }
        fill(&mut w.head_w);
        w
    }

    /// All-zero tensors of the given architecture. Also serves as the
    /// gradient buffer: accumulation mirrors the weight layout exactly.
    fn zeros_like_cfg(cfg: &ModelConfig, norm: Norm) -> Self {
        let h = cfg.hidden;
        let nf = cfg.n_features();
        PredictorWeights {
            version: WEIGHTS_FORMAT_VERSION,
            cfg: cfg.clone(),
            norm,
            enc_w: Mat::zeros(h, nf),
            enc_b: vec![0.0; h],
            enc_h0_w: (0..cfg.layers).map(|_| Mat::zeros(h, h)).collect(),
            enc_h0_b: (0..cfg.layers).map(|_| vec![0.0; h]).collect(),
            gru: (0..cfg.layers)
                .map(|l| GruLayer::zeros(if l == 0 { 1 } else { h }, h))
                .collect(),
            head_w: Mat::zeros(2, h),
            head_b: vec![0.0; 2],
        }
    }

    /// Zero gradient buffer with this model's shapes.
    pub(crate) fn zero_grads(&self) -> Self {
        Self::zeros_like_cfg(&self.cfg, self.norm.clone())
    }

    /// Flat views over every trainable tensor, in a fixed order shared by
    /// weight and gradient buffers.
    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        out.push(&mut self.enc_w.data);
        out.push(&mut self.enc_b);
        for m in self.enc_h0_w.iter_mut() {
            out.push(&mut m.data);
        }
        for b in self.enc_h0_b.iter_mut() {
            out.push(b);
        }
        for l in self.gru.iter_mut() {
            out.push(&mut l.wz.data);
            out.push(&mut l.uz.data);
            out.push(&mut l.bz);
            out.push(&mut l.wr.data);
            out.push(&mut l.ur.data);
            out.push(&mut l.br);
            out.push(&mut l.wn.data);
            out.push(&mut l.un.data);
            out.push(&mut l.bn_i);
            out.push(&mut l.bn_h);
        }
        out.push(&mut self.head_w.data);
        out.push(&mut self.head_b);
        out
    }

    /// Normalized encoder features for one query.
    fn features(&self, input: &PredictorInput) -> Vec<f64> {
        let mut raw = vec![
            input.vehicle.position,
            input.vehicle.lane_offset,
            input.ped.position.x,
            input.ped.position.y,
        ];
        if self.cfg.include_velocity {
            raw.push(input.ped.velocity.x);
            raw.push(input.ped.velocity.y);
        }
        raw.iter()
            .zip(self.norm.feat_offset.iter().zip(&self.norm.feat_scale))
            .map(|(v, (off, sc))| (v - off) / sc)
            .collect()
    }

    /// Decoder input index for decode step `t ∈ 1..=T`: the previous control,
    /// holding the last one once the plan runs out.
    fn control_index(&self, t: usize) -> usize {
        (t - 1).min(self.cfg.horizon.saturating_sub(2))
    }

    fn cell_forward(
        &self,
        layer: usize,
        x: &[f64],
        h_prev: &[f64],
    ) -> (Vec<f64>, CellCache) {
        let p = &self.gru[layer];
        let h = self.cfg.hidden;
        let mut z = p.wz.matvec(x);
        let uzh = p.uz.matvec(h_prev);
        let mut r = p.wr.matvec(x);
        let urh = p.ur.matvec(h_prev);
        let mut q = p.un.matvec(h_prev);
        let mut n = p.wn.matvec(x);
        let mut h_new = vec![0.0; h];
        for i in 0..h {
            z[i] = sigmoid(z[i] + uzh[i] + p.bz[i]);
            r[i] = sigmoid(r[i] + urh[i] + p.br[i]);
            q[i] += p.bn_h[i];
            n[i] = (n[i] + p.bn_i[i] + r[i] * q[i]).tanh();
            h_new[i] = (1.0 - z[i]) * n[i] + z[i] * h_prev[i];
        }
        let cache = CellCache {
            x: x.to_vec(),
            h_prev: h_prev.to_vec(),
            z,
            r,
            q,
            n,
        };
        (h_new, cache)
    }

    /// Full forward pass, returning predictions and the activation cache.
    fn forward(&self, input: &PredictorInput) -> (Vec<Vec2>, ForwardCache) {
        assert_eq!(
            input.controls.len(),
            self.cfg.horizon.saturating_sub(1),
            "control plan length must be horizon − 1"
        );
        let feats = self.features(input);
        let embedding: Vec<f64> = self
            .enc_w
            .matvec(&feats)
            .iter()
            .zip(&self.enc_b)
            .map(|(v, b)| (v + b).tanh())
            .collect();
        let h0: Vec<Vec<f64>> = (0..self.cfg.layers)
            .map(|l| {
                self.enc_h0_w[l]
                    .matvec(&embedding)
                    .iter()
                    .zip(&self.enc_h0_b[l])
                    .map(|(v, b)| (v + b).tanh())
                    .collect()
            })
            .collect();

        let mut h = h0.clone();
        let mut y = input.ped.position;
        let mut outputs = Vec::with_capacity(self.cfg.horizon);
        let mut steps = Vec::with_capacity(self.cfg.horizon);
        let mut h_top = Vec::with_capacity(self.cfg.horizon);
        for t in 1..=self.cfg.horizon {
            let u = input
                .controls
                .get(self.control_index(t))
                .copied()
                .unwrap_or(0.0);
            let mut x = vec![u / self.norm.u_scale];
            let mut layer_caches = Vec::with_capacity(self.cfg.layers);
            for l in 0..self.cfg.layers {
                let (h_new, cache) = self.cell_forward(l, &x, &h[l]);
                x = h_new.clone();
                h[l] = h_new;
                layer_caches.push(cache);
            }
            let top = h[self.cfg.layers - 1].clone();
            let pre = self.head_w.matvec(&top);
            let delta = Vec2::new(
                self.norm.delta_scale * (pre[0] + self.head_b[0]),
                self.norm.delta_scale * (pre[1] + self.head_b[1]),
            );
            y = y + delta;
            outputs.push(y);
            steps.push(layer_caches);
            h_top.push(top);
        }
        (
            outputs,
            ForwardCache {
                feats,
                embedding,
                h0,
                steps,
                h_top,
            },
        )
    }

    /// Reverse sweep. `dy[t−1]` is the loss adjoint of prediction `t`;
    /// `truncate` limits the sweep to decode steps `1..=truncate` (adjoints
    /// beyond it must be zero). Control sensitivities accumulate into `du`
    /// when given, weight gradients into `grads` when given.
    fn backward(
        &self,
        cache: &ForwardCache,
        dy: &[Vec2],
        truncate: usize,
        mut du: Option<&mut [f64]>,
        mut grads: Option<&mut PredictorWeights>,
    ) {
        let hid = self.cfg.hidden;
        let layers = self.cfg.layers;
        // Suffix sum of position adjoints = adjoint of the step-t delta.
        let mut acc = Vec2::ZERO;
        let mut dh: Vec<Vec<f64>> = vec![vec![0.0; hid]; layers];
        for t in (1..=truncate).rev() {
            acc = acc + dy[t - 1];
            let d_pre = [self.norm.delta_scale * acc.x, self.norm.delta_scale * acc.y];
            let top = &mut dh[layers - 1];
            self.head_w.matvec_t_add(&d_pre, top);
            if let Some(g) = grads.as_deref_mut() {
                g.head_w.add_outer(&d_pre, &cache.h_top[t - 1]);
                g.head_b[0] += d_pre[0];
                g.head_b[1] += d_pre[1];
            }
            for l in (0..layers).rev() {
                let c = &cache.steps[t - 1][l];
                let p = &self.gru[l];
                let dh_out = std::mem::replace(&mut dh[l], vec![0.0; hid]);
                let mut dan = vec![0.0; hid];
                let mut daz = vec![0.0; hid];
                let mut dar = vec![0.0; hid];
                let mut dq = vec![0.0; hid];
                let mut dh_prev = vec![0.0; hid];
                for i in 0..hid {
                    let dz = dh_out[i] * (c.h_prev[i] - c.n[i]);
                    let dn = dh_out[i] * (1.0 - c.z[i]);
                    dh_prev[i] = dh_out[i] * c.z[i];
                    dan[i] = dn * (1.0 - c.n[i] * c.n[i]);
                    let dr = dan[i] * c.q[i];
                    dq[i] = dan[i] * c.r[i];
                    daz[i] = dz * c.z[i] * (1.0 - c.z[i]);
                    dar[i] = dr * c.r[i] * (1.0 - c.r[i]);
                }
                let mut dx = vec![0.0; c.x.len()];
                p.wn.matvec_t_add(&dan, &mut dx);
                p.wz.matvec_t_add(&daz, &mut dx);
                p.wr.matvec_t_add(&dar, &mut dx);
                p.un.matvec_t_add(&dq, &mut dh_prev);
                p.uz.matvec_t_add(&daz, &mut dh_prev);
                p.ur.matvec_t_add(&dar, &mut dh_prev);
                if let Some(g) = grads.as_deref_mut() {
                    let gl = &mut g.gru[l];
                    gl.wn.add_outer(&dan, &c.x);
                    gl.un.add_outer(&dq, &c.h_prev);
                    gl.wz.add_outer(&daz, &c.x);
                    gl.uz.add_outer(&daz, &c.h_prev);
                    gl.wr.add_outer(&dar, &c.x);
                    gl.ur.add_outer(&dar, &c.h_prev);
                    for i in 0..hid {
                        gl.bn_i[i] += dan[i];
                        gl.bn_h[i] += dq[i];
                        gl.bz[i] += daz[i];
                        gl.br[i] += dar[i];
                    }
                }
                dh[l] = dh_prev;
                if l > 0 {
                    for (a, b) in dh[l - 1].iter_mut().zip(&dx) {
                        *a += b;
                    }
                } else if let Some(du) = du.as_deref_mut() {
                    let j = self.control_index(t);
                    if j < du.len() {
                        du[j] += dx[0] / self.norm.u_scale;
                    }
                }
            }
        }
        // Encoder gradients; the control Jacobian never needs this branch
        // because the initial hidden state does not depend on the plan.
        if let Some(g) = grads {
            let mut da = vec![0.0; hid];
            for l in 0..layers {
                let mut dpre = vec![0.0; hid];
                for i in 0..hid {
                    dpre[i] = dh[l][i] * (1.0 - cache.h0[l][i] * cache.h0[l][i]);
                }
                self.enc_h0_w[l].matvec_t_add(&dpre, &mut da);
                g.enc_h0_w[l].add_outer(&dpre, &cache.embedding);
                for i in 0..hid {
                    g.enc_h0_b[l][i] += dpre[i];
                }
            }
            let mut denc = vec![0.0; hid];
            for i in 0..hid {
                denc[i] = da[i] * (1.0 - cache.embedding[i] * cache.embedding[i]);
            }
            g.enc_w.add_outer(&denc, &cache.feats);
            for i in 0..hid {
                g.enc_b[i] += denc[i];
            }
        }
    }

    /// Forward pass, squared-error loss against `targets`, and gradient
    /// accumulation into `grads`. Returns the summed per-component squared
    /// error and its component count (the caller averages across a batch).
    pub(crate) fn loss_and_grads(
        &self,
        record: &Record,
        grads: &mut PredictorWeights,
    ) -> (f64, usize) {
        let (pred, cache) = self.forward(&record.input);
        let t = self.cfg.horizon;
        let mut dy = vec![Vec2::ZERO; t];
        let mut sse = 0.0;
        for k in 0..t {
            let e = pred[k] - record.targets[k];
            sse += e.x * e.x + e.y * e.y;
            dy[k] = e * 2.0;
        }
        self.backward(&cache, &dy, t, None, Some(grads));
        (sse, 2 * t)
    }

    /// Squared-error loss only (validation).
    pub(crate) fn loss(&self, record: &Record) -> (f64, usize) {
        let (pred, _) = self.forward(&record.input);
        let mut sse = 0.0;
        for (p, y) in pred.iter().zip(&record.targets) {
            let e = *p - *y;
            sse += e.x * e.x + e.y * e.y;
        }
        (sse, 2 * self.cfg.horizon)
    }

    /// Check tensor shapes against the architecture description.
    pub fn validate(&self) -> Result<(), PredictorError> {
        let bad = |what: &str| Err(PredictorError::ShapeMismatch(what.to_string()));
        let h = self.cfg.hidden;
        if self.cfg.horizon == 0 || h == 0 || self.cfg.layers == 0 {
            return bad("degenerate architecture");
        }
        let mats_ok = |m: &Mat| m.data.len() == m.rows * m.cols;
        if !mats_ok(&self.enc_w) || self.enc_w.rows != h || self.enc_w.cols != self.cfg.n_features()
        {
            return bad("encoder trunk");
        }
        if self.norm.feat_offset.len() != self.cfg.n_features()
            || self.norm.feat_scale.len() != self.cfg.n_features()
        {
            return bad("normalization vectors");
        }
        if self.enc_h0_w.len() != self.cfg.layers
            || self.enc_h0_b.len() != self.cfg.layers
            || self.gru.len() != self.cfg.layers
        {
            return bad("layer counts");
        }
        for (l, layer) in self.gru.iter().enumerate() {
            let input = if l == 0 { 1 } else { h };
            for m in [&layer.wz, &layer.wr, &layer.wn] {
                if !mats_ok(m) || m.rows != h || m.cols != input {
                    return bad("recurrent input matrices");
                }
            }
            for m in [&layer.uz, &layer.ur, &layer.un] {
                if !mats_ok(m) || m.rows != h || m.cols != h {
                    return bad("recurrent state matrices");
                }
            }
        }
        if !mats_ok(&self.head_w) || self.head_w.rows != 2 || self.head_w.cols != h {
            return bad("readout");
        }
        Ok(())
    }

    /// Write the weights as JSON.
    pub fn save(&self, path: &Path) -> Result<(), PredictorError> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Read weights written by [`PredictorWeights::save`].
    pub fn load(path: &Path) -> Result<Self, PredictorError> {
        let text = std::fs::read_to_string(path)?;
        let w: PredictorWeights = serde_json::from_str(&text)?;
        if w.version != WEIGHTS_FORMAT_VERSION {
            return Err(PredictorError::VersionMismatch {
                found: w.version,
                expected: WEIGHTS_FORMAT_VERSION,
            });
        }
        w.validate()?;
        Ok(w)
    }
}

/// Anything the planner can linearize against: horizon-`T` position
/// predictions differentiable in the planned controls.
pub trait TrajectoryPredictor {
    /// Prediction horizon `T`.
    fn horizon(&self) -> usize;

    /// Predicted pedestrian positions for steps `1..=T`.
    fn predict(&self, input: &PredictorInput) -> Vec<Vec2>;

    /// Per-step Jacobians of the prediction in the control plan: element
    /// `k−1` is the 2×(T−1) matrix `∂ŷ_k/∂u`.
    fn input_jacobian(&self, input: &PredictorInput) -> Vec<Mat>;
}

impl TrajectoryPredictor for PredictorWeights {
    fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    fn predict(&self, input: &PredictorInput) -> Vec<Vec2> {
        self.forward(input).0
    }

    fn input_jacobian(&self, input: &PredictorInput) -> Vec<Mat> {
        let t_max = self.cfg.horizon;
        let n_u = t_max.saturating_sub(1);
        let (_, cache) = self.forward(input);
        let mut jac = Vec::with_capacity(t_max);
        let mut dy = vec![Vec2::ZERO; t_max];
        for k in 1..=t_max {
            let mut m = Mat::zeros(2, n_u);
            for (row, seed) in [(0usize, Vec2::new(1.0, 0.0)), (1, Vec2::new(0.0, 1.0))] {
                let mut du = vec![0.0; n_u];
                dy[k - 1] = seed;
                self.backward(&cache, &dy, k, Some(&mut du), None);
                dy[k - 1] = Vec2::ZERO;
                m.data[row * n_u..(row + 1) * n_u].copy_from_slice(&du);
            }
            jac.push(m);
        }
        jac
    }
}
