//! Split-conformal error bounds for the trajectory predictor.
//!
//! Calibration scores are per-step prediction errors `R_k = ‖ŷ_k − y_k‖₂` on
//! a held-out set. For a per-step miss budget `γ` the bound is the
//! `⌈(n+1)(1−γ)⌉`-th smallest score (+∞ when the rank exceeds `n`), which
//! covers a fresh exchangeable sample with probability at least `1−γ`.
//! Scores are grouped by scene region — initial vehicle-pedestrian distance
//! crossed with mean planned speed — so bounds adapt to interaction
//! difficulty; sparsely populated regions fall back to +∞.

use crate::predictor::{PredictorInput, Record, TrajectoryPredictor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

/// Errors from calibration and bound-table persistence.
#[derive(Debug, Error)]
pub enum ConformalError {
    #[error("calibration score is NaN")]
    NanScore,
    #[error("invalid region partition: {0}")]
    BadPartition(String),
    #[error("record has {got} targets, predictor horizon is {horizon}")]
    RecordShape { got: usize, horizon: usize },
    #[error("bound table i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bound table line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// Rank-based conformal quantile: the `⌈(n+1)(1−γ)⌉`-th smallest score, or
/// +∞ when the rank exceeds the sample size. A small slack keeps borderline
/// products like `10·0.9` from rounding the rank up spuriously.
pub fn conformal_quantile(scores: &[f64], gamma: f64) -> Result<f64, ConformalError> {
    if scores.iter().any(|s| s.is_nan()) {
        return Err(ConformalError::NanScore);
    }
    let n = scores.len();
    let rank = ((n + 1) as f64 * (1.0 - gamma) - 1e-9).ceil().max(1.0) as usize;
    if rank > n {
        return Ok(f64::INFINITY);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("no NaN after check"));
    Ok(sorted[rank - 1])
}

/// Region grid over (initial distance, mean planned speed). Edges start the
/// first bucket; the last bucket is open-ended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Partition {
    pub distance_edges: Vec<f64>,
    pub speed_edges: Vec<f64>,
}

impl Default for Partition {
    fn default() -> Self {
        Partition {
            distance_edges: vec![0.0, 5.0, 10.0, 20.0],
            // The last edge must sit strictly below the control ceiling:
            // plans saturated at the speed limit land exactly on the ceiling,
            // and an open-ended bucket starting there could never accumulate
            // calibration mass from interior-speed driving.
            speed_edges: vec![0.0, 5.0, 10.0],
        }
    }
}

/// Bucket index for a value in half-open bins `[e_i, e_{i+1})`.
fn bucket(edges: &[f64], v: f64) -> usize {
    edges.partition_point(|e| *e <= v).saturating_sub(1)
}

impl Partition {
    /// Check edge lists are usable: non-empty, finite, strictly ascending,
    /// starting at the domain floor 0.
    pub fn validate(&self) -> Result<(), ConformalError> {
        for (name, edges) in [
            ("distance_edges", &self.distance_edges),
            ("speed_edges", &self.speed_edges),
        ] {
            if edges.is_empty() {
                return Err(ConformalError::BadPartition(format!("{name} is empty")));
            }
            if edges[0] != 0.0 {
                return Err(ConformalError::BadPartition(format!(
                    "{name} must start at 0"
                )));
            }
            if edges.windows(2).any(|w| !(w[0] < w[1])) || edges.iter().any(|e| !e.is_finite()) {
                return Err(ConformalError::BadPartition(format!(
                    "{name} must be finite and strictly ascending"
                )));
            }
        }
        Ok(())
    }

    /// Total number of regions.
    pub fn n_regions(&self) -> usize {
        self.distance_edges.len() * self.speed_edges.len()
    }
}

/// (distance bucket, speed bucket) pair identifying one region.
pub type RegionId = (usize, usize);

/// Map a prediction query to its region: current vehicle-pedestrian distance
/// crossed with the plan's mean speed.
pub fn assign_region(partition: &Partition, input: &PredictorInput, dt: f64) -> RegionId {
    let distance = input.ped.position.dist(input.vehicle.point());
    let mean_speed = if input.controls.is_empty() {
        0.0
    } else {
        input.controls.iter().sum::<f64>() / input.controls.len() as f64 / dt
    };
    (
        bucket(&partition.distance_edges, distance),
        bucket(&partition.speed_edges, mean_speed),
    )
}

/// Calibrated bounds for one region.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionBounds {
    /// Calibration records that landed in the region.
    pub count: usize,
    /// Per-step bounds, steps `1..=horizon`.
    pub bounds: Vec<f64>,
}

/// Per-region, per-step conformal bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundTable {
    /// Per-step miss budget.
    pub gamma: f64,
    pub horizon: usize,
    pub n_min: usize,
    pub partition: Partition,
    pub entries: BTreeMap<RegionId, RegionBounds>,
}

impl BoundTable {
    /// Bounds for a region; unseen regions are unbounded.
    pub fn lookup(&self, region: RegionId) -> Vec<f64> {
        match self.entries.get(&region) {
            Some(rb) => rb.bounds.clone(),
            None => vec![f64::INFINITY; self.horizon],
        }
    }

    /// Bounds for the region a query falls in.
    pub fn bounds_for(&self, input: &PredictorInput, dt: f64) -> Vec<f64> {
        self.lookup(assign_region(&self.partition, input, dt))
    }

    /// Whether the region a query falls in has enough calibration mass for
    /// finite bounds.
    pub fn region_is_populated(&self, input: &PredictorInput, dt: f64) -> bool {
        self.entries
            .get(&assign_region(&self.partition, input, dt))
            .map(|rb| rb.count >= self.n_min)
            .unwrap_or(false)
    }

    /// Serialize as CSV: `# key=value` header lines, then one row per
    /// region and step.
    pub fn save_csv(&self, path: &Path) -> Result<(), ConformalError> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    fn edges_str(edges: &[f64]) -> String {
        edges
            .iter()
            .map(|e| e.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# gamma={}\n", self.gamma));
        out.push_str(&format!("# horizon={}\n", self.horizon));
        out.push_str(&format!("# n_min={}\n", self.n_min));
        out.push_str(&format!(
            "# distance_edges={}\n",
            Self::edges_str(&self.partition.distance_edges)
        ));
        out.push_str(&format!(
            "# speed_edges={}\n",
            Self::edges_str(&self.partition.speed_edges)
        ));
        out.push_str("distance_bin,speed_bin,k,bound,count\n");
        for ((db, sb), rb) in &self.entries {
            for (k0, b) in rb.bounds.iter().enumerate() {
                out.push_str(&format!("{},{},{},{},{}\n", db, sb, k0 + 1, b, rb.count));
            }
        }
        out
    }

    /// Read a table written by [`BoundTable::save_csv`].
    pub fn load_csv(path: &Path) -> Result<Self, ConformalError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_csv(&text)
    }

    pub fn from_csv(text: &str) -> Result<Self, ConformalError> {
        let mut gamma = None;
        let mut horizon = None;
        let mut n_min = None;
        let mut distance_edges = None;
        let mut speed_edges = None;
        let mut entries: BTreeMap<RegionId, RegionBounds> = BTreeMap::new();
        let bad = |line: usize, reason: &str| ConformalError::Parse {
            line,
            reason: reason.to_string(),
        };
        let parse_edges = |s: &str, line: usize| -> Result<Vec<f64>, ConformalError> {
            s.split(',')
                .map(|t| t.trim().parse::<f64>().map_err(|_| bad(line, "bad edge")))
                .collect()
        };
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let (key, value) = rest
                    .split_once('=')
                    .ok_or_else(|| bad(line_no, "header without '='"))?;
                let value = value.trim();
                match key.trim() {
                    "gamma" => gamma = Some(value.parse().map_err(|_| bad(line_no, "bad gamma"))?),
                    "horizon" => {
                        horizon = Some(value.parse().map_err(|_| bad(line_no, "bad horizon"))?)
                    }
                    "n_min" => n_min = Some(value.parse().map_err(|_| bad(line_no, "bad n_min"))?),
                    "distance_edges" => distance_edges = Some(parse_edges(value, line_no)?),
                    "speed_edges" => speed_edges = Some(parse_edges(value, line_no)?),
                    other => return Err(bad(line_no, &format!("unknown header '{other}'"))),
                }
                continue;
            }
            if line == "distance_bin,speed_bin,k,bound,count" {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(bad(line_no, "expected 5 fields"));
            }
            let db: usize = fields[0].parse().map_err(|_| bad(line_no, "bad bin"))?;
            let sb: usize = fields[1].parse().map_err(|_| bad(line_no, "bad bin"))?;
            let k: usize = fields[2].parse().map_err(|_| bad(line_no, "bad step"))?;
            let bound: f64 = fields[3].parse().map_err(|_| bad(line_no, "bad bound"))?;
            let count: usize = fields[4].parse().map_err(|_| bad(line_no, "bad count"))?;
            let horizon = horizon.ok_or_else(|| bad(line_no, "row before horizon header"))?;
            if k == 0 || k > horizon {
                return Err(bad(line_no, "step outside horizon"));
            }
            let entry = entries.entry((db, sb)).or_insert_with(|| RegionBounds {
                count,
                bounds: vec![f64::NAN; horizon],
            });
            entry.count = count;
            entry.bounds[k - 1] = bound;
        }
        let table = BoundTable {
            gamma: gamma.ok_or_else(|| bad(0, "missing gamma header"))?,
            horizon: horizon.ok_or_else(|| bad(0, "missing horizon header"))?,
            n_min: n_min.ok_or_else(|| bad(0, "missing n_min header"))?,
            partition: Partition {
                distance_edges: distance_edges
                    .ok_or_else(|| bad(0, "missing distance_edges header"))?,
                speed_edges: speed_edges.ok_or_else(|| bad(0, "missing speed_edges header"))?,
            },
            entries,
        };
        if table
            .entries
            .values()
            .any(|rb| rb.bounds.iter().any(|b| b.is_nan()))
        {
            return Err(bad(0, "incomplete per-step rows for some region"));
        }
        table.partition.validate()?;
        Ok(table)
    }
}

/// Build a bound table from held-out records. `alpha` is the joint miss
/// budget over the horizon; each step gets `γ = α/T`. Regions with fewer
/// than `n_min` records keep +∞ bounds.
pub fn calibrate<P: TrajectoryPredictor>(
    predictor: &P,
    records: &[Record],
    partition: Partition,
    alpha: f64,
    n_min: usize,
    dt: f64,
) -> Result<BoundTable, ConformalError> {
    partition.validate()?;
    let horizon = predictor.horizon();
    let gamma = alpha / horizon as f64;
    let mut per_region: BTreeMap<RegionId, Vec<Vec<f64>>> = BTreeMap::new();
    for r in records {
        if r.targets.len() != horizon {
            return Err(ConformalError::RecordShape {
                got: r.targets.len(),
                horizon,
            });
        }
        let region = assign_region(&partition, &r.input, dt);
        let pred = predictor.predict(&r.input);
        let scores = per_region
            .entry(region)
            .or_insert_with(|| vec![Vec::new(); horizon]);
        for k in 0..horizon {
            scores[k].push(pred[k].dist(r.targets[k]));
        }
    }
    let mut entries = BTreeMap::new();
    for (region, scores) in per_region {
        let count = scores[0].len();
        let bounds = if count < n_min {
            vec![f64::INFINITY; horizon]
        } else {
            scores
                .iter()
                .map(|s| conformal_quantile(s, gamma))
                .collect::<Result<Vec<_>, _>>()?
        };
        entries.insert(region, RegionBounds { count, bounds });
    }
    Ok(BoundTable {
        gamma,
        horizon,
        n_min,
        partition,
        entries,
    })
}

/// Empirical coverage of a bound table on fresh records.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageStats {
    /// Fraction of evaluated records covered at each step.
    pub per_step: Vec<f64>,
    /// Fraction covered simultaneously at every step.
    pub joint: f64,
    /// Records evaluated (region had finite bounds).
    pub n_evaluated: usize,
    /// Records skipped because their region lacked calibration mass.
    pub n_skipped: usize,
}

/// Measure coverage of `table` on `records`, skipping records whose region
/// is unpopulated (their +∞ bounds would cover vacuously).
pub fn coverage<P: TrajectoryPredictor>(
    predictor: &P,
    table: &BoundTable,
    records: &[Record],
    dt: f64,
) -> CoverageStats {
    let horizon = table.horizon;
    let mut hit = vec![0usize; horizon];
    let mut joint_hits = 0usize;
    let mut n_evaluated = 0usize;
    let mut n_skipped = 0usize;
    for r in records {
        if !table.region_is_populated(&r.input, dt) {
            n_skipped += 1;
            continue;
        }
        let bounds = table.bounds_for(&r.input, dt);
        let pred = predictor.predict(&r.input);
        n_evaluated += 1;
        let mut all = true;
        for k in 0..horizon {
            if pred[k].dist(r.targets[k]) <= bounds[k] {
                hit[k] += 1;
            } else {
                all = false;
            }
        }
        if all {
            joint_hits += 1;
        }
    }
    let denom = n_evaluated.max(1) as f64;
    CoverageStats {
        per_step: hit.iter().map(|&h| h as f64 / denom).collect(),
        joint: joint_hits as f64 / denom,
        n_evaluated,
        n_skipped,
    }
}
