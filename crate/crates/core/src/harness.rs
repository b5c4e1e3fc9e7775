//! Experiment plumbing: run configuration, dataset generation, metric
//! aggregation, controller evaluation, the shortcut benchmark, and artifact
//! persistence.
//!
//! The pipeline is a pure function of the configuration file and the seeds
//! recorded in it: `gen-data` rolls out a randomized behavior policy and
//! slices sliding windows into disjoint training and calibration files,
//! `train` fits the predictor, `calibrate` turns held-out residuals into a
//! region-indexed bound table, and `eval`/`bench-shortcut` run seeded
//! closed-loop episodes and aggregate driving metrics. Artifacts are plain
//! JSON-lines and comma-separated tables so external tooling can consume
//! them directly.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{AcpConfig, AcpContext, AcpController, ApfConfig, ApfController};
use crate::conformal::{calibrate, BoundTable, ConformalError, Partition};
use crate::mpc::{MpcContext, MpcController, OuterConfig};
use crate::ocp::{ControlLimits, CostSpec, LinearDisplacement, SafetyConstants};
use crate::predictor::{
    train, Norm, PedSnapshot, PredictorError, PredictorInput, PredictorWeights, Record,
    TrainConfig,
};
use crate::scp::ScpConfig;
use crate::sim::{
    run_episode, EpisodeLog, EpisodeStatus, Policy, PolicyOutput, Scenario, SfmParams, SimError,
    WorldState,
};

/// Environment variable overriding the configured output directory.
pub const OUTPUT_ENV: &str = "SCP2_OUT";

/// Anything the pipeline can fail on.
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing artifact {path} — run `{hint}` first")]
    MissingArtifact { path: PathBuf, hint: String },
    #[error("config: {0}")]
    Config(String),
    #[error("bad record in {path} line {line}: {reason}")]
    BadRecord {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("metric {name} = {value} outside [0, 1]")]
    MetricRange { name: &'static str, value: f64 },
    #[error("replay mismatch: {0}")]
    ReplayMismatch(String),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Conformal(#[from] ConformalError),
}

fn io_err(path: &Path, source: std::io::Error) -> HarnessError {
    HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Calibration settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConformalSection {
    /// Joint miss budget over the horizon.
    pub alpha: f64,
    /// Minimum records per region before its bounds count as calibrated.
    pub n_min: usize,
    pub partition: Partition,
}

impl Default for ConformalSection {
    fn default() -> Self {
        ConformalSection {
            alpha: 0.15,
            n_min: 50,
            partition: Partition::default(),
        }
    }
}

/// Dataset-generation settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// Total sliding-window records across both files.
    pub n_records: usize,
    /// Fraction of records routed to the training file.
    pub train_fraction: f64,
    /// Behavior-policy speed resampling period in steps.
    pub resample_every: usize,
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            n_records: 20_000,
            train_fraction: 0.5,
            resample_every: 10,
            seed: 1,
        }
    }
}

/// Evaluation settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub n_episodes: usize,
    pub seed: u64,
    /// m/s², comfort reference normalizing the acceleration metric.
    pub accel_ref: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            n_episodes: 200,
            seed: 7,
            accel_ref: 5.0,
        }
    }
}

/// Shortcut-benchmark settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    /// Pedestrian counts to benchmark at.
    pub m_values: Vec<usize>,
    pub n_episodes: usize,
    pub seed: u64,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            m_values: vec![1, 5, 9],
            n_episodes: 10,
            seed: 11,
        }
    }
}

/// Whole-pipeline configuration, one file per experiment.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub sfm: SfmParams,
    pub train: TrainConfig,
    pub conformal: ConformalSection,
    pub scp: ScpConfig,
    pub mpc: OuterConfig,
    pub cost: CostSpec,
    pub limits: ControlLimits,
    pub safety: SafetyConstants,
    pub apf: ApfConfig,
    pub acp: AcpConfig,
    pub dataset: DatasetSection,
    pub eval: EvalSection,
    pub bench: BenchSection,
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Cross-section consistency checks beyond per-struct invariants.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.safety.d_safe != self.scenario.d_safe {
            return bad(format!(
                "safety.d_safe ({}) must equal scenario.d_safe ({})",
                self.safety.d_safe, self.scenario.d_safe
            ));
        }
        if self.limits.u_max > self.scenario.u_max() + 1e-12 {
            return bad(format!(
                "limits.u_max ({}) exceeds the scenario's per-step maximum ({})",
                self.limits.u_max,
                self.scenario.u_max()
            ));
        }
        if self.train.model.horizon < 2 {
            return bad("train.model.horizon must be at least 2".into());
        }
        if !(0.0 < self.dataset.train_fraction && self.dataset.train_fraction < 1.0) {
            return bad("dataset.train_fraction must lie strictly between 0 and 1".into());
        }
        if self.dataset.resample_every == 0 {
            return bad("dataset.resample_every must be positive".into());
        }
        if !(0.0 < self.conformal.alpha && self.conformal.alpha < 1.0) {
            return bad("conformal.alpha must lie strictly between 0 and 1".into());
        }
        if self.eval.accel_ref <= 0.0 {
            return bad("eval.accel_ref must be positive".into());
        }
        self.conformal.partition.validate()?;
        Ok(())
    }

    /// Feature normalization matching the configured scenario.
    pub fn norm(&self) -> Norm {
        Norm::new(
            self.scenario.road_length,
            self.scenario.road_width,
            self.scenario.u_max(),
            self.sfm.v_ped_max,
            self.scenario.dt,
            self.train.model.include_velocity,
        )
    }
}

/// Artifact locations under one output root.
#[derive(Debug, Clone)]
pub struct Paths {
    pub root: PathBuf,
}

impl Paths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Paths { root: root.into() }
    }

    /// Configured output directory, overridable by the environment variable
    /// named by [`OUTPUT_ENV`] (passed in by the caller so resolution stays
    /// testable).
    pub fn resolve(cfg: &RunConfig, env_override: Option<&str>) -> Self {
        match env_override {
            Some(dir) if !dir.is_empty() => Paths::new(dir),
            _ => Paths::new(cfg.output_dir.clone()),
        }
    }

    pub fn train_data(&self) -> PathBuf {
        self.root.join("train.jsonl")
    }
    pub fn cal_data(&self) -> PathBuf {
        self.root.join("cal.jsonl")
    }
    pub fn weights(&self) -> PathBuf {
        self.root.join("weights.json")
    }
    pub fn train_report(&self) -> PathBuf {
        self.root.join("train_report.json")
    }
    pub fn bounds(&self) -> PathBuf {
        self.root.join("bounds.csv")
    }
    pub fn bench(&self) -> PathBuf {
        self.root.join("bench.csv")
    }
    pub fn eval_dir(&self, kind: ControllerKind, m: usize) -> PathBuf {
        self.root.join(format!("eval_{}_m{}", kind.label(), m))
    }
}

// ---------------------------------------------------------------------------
// Dataset generation
// ---------------------------------------------------------------------------

/// Deterministically derive an independent stream seed from a base seed.
pub fn mix_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Behavior policy for data collection: a piecewise-constant speed, redrawn
/// uniformly from the admissible range every `resample_every` steps, so the
/// dataset excites every speed regime the controllers can command.
pub struct RandomSpeedPolicy {
    resample_every: usize,
    rng: ChaCha12Rng,
    current: f64,
    steps_until_redraw: usize,
}

impl RandomSpeedPolicy {
    pub fn new(resample_every: usize, seed: u64) -> Self {
        assert!(resample_every > 0, "resample period must be positive");
        RandomSpeedPolicy {
            resample_every,
            rng: ChaCha12Rng::seed_from_u64(seed),
            current: 0.0,
            steps_until_redraw: 0,
        }
    }
}

impl Policy for RandomSpeedPolicy {
    fn control(
        &mut self,
        _world: &WorldState,
        scenario: &Scenario,
    ) -> Result<PolicyOutput, SimError> {
        if self.steps_until_redraw == 0 {
            self.current = self.rng.random_range(0.0..=scenario.u_max());
            self.steps_until_redraw = self.resample_every;
        }
        self.steps_until_redraw -= 1;
        Ok(PolicyOutput::plain(self.current))
    }
}

/// Slice one episode into supervised records: every window of `horizon`
/// consecutive steps yields, per pedestrian, the pre-window scene, the
/// controls executed during the window's first `horizon − 1` steps, and the
/// pedestrian positions after each of the `horizon` steps.
pub fn extract_windows(log: &EpisodeLog, horizon: usize) -> Vec<Record> {
    let n = log.steps.len();
    let mut out = Vec::new();
    if n < horizon {
        return out;
    }
    for s in 0..=(n - horizon) {
        let world = if s == 0 {
            &log.initial
        } else {
            &log.steps[s - 1].world
        };
        let controls: Vec<f64> = log.steps[s..s + horizon - 1]
            .iter()
            .map(|r| r.control)
            .collect();
        for (p, ped) in world.pedestrians.iter().enumerate() {
            let targets = (0..horizon)
                .map(|k| log.steps[s + k].world.pedestrians[p].position)
                .collect();
            out.push(Record {
                input: PredictorInput {
                    vehicle: world.vehicle,
                    ped: PedSnapshot {
                        position: ped.position,
                        velocity: ped.velocity,
                    },
                    controls: controls.clone(),
                },
                targets,
            });
        }
    }
    out
}

/// Whether episode `i` feeds the training file under the given fraction
/// (records of one episode never straddle the split, so no window leaks
/// between files).
fn episode_goes_to_train(i: u64, fraction: f64) -> bool {
    (((i + 1) as f64) * fraction).floor() > ((i as f64) * fraction).floor()
}

/// Roll out the behavior policy and slice windows until both splits hold
/// their share of `n_records`. Episodes run without safety termination so
/// close encounters appear in the data; each episode's windows go wholly to
/// one split.
pub fn generate_dataset(cfg: &RunConfig) -> Result<(Vec<Record>, Vec<Record>), HarnessError> {
    let horizon = cfg.train.model.horizon;
    if cfg.scenario.n_pedestrians == 0 {
        return Err(HarnessError::Config(
            "dataset generation needs scenario.n_pedestrians ≥ 1".into(),
        ));
    }
    let scenario = Scenario {
        terminate_on_violation: false,
        ..cfg.scenario.clone()
    };
    let n_train_target = ((cfg.dataset.n_records as f64) * cfg.dataset.train_fraction).round()
        as usize;
    let n_cal_target = cfg.dataset.n_records - n_train_target;
    let mut train_recs: Vec<Record> = Vec::new();
    let mut cal_recs: Vec<Record> = Vec::new();
    let episode_cap = 200 + 20 * cfg.dataset.n_records as u64;
    let mut i: u64 = 0;
    while train_recs.len() < n_train_target || cal_recs.len() < n_cal_target {
        if i >= episode_cap {
            return Err(HarnessError::Config(format!(
                "scenario yields too few windows: {} episodes produced {}/{} train and {}/{} \
                 calibration records",
                i,
                train_recs.len(),
                n_train_target,
                cal_recs.len(),
                n_cal_target
            )));
        }
        let episode_seed = mix_seed(cfg.dataset.seed, 2 * i);
        let policy_seed = mix_seed(cfg.dataset.seed, 2 * i + 1);
        let mut policy = RandomSpeedPolicy::new(cfg.dataset.resample_every, policy_seed);
        let log = run_episode(&mut policy, &scenario, &cfg.sfm, episode_seed);
        let records = extract_windows(&log, horizon);
        if episode_goes_to_train(i, cfg.dataset.train_fraction) {
            train_recs.extend(records);
        } else {
            cal_recs.extend(records);
        }
        i += 1;
    }
    train_recs.truncate(n_train_target);
    cal_recs.truncate(n_cal_target);
    Ok((train_recs, cal_recs))
}

/// Write records as one JSON object per line.
pub fn save_records(path: &Path, records: &[Record]) -> Result<(), HarnessError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serialization"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Read records written by [`save_records`].
pub fn load_records(path: &Path) -> Result<Vec<Record>, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| HarnessError::BadRecord {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Composite driving score: 100·(0.8·success + 0.1·speed + 0.1·comfort),
/// all inputs normalized to [0, 1].
pub fn pdm_score(sr_norm: f64, v_norm: f64, c_norm: f64) -> Result<f64, HarnessError> {
    for (name, value) in [
        ("sr_norm", sr_norm),
        ("v_norm", v_norm),
        ("c_norm", c_norm),
    ] {
        if !(-1e-12..=1.0 + 1e-12).contains(&value) || !value.is_finite() {
            return Err(HarnessError::MetricRange { name, value });
        }
    }
    Ok(100.0 * (0.8 * sr_norm + 0.1 * v_norm + 0.1 * c_norm))
}

/// Per-episode driving and solver statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub seed: u64,
    pub status: EpisodeStatus,
    pub success: bool,
    pub steps: usize,
    /// m, vehicle progress over the episode.
    pub distance: f64,
    /// m/s, progress divided by elapsed time (failures included at their
    /// failure time).
    pub avg_speed: f64,
    /// m/s², mean |Δu|/dt² over executed steps (from rest).
    pub avg_accel: f64,
    /// m, closest on-road pedestrian approach (+inf when never exposed).
    pub min_distance: f64,
    /// Mean solver laps per step, when the controller reports them.
    pub outer_iter_mean: Option<f64>,
    /// Mean inner solves per step, when reported.
    pub inner_iter_mean: Option<f64>,
    /// Fraction of steps exiting through the bound-growth shortcut.
    pub shortcut_rate: Option<f64>,
    pub rejected_steps: usize,
    pub fail_safe_steps: usize,
    pub kkt_stationarity_max: Option<f64>,
    pub kkt_comp_slack_max: Option<f64>,
    pub recheck_max: Option<f64>,
}

fn max_opt(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x.max(y)),
        (x, None) => x,
        (None, y) => y,
    }
}

/// Reduce one episode log to its metrics row.
pub fn episode_metrics(log: &EpisodeLog, dt: f64) -> EpisodeMetrics {
    let steps = log.steps.len();
    let distance = log.distance_traveled();
    let duration = steps as f64 * dt;
    let avg_speed = if steps > 0 { distance / duration } else { 0.0 };
    let mut jerk_sum = 0.0;
    let mut prev_u = 0.0;
    for s in &log.steps {
        jerk_sum += (s.control - prev_u).abs();
        prev_u = s.control;
    }
    let avg_accel = if steps > 0 {
        jerk_sum / steps as f64 / (dt * dt)
    } else {
        0.0
    };

    let mut diag_steps = 0usize;
    let mut outer_total = 0u64;
    let mut inner_total = 0u64;
    let mut shortcut_steps = 0usize;
    let mut rejected_steps = 0usize;
    let mut fail_safe_steps = 0usize;
    let mut kkt_s = None;
    let mut kkt_c = None;
    let mut recheck = None;
    for s in &log.steps {
        if let Some(d) = &s.diag {
            diag_steps += 1;
            outer_total += u64::from(d.outer_iterations);
            inner_total += u64::from(d.inner_iterations);
            shortcut_steps += usize::from(d.shortcut);
            rejected_steps += usize::from(d.rejected);
            fail_safe_steps += usize::from(d.fail_safe);
            kkt_s = max_opt(kkt_s, d.kkt_stationarity);
            kkt_c = max_opt(kkt_c, d.kkt_comp_slack);
            recheck = max_opt(recheck, d.shortcut_recheck_step);
        }
    }
    let per_step = |total: f64| {
        if diag_steps > 0 {
            Some(total / diag_steps as f64)
        } else {
            None
        }
    };
    EpisodeMetrics {
        seed: log.seed,
        status: log.status.clone(),
        success: log.status == EpisodeStatus::ReachedGoal,
        steps,
        distance,
        avg_speed,
        avg_accel,
        min_distance: log.min_distance,
        outer_iter_mean: per_step(outer_total as f64),
        inner_iter_mean: per_step(inner_total as f64),
        shortcut_rate: per_step(shortcut_steps as f64),
        rejected_steps,
        fail_safe_steps,
        kkt_stationarity_max: kkt_s,
        kkt_comp_slack_max: kkt_c,
        recheck_max: recheck,
    }
}

/// Aggregated evaluation result for one controller at one pedestrian count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub controller: String,
    pub m: usize,
    pub n_episodes: usize,
    pub success_rate: f64,
    /// m/s, mean of per-episode average speeds.
    pub avg_speed: f64,
    /// m/s², mean of per-episode average accelerations.
    pub avg_accel: f64,
    pub v_norm: f64,
    pub c_norm: f64,
    pub pdm_score: f64,
    /// Mean solver laps per step across all diagnosed steps.
    pub outer_iter_mean: Option<f64>,
    pub shortcut_rate: Option<f64>,
    pub fail_safe_rate: Option<f64>,
    pub kkt_stationarity_max: Option<f64>,
    pub kkt_comp_slack_max: Option<f64>,
    pub episodes: Vec<EpisodeMetrics>,
    /// s, total solver wall time (not serialized into summary tables; kept
    /// for the benchmark report).
    #[serde(skip)]
    pub solve_time_s: f64,
}

impl MetricsSummary {
    /// Aggregate episode logs under the configured normalization.
    pub fn from_logs(
        controller: &str,
        m: usize,
        logs: &[EpisodeLog],
        cfg: &RunConfig,
    ) -> Result<Self, HarnessError> {
        if logs.is_empty() {
            return Err(HarnessError::Config("no episodes to aggregate".into()));
        }
        let episodes: Vec<EpisodeMetrics> = logs
            .iter()
            .map(|l| episode_metrics(l, cfg.scenario.dt))
            .collect();
        let n = episodes.len() as f64;
        let success_rate = episodes.iter().filter(|e| e.success).count() as f64 / n;
        let avg_speed = episodes.iter().map(|e| e.avg_speed).sum::<f64>() / n;
        let avg_accel = episodes.iter().map(|e| e.avg_accel).sum::<f64>() / n;
        let v_norm = (avg_speed / cfg.scenario.v_max).clamp(0.0, 1.0);
        let c_norm = (1.0 - avg_accel / cfg.eval.accel_ref).max(0.0);
        let pdm = pdm_score(success_rate, v_norm, c_norm)?;

        let mut diag_steps = 0usize;
        let mut outer_total = 0.0;
        let mut shortcut_total = 0.0;
        let mut fail_safe_total = 0.0;
        let mut kkt_s = None;
        let mut kkt_c = None;
        for (log, e) in logs.iter().zip(&episodes) {
            for s in &log.steps {
                if let Some(d) = &s.diag {
                    diag_steps += 1;
                    outer_total += f64::from(d.outer_iterations);
                    shortcut_total += f64::from(u8::from(d.shortcut));
                    fail_safe_total += f64::from(u8::from(d.fail_safe));
                }
            }
            kkt_s = max_opt(kkt_s, e.kkt_stationarity_max);
            kkt_c = max_opt(kkt_c, e.kkt_comp_slack_max);
        }
        let per_step = |total: f64| {
            if diag_steps > 0 {
                Some(total / diag_steps as f64)
            } else {
                None
            }
        };
        Ok(MetricsSummary {
            controller: controller.to_string(),
            m,
            n_episodes: episodes.len(),
            success_rate,
            avg_speed,
            avg_accel,
            v_norm,
            c_norm,
            pdm_score: pdm,
            outer_iter_mean: per_step(outer_total),
            shortcut_rate: per_step(shortcut_total),
            fail_safe_rate: per_step(fail_safe_total),
            kkt_stationarity_max: kkt_s,
            kkt_comp_slack_max: kkt_c,
            episodes,
            solve_time_s: 0.0,
        })
    }
}

fn status_label(status: &EpisodeStatus) -> &'static str {
    match status {
        EpisodeStatus::ReachedGoal => "reached_goal",
        EpisodeStatus::SafetyViolation => "safety_violation",
        EpisodeStatus::Timeout => "timeout",
        EpisodeStatus::Aborted(_) => "aborted",
    }
}

fn cell(v: f64) -> String {
    format!("{v}")
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(cell).unwrap_or_default()
}

/// One-line-per-episode table for a summary.
pub fn episodes_csv(summary: &MetricsSummary) -> String {
    let mut out = String::from(
        "controller,m,episode,seed,status,success,steps,distance_m,avg_speed_mps,\
         avg_accel_mps2,min_distance_m,outer_iter_mean,inner_iter_mean,shortcut_rate,\
         rejected_steps,fail_safe_steps,kkt_stationarity_max,kkt_comp_slack_max,recheck_max\n",
    );
    for (i, e) in summary.episodes.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            summary.controller,
            summary.m,
            i,
            e.seed,
            status_label(&e.status),
            e.success,
            e.steps,
            cell(e.distance),
            cell(e.avg_speed),
            cell(e.avg_accel),
            cell(e.min_distance),
            opt_cell(e.outer_iter_mean),
            opt_cell(e.inner_iter_mean),
            opt_cell(e.shortcut_rate),
            e.rejected_steps,
            e.fail_safe_steps,
            opt_cell(e.kkt_stationarity_max),
            opt_cell(e.kkt_comp_slack_max),
            opt_cell(e.recheck_max),
        ));
    }
    out
}

/// One-line aggregate table for a summary.
pub fn summary_csv(summary: &MetricsSummary) -> String {
    let mut out = String::from(
        "controller,m,n_episodes,success_rate,avg_speed_mps,avg_accel_mps2,v_norm,c_norm,\
         pdm_score,outer_iter_mean,shortcut_rate,fail_safe_rate,kkt_stationarity_max,\
         kkt_comp_slack_max\n",
    );
    out.push_str(&format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
        summary.controller,
        summary.m,
        summary.n_episodes,
        cell(summary.success_rate),
        cell(summary.avg_speed),
        cell(summary.avg_accel),
        cell(summary.v_norm),
        cell(summary.c_norm),
        cell(summary.pdm_score),
        opt_cell(summary.outer_iter_mean),
        opt_cell(summary.shortcut_rate),
        opt_cell(summary.fail_safe_rate),
        opt_cell(summary.kkt_stationarity_max),
        opt_cell(summary.kkt_comp_slack_max),
    ));
    out
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Which controller an evaluation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControllerKind {
    /// Bound-refreshing receding-horizon planner.
    Scp2,
    /// Adaptive-bound planner (single solve per step, online quantile).
    Acp,
    /// Reactive potential field.
    Apf,
}

impl ControllerKind {
    pub fn label(&self) -> &'static str {
        match self {
            ControllerKind::Scp2 => "scp2",
            ControllerKind::Acp => "acp",
            ControllerKind::Apf => "apf",
        }
    }
}

impl FromStr for ControllerKind {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "scp2" => Ok(ControllerKind::Scp2),
            "acp" => Ok(ControllerKind::Acp),
            "apf" => Ok(ControllerKind::Apf),
            other => Err(HarnessError::Config(format!(
                "unknown controller '{other}' (expected scp2, acp, or apf)"
            ))),
        }
    }
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Trained artifacts an evaluation may need (none for the potential field).
#[derive(Clone, Copy, Default)]
pub struct EvalArtifacts<'a> {
    pub weights: Option<&'a PredictorWeights>,
    pub table: Option<&'a BoundTable>,
}

/// Evaluation result: the aggregate summary plus the raw logs it came from.
#[derive(Debug)]
pub struct EvalOutput {
    pub summary: MetricsSummary,
    pub logs: Vec<EpisodeLog>,
}

/// Run `n_episodes` fresh-controller episodes (seeds derived from `seed`)
/// and aggregate them. `shortcut_override` forces the outer-loop shortcut
/// on or off regardless of the configured value.
pub fn evaluate(
    cfg: &RunConfig,
    artifacts: EvalArtifacts<'_>,
    kind: ControllerKind,
    m: usize,
    n_episodes: usize,
    seed: u64,
    shortcut_override: Option<bool>,
) -> Result<EvalOutput, HarnessError> {
    if n_episodes == 0 {
        return Err(HarnessError::Config("n_episodes must be positive".into()));
    }
    let scenario = Scenario {
        n_pedestrians: m,
        ..cfg.scenario.clone()
    };
    let needs_weights = matches!(kind, ControllerKind::Scp2 | ControllerKind::Acp);
    let weights = if needs_weights {
        Some(artifacts.weights.ok_or_else(|| {
            HarnessError::Config(format!("{kind} needs trained predictor weights"))
        })?)
    } else {
        None
    };
    let table = if kind == ControllerKind::Scp2 {
        Some(
            artifacts
                .table
                .ok_or_else(|| HarnessError::Config("scp2 needs a calibrated bound table".into()))?,
        )
    } else {
        None
    };
    let model = LinearDisplacement;
    let mut logs = Vec::with_capacity(n_episodes);
    let mut solve_time = 0.0;
    for i in 0..n_episodes {
        let episode_seed = mix_seed(seed, i as u64);
        let log = match kind {
            ControllerKind::Apf => {
                let mut c = ApfController { cfg: cfg.apf };
                run_episode(&mut c, &scenario, &cfg.sfm, episode_seed)
            }
            ControllerKind::Acp => {
                let mut c = AcpController::new(AcpContext {
                    predictor: weights.expect("checked above"),
                    model: &model,
                    cost: cfg.cost,
                    safety: cfg.safety,
                    limits: cfg.limits,
                    inner: cfg.scp,
                    cfg: cfg.acp,
                });
                let log = run_episode(&mut c, &scenario, &cfg.sfm, episode_seed);
                solve_time += c.solve_time;
                log
            }
            ControllerKind::Scp2 => {
                let outer = OuterConfig {
                    shortcut: shortcut_override.unwrap_or(cfg.mpc.shortcut),
                    ..cfg.mpc.clone()
                };
                let mut c = MpcController::new(MpcContext {
                    predictor: weights.expect("checked above"),
                    model: &model,
                    table: table.expect("checked above"),
                    cost: cfg.cost,
                    safety: cfg.safety,
                    limits: cfg.limits,
                    dt: cfg.scenario.dt,
                    inner: cfg.scp,
                    outer,
                });
                let log = run_episode(&mut c, &scenario, &cfg.sfm, episode_seed);
                solve_time += c.solve_time;
                log
            }
        };
        logs.push(log);
    }
    let mut summary = MetricsSummary::from_logs(kind.label(), m, &logs, cfg)?;
    summary.solve_time_s = solve_time;
    Ok(EvalOutput { summary, logs })
}

// ---------------------------------------------------------------------------
// Shortcut benchmark
// ---------------------------------------------------------------------------

/// Paired shortcut-off/on measurements at one pedestrian count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRow {
    pub m: usize,
    pub n_episodes: usize,
    /// Mean solver laps per step with the shortcut disabled.
    pub outer_mean_off: f64,
    /// Mean solver laps per step with the shortcut enabled.
    pub outer_mean_on: f64,
    pub reduction_pct: f64,
    pub solve_time_off_s: f64,
    pub solve_time_on_s: f64,
    pub success_rate_off: f64,
    pub success_rate_on: f64,
    /// Episode pairs where neither run ever ended a step on a fallback plan
    /// (the regime where both runs should apply the same controls, since the
    /// shortcut can only change how early a lap loop exits).
    pub eligible_pairs: usize,
    /// Eligible pairs whose applied control sequences agree within the
    /// solver's settling tolerance in ℓ∞.
    pub matched_pairs: usize,
}

/// Mean outer laps per diagnosed step across a batch of logs.
fn step_outer_mean(logs: &[EpisodeLog]) -> f64 {
    let mut total = 0.0;
    let mut steps = 0usize;
    for log in logs {
        for s in &log.steps {
            if let Some(d) = &s.diag {
                total += f64::from(d.outer_iterations);
                steps += 1;
            }
        }
    }
    if steps > 0 {
        total / steps as f64
    } else {
        0.0
    }
}

fn controls_of(log: &EpisodeLog) -> Vec<f64> {
    log.steps.iter().map(|s| s.control).collect()
}

/// Evaluate the planner with the shortcut disabled and enabled on identical
/// seeds for each pedestrian count, and check that whenever both runs
/// certified fresh plans throughout an episode the applied controls agree.
pub fn bench_shortcut(
    cfg: &RunConfig,
    artifacts: EvalArtifacts<'_>,
    m_values: &[usize],
    n_episodes: usize,
    seed: u64,
) -> Result<Vec<BenchRow>, HarnessError> {
    let mut rows = Vec::new();
    for &m in m_values {
        let off = evaluate(
            cfg,
            artifacts,
            ControllerKind::Scp2,
            m,
            n_episodes,
            seed,
            Some(false),
        )?;
        let on = evaluate(
            cfg,
            artifacts,
            ControllerKind::Scp2,
            m,
            n_episodes,
            seed,
            Some(true),
        )?;
        let mut eligible = 0usize;
        let mut matched = 0usize;
        for (log_on, log_off) in on.logs.iter().zip(&off.logs) {
            let clean = |log: &EpisodeLog| {
                log.steps
                    .iter()
                    .all(|s| s.diag.as_ref().is_some_and(|d| !d.rejected && !d.fail_safe))
            };
            let on_clean = clean(log_on);
            let off_clean = clean(log_off);
            if !(on_clean && off_clean) {
                continue;
            }
            eligible += 1;
            let a = controls_of(log_on);
            let b = controls_of(log_off);
            // The confirm laps the shortcut removes may move a plan by up to
            // the settling tolerance, so that is the agreement we can demand.
            let agree = a.len() == b.len()
                && a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= cfg.scp.eps_tol);
            matched += usize::from(agree);
        }
        let outer_mean_off = step_outer_mean(&off.logs);
        let outer_mean_on = step_outer_mean(&on.logs);
        let reduction_pct = if outer_mean_off > 0.0 {
            100.0 * (1.0 - outer_mean_on / outer_mean_off)
        } else {
            0.0
        };
        rows.push(BenchRow {
            m,
            n_episodes,
            outer_mean_off,
            outer_mean_on,
            reduction_pct,
            solve_time_off_s: off.summary.solve_time_s,
            solve_time_on_s: on.summary.solve_time_s,
            success_rate_off: off.summary.success_rate,
            success_rate_on: on.summary.success_rate,
            eligible_pairs: eligible,
            matched_pairs: matched,
        });
    }
    Ok(rows)
}

/// Benchmark rows as a table.
pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(
        "m,n_episodes,outer_mean_off,outer_mean_on,reduction_pct,solve_time_off_s,\
         solve_time_on_s,success_rate_off,success_rate_on,eligible_pairs,matched_pairs\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.m,
            r.n_episodes,
            cell(r.outer_mean_off),
            cell(r.outer_mean_on),
            cell(r.reduction_pct),
            cell(r.solve_time_off_s),
            cell(r.solve_time_on_s),
            cell(r.success_rate_off),
            cell(r.success_rate_on),
            r.eligible_pairs,
            r.matched_pairs,
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Pipeline commands (file-level orchestration)
// ---------------------------------------------------------------------------

fn require(path: PathBuf, hint: &str) -> Result<PathBuf, HarnessError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(HarnessError::MissingArtifact {
            path,
            hint: hint.to_string(),
        })
    }
}

fn ensure_dir(path: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

/// Generate both dataset files. Returns (train, calibration) paths.
pub fn cmd_gen_data(cfg: &RunConfig, paths: &Paths) -> Result<(PathBuf, PathBuf), HarnessError> {
    ensure_dir(&paths.root)?;
    let (train_recs, cal_recs) = generate_dataset(cfg)?;
    save_records(&paths.train_data(), &train_recs)?;
    save_records(&paths.cal_data(), &cal_recs)?;
    Ok((paths.train_data(), paths.cal_data()))
}

/// Fit the predictor on the training file; writes weights and the loss
/// trace. Returns the weights path.
pub fn cmd_train(cfg: &RunConfig, paths: &Paths) -> Result<PathBuf, HarnessError> {
    let data_path = require(paths.train_data(), "gen-data")?;
    let records = load_records(&data_path)?;
    let (weights, report) = train(&records, cfg.norm(), &cfg.train)?;
    ensure_dir(&paths.root)?;
    weights.save(&paths.weights())?;
    let report_json =
        serde_json::to_string_pretty(&report).expect("train report serialization");
    fs::write(paths.train_report(), report_json + "\n")
        .map_err(|e| io_err(&paths.train_report(), e))?;
    Ok(paths.weights())
}

/// Calibrate per-region bounds from the calibration file against the trained
/// predictor. Returns the bound-table path.
pub fn cmd_calibrate(cfg: &RunConfig, paths: &Paths) -> Result<PathBuf, HarnessError> {
    let weights_path = require(paths.weights(), "train")?;
    let cal_path = require(paths.cal_data(), "gen-data")?;
    let weights = PredictorWeights::load(&weights_path)?;
    let records = load_records(&cal_path)?;
    let table = calibrate(
        &weights,
        &records,
        cfg.conformal.partition.clone(),
        cfg.conformal.alpha,
        cfg.conformal.n_min,
        cfg.scenario.dt,
    )?;
    table.save_csv(&paths.bounds())?;
    Ok(paths.bounds())
}

fn load_artifacts(
    cfg_kind: ControllerKind,
    paths: &Paths,
) -> Result<(Option<PredictorWeights>, Option<BoundTable>), HarnessError> {
    let needs_weights = matches!(cfg_kind, ControllerKind::Scp2 | ControllerKind::Acp);
    let weights = if needs_weights {
        Some(PredictorWeights::load(&require(paths.weights(), "train")?)?)
    } else {
        None
    };
    let table = if cfg_kind == ControllerKind::Scp2 {
        Some(BoundTable::load_csv(&require(
            paths.bounds(),
            "calibrate",
        )?)?)
    } else {
        None
    };
    Ok((weights, table))
}

/// Evaluate one controller and persist its summary, per-episode table, and
/// (optionally) every episode log.
#[allow(clippy::too_many_arguments)]
pub fn cmd_eval(
    cfg: &RunConfig,
    paths: &Paths,
    kind: ControllerKind,
    m: usize,
    n_episodes: usize,
    seed: u64,
    shortcut_override: Option<bool>,
    write_logs: bool,
) -> Result<MetricsSummary, HarnessError> {
    let (weights, table) = load_artifacts(kind, paths)?;
    let artifacts = EvalArtifacts {
        weights: weights.as_ref(),
        table: table.as_ref(),
    };
    let out = evaluate(cfg, artifacts, kind, m, n_episodes, seed, shortcut_override)?;
    let dir = paths.eval_dir(kind, m);
    ensure_dir(&dir)?;
    let summary_path = dir.join("summary.csv");
    fs::write(&summary_path, summary_csv(&out.summary)).map_err(|e| io_err(&summary_path, e))?;
    let episodes_path = dir.join("episodes.csv");
    fs::write(&episodes_path, episodes_csv(&out.summary))
        .map_err(|e| io_err(&episodes_path, e))?;
    if write_logs {
        let log_dir = dir.join("logs");
        ensure_dir(&log_dir)?;
        for (i, log) in out.logs.iter().enumerate() {
            let path = log_dir.join(format!("ep_{i:03}.jsonl"));
            fs::write(&path, log.to_jsonl()).map_err(|e| io_err(&path, e))?;
        }
    }
    Ok(out.summary)
}

/// Run the paired shortcut benchmark over the configured pedestrian counts
/// and persist the table.
pub fn cmd_bench(cfg: &RunConfig, paths: &Paths) -> Result<Vec<BenchRow>, HarnessError> {
    let (weights, table) = load_artifacts(ControllerKind::Scp2, paths)?;
    let artifacts = EvalArtifacts {
        weights: weights.as_ref(),
        table: table.as_ref(),
    };
    let rows = bench_shortcut(
        cfg,
        artifacts,
        &cfg.bench.m_values,
        cfg.bench.n_episodes,
        cfg.bench.seed,
    )?;
    ensure_dir(&paths.root)?;
    fs::write(paths.bench(), bench_csv(&rows)).map_err(|e| io_err(&paths.bench(), e))?;
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Replay
// ---------------------------------------------------------------------------

/// Feeds a stored control sequence back into the simulator.
struct ReplayPolicy {
    controls: Vec<f64>,
    next: usize,
}

impl Policy for ReplayPolicy {
    fn control(
        &mut self,
        world: &WorldState,
        _scenario: &Scenario,
    ) -> Result<PolicyOutput, SimError> {
        match self.controls.get(self.next) {
            Some(&u) => {
                self.next += 1;
                Ok(PolicyOutput::plain(u))
            }
            None => Err(SimError::policy(
                world.step_index,
                "stored episode exhausted",
            )),
        }
    }
}

/// Outcome of re-simulating a stored episode.
#[derive(Debug, Clone)]
pub struct ReplayReport {
    pub steps_stored: usize,
    pub steps_replayed: usize,
    pub status_match: bool,
    /// m, largest deviation between any stored and replayed position.
    pub max_position_err: f64,
    /// Stored and replayed episodes agree exactly (controls, worlds,
    /// distances, status).
    pub exact: bool,
}

/// Re-run a stored episode's controls from its seed under the configured
/// scenario and compare the resulting trajectories. With `check` set, any
/// disagreement is an error.
pub fn cmd_replay(cfg: &RunConfig, log_path: &Path, check: bool) -> Result<ReplayReport, HarnessError> {
    let text = fs::read_to_string(log_path).map_err(|e| io_err(log_path, e))?;
    let stored = EpisodeLog::from_jsonl(&text)
        .map_err(|e| HarnessError::ReplayMismatch(format!("unreadable log: {e}")))?;
    let scenario = Scenario {
        n_pedestrians: stored.initial.pedestrians.len(),
        ..cfg.scenario.clone()
    };
    let mut policy = ReplayPolicy {
        controls: controls_of(&stored),
        next: 0,
    };
    let replayed = run_episode(&mut policy, &scenario, &cfg.sfm, stored.seed);

    let mut max_err: f64 = 0.0;
    for (a, b) in stored.steps.iter().zip(&replayed.steps) {
        max_err = max_err.max((a.world.vehicle.position - b.world.vehicle.position).abs());
        for (pa, pb) in a.world.pedestrians.iter().zip(&b.world.pedestrians) {
            max_err = max_err.max(pa.position.dist(pb.position));
        }
    }
    let exact = stored.initial == replayed.initial
        && stored.status == replayed.status
        && stored.steps.len() == replayed.steps.len()
        && stored.steps.iter().zip(&replayed.steps).all(|(a, b)| {
            a.control == b.control && a.world == b.world && a.min_distance == b.min_distance
        });
    let report = ReplayReport {
        steps_stored: stored.steps.len(),
        steps_replayed: replayed.steps.len(),
        status_match: stored.status == replayed.status,
        max_position_err: max_err,
        exact,
    };
    if check && !exact {
        return Err(HarnessError::ReplayMismatch(format!(
            "stored {} steps ({:?}), replayed {} steps ({:?}), max position error {}",
            report.steps_stored,
            stored.status,
            report.steps_replayed,
            replayed.status,
            report.max_position_err
        )));
    }
    Ok(report)
}
