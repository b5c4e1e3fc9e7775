//! Discrete-time optimal-control problem for the crossing scenario.
//!
//! The decision variable is the displacement plan `u ∈ R^T`. The cost trades
//! terminal progress against control smoothness; the hard constraints keep
//! the planned vehicle positions at least `d_safe + L·R̄_k` away from each
//! pedestrian's predicted position, where `R̄_k` is that step's conformal
//! error bound and `L` the distance function's Lipschitz constant. Because
//! the predictor is nonlinear in the plan, the planner works with a local
//! linearization: this module assembles the linearized subproblem (a pure LP
//! in `u` with a trust region) around any reference plan.

use crate::predictor::{PedSnapshot, PredictorInput, TrajectoryPredictor};
use crate::sim::{Vec2, VehicleState};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised while assembling a subproblem.
#[derive(Debug, Error)]
pub enum DocpError {
    #[error("pedestrian {ped} has an unbounded prediction error at step {k}")]
    InfiniteBound { ped: usize, k: usize },
    #[error("inconsistent problem shapes: {0}")]
    ShapeMismatch(String),
}

/// Longitudinal vehicle dynamics `x⁺ = f(x, u)` with partial derivatives.
pub trait VehicleModel {
    fn step(&self, x: f64, u: f64) -> f64;
    fn dstep_dx(&self, x: f64, u: f64) -> f64;
    fn dstep_du(&self, x: f64, u: f64) -> f64;
}

/// Pure displacement integrator `x⁺ = x + u`.
#[derive(Debug, Clone, Copy, Default)]
pub struct LinearDisplacement;

impl VehicleModel for LinearDisplacement {
    fn step(&self, x: f64, u: f64) -> f64 {
        x + u
    }
    fn dstep_dx(&self, _: f64, _: f64) -> f64 {
        1.0
    }
    fn dstep_du(&self, _: f64, _: f64) -> f64 {
        1.0
    }
}

/// Planned positions `x_1..x_T` and their sensitivities to the plan:
/// `sens[k−1][j] = ∂x_k/∂u_j`.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub states: Vec<f64>,
    pub sens: Vec<Vec<f64>>,
}

/// Roll the vehicle model forward from `x0` under `u`, propagating the
/// sensitivity recursion `∂x_{k+1}/∂u = A_k·∂x_k/∂u + B_k·e_k`.
pub fn rollout<M: VehicleModel>(model: &M, x0: f64, u: &[f64]) -> Rollout {
    let t = u.len();
    let mut states = Vec::with_capacity(t);
    let mut sens: Vec<Vec<f64>> = Vec::with_capacity(t);
    let mut x = x0;
    let mut row = vec![0.0; t];
    for (k, &uk) in u.iter().enumerate() {
        let a = model.dstep_dx(x, uk);
        let b = model.dstep_du(x, uk);
        for r in row.iter_mut() {
            *r *= a;
        }
        row[k] = b;
        x = model.step(x, uk);
        states.push(x);
        sens.push(row.clone());
    }
    Rollout { states, sens }
}

/// Signed clearance `‖p − y‖ − d_safe` between a vehicle point and a
/// pedestrian position.
pub fn safety_value(vehicle_point: Vec2, ped: Vec2, d_safe: f64) -> f64 {
    vehicle_point.dist(ped) - d_safe
}

/// Gradient of [`safety_value`]: `(∂c/∂x, ∂c/∂ŷ)` where `x` is the scalar
/// vehicle progress. Degenerate overlap falls back to the road axis.
pub fn safety_grad(vehicle_point: Vec2, ped: Vec2) -> (f64, Vec2) {
    let diff = vehicle_point - ped;
    let d = diff.norm();
    if d > 1e-12 {
        (diff.x / d, diff * (-1.0 / d))
    } else {
        (1.0, Vec2::new(-1.0, 0.0))
    }
}

/// Cost weights: progress versus control smoothness. The planning cost is
/// `−progress_weight·Σ u_k + smoothness_weight·Σ (u_k − u_{k−1})²` with
/// `u_{−1}` the displacement applied on the previous period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostSpec {
    /// Reward per meter of total planned displacement.
    pub progress_weight: f64,
    /// Penalty on squared step-to-step displacement changes.
    pub smoothness_weight: f64,
}

impl Default for CostSpec {
    fn default() -> Self {
        CostSpec {
            progress_weight: 1.0,
            smoothness_weight: 0.5,
        }
    }
}

/// Safety margin constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SafetyConstants {
    /// m, hard clearance floor.
    pub d_safe: f64,
    /// Lipschitz constant converting prediction-error bounds into extra
    /// clearance (the Euclidean distance is 1-Lipschitz in the prediction).
    pub lipschitz: f64,
}

impl Default for SafetyConstants {
    fn default() -> Self {
        SafetyConstants {
            d_safe: 2.0,
            lipschitz: 1.0,
        }
    }
}

/// Box limits on controls and planned states.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlLimits {
    pub u_max: f64,
    pub state_min: f64,
    pub state_max: f64,
}

impl Default for ControlLimits {
    fn default() -> Self {
        ControlLimits {
            u_max: 1.5,
            state_min: -5.0,
            state_max: 55.0,
        }
    }
}

/// One planning problem: scene, predictor, error bounds, and weights.
pub struct DocpInstance<'a, P: TrajectoryPredictor, M: VehicleModel> {
    pub predictor: &'a P,
    pub model: &'a M,
    pub vehicle: VehicleState,
    pub pedestrians: Vec<PedSnapshot>,
    /// Per-pedestrian, per-step prediction-error bounds `R̄_k`.
    pub bounds: Vec<Vec<f64>>,
    /// Displacement applied on the previous step (smoothness anchor).
    pub prev_u: f64,
    pub cost: CostSpec,
    pub safety: SafetyConstants,
    pub limits: ControlLimits,
}

/// Row classes in a linearized subproblem, in emission order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    /// Clearance for (pedestrian, step).
    Safety { ped: usize, k: usize },
    StateLower { k: usize },
    StateUpper { k: usize },
    ControlLower { k: usize },
    ControlUpper { k: usize },
    TrustLower { k: usize },
    TrustUpper { k: usize },
}

/// One inequality `coeffs·u ≥ rhs`.
#[derive(Debug, Clone)]
pub struct LocpRow {
    pub kind: RowKind,
    pub coeffs: Vec<f64>,
    pub rhs: f64,
}

/// Linearized subproblem: minimize `objective·u + offset` subject to the
/// rows, all linearized at `trust_center`.
#[derive(Debug, Clone)]
pub struct LocpProblem {
    pub objective: Vec<f64>,
    pub offset: f64,
    pub rows: Vec<LocpRow>,
    pub trust_center: Vec<f64>,
    pub trust_radius: f64,
}

impl<'a, P: TrajectoryPredictor, M: VehicleModel> DocpInstance<'a, P, M> {
    /// Plan length `T`.
    pub fn horizon(&self) -> usize {
        self.predictor.horizon()
    }

    /// Check bound-table shapes against the scene.
    pub fn validate(&self) -> Result<(), DocpError> {
        let t = self.horizon();
        if self.bounds.len() != self.pedestrians.len() {
            return Err(DocpError::ShapeMismatch(format!(
                "{} bound rows for {} pedestrians",
                self.bounds.len(),
                self.pedestrians.len()
            )));
        }
        if self.bounds.iter().any(|b| b.len() != t) {
            return Err(DocpError::ShapeMismatch(format!(
                "bound rows must have horizon length {t}"
            )));
        }
        Ok(())
    }

    /// Prediction query for pedestrian `m` under plan `u` (the predictor
    /// consumes the first `T−1` planned displacements).
    pub fn predictor_input(&self, m: usize, u: &[f64]) -> PredictorInput {
        PredictorInput {
            vehicle: self.vehicle,
            ped: self.pedestrians[m],
            controls: u[..self.horizon() - 1].to_vec(),
        }
    }

    /// True cost of a plan: negated total displacement plus quadratic
    /// smoothness anchored at the previously applied control.
    pub fn cost_value(&self, u: &[f64]) -> f64 {
        let mut smooth = 0.0;
        let mut prev = self.prev_u;
        for &uk in u {
            smooth += (uk - prev) * (uk - prev);
            prev = uk;
        }
        -self.cost.progress_weight * u.iter().sum::<f64>()
            + self.cost.smoothness_weight * smooth
    }

    /// Gradient of [`DocpInstance::cost_value`].
    pub fn cost_gradient(&self, u: &[f64]) -> Vec<f64> {
        let t = u.len();
        let mut grad = vec![-self.cost.progress_weight; t];
        let w = self.cost.smoothness_weight;
        for k in 0..t {
            let prev = if k == 0 { self.prev_u } else { u[k - 1] };
            grad[k] += 2.0 * w * (u[k] - prev);
            if k + 1 < t {
                grad[k] -= 2.0 * w * (u[k + 1] - u[k]);
            }
        }
        grad
    }

    /// Hessian of [`DocpInstance::cost_value`] (constant: the progress term
    /// is linear and the smoothness term quadratic). Positive definite, since
    /// the anchor term `(u_0 − u_{−1})²` pins the all-ones null direction of
    /// the difference chain.
    pub fn cost_hessian(&self, t: usize) -> Vec<Vec<f64>> {
        let w2 = 2.0 * self.cost.smoothness_weight;
        let mut q = vec![vec![0.0; t]; t];
        q[0][0] += w2;
        for k in 1..t {
            q[k][k] += w2;
            q[k - 1][k - 1] += w2;
            q[k][k - 1] -= w2;
            q[k - 1][k] -= w2;
        }
        q
    }

    /// Planned vehicle point at step `k` (1-indexed) for a given rollout.
    fn vehicle_point(&self, roll: &Rollout, k: usize) -> Vec2 {
        Vec2::new(roll.states[k - 1], self.vehicle.lane_offset)
    }

    /// Assemble the linear subproblem around `u_ref`.
    pub fn linearize(&self, u_ref: &[f64], trust_radius: f64) -> Result<LocpProblem, DocpError> {
        self.validate()?;
        let t = self.horizon();
        assert_eq!(u_ref.len(), t, "reference plan length must be T");
        let roll = rollout(self.model, self.vehicle.position, u_ref);
        let mut rows = Vec::with_capacity(self.pedestrians.len() * t + 6 * t);

        for (m, _) in self.pedestrians.iter().enumerate() {
            let input = self.predictor_input(m, u_ref);
            let pred = self.predictor.predict(&input);
            let jac = self.predictor.input_jacobian(&input);
            for k in 1..=t {
                let margin = self.bounds[m][k - 1];
                if !margin.is_finite() {
                    return Err(DocpError::InfiniteBound { ped: m, k });
                }
                let p = self.vehicle_point(&roll, k);
                let y = pred[k - 1];
                let c = safety_value(p, y, self.safety.d_safe);
                let (dc_dx, dc_dy) = safety_grad(p, y);
                // Chain rule through both the vehicle rollout and the
                // predictor; the predictor only sees u_0..u_{T−2}.
                let mut coeffs = vec![0.0; t];
                for j in 0..t {
                    coeffs[j] = dc_dx * roll.sens[k - 1][j];
                    if j < t - 1 {
                        coeffs[j] +=
                            dc_dy.x * jac[k - 1].get(0, j) + dc_dy.y * jac[k - 1].get(1, j);
                    }
                }
                let lin_offset: f64 =
                    coeffs.iter().zip(u_ref).map(|(a, b)| a * b).sum();
                rows.push(LocpRow {
                    kind: RowKind::Safety { ped: m, k },
                    coeffs,
                    rhs: self.safety.lipschitz * margin - c + lin_offset,
                });
            }
        }

        for k in 1..=t {
            let sens = &roll.sens[k - 1];
            let lin_offset: f64 = sens.iter().zip(u_ref).map(|(a, b)| a * b).sum();
            rows.push(LocpRow {
                kind: RowKind::StateLower { k },
                coeffs: sens.clone(),
                rhs: self.limits.state_min - roll.states[k - 1] + lin_offset,
            });
            rows.push(LocpRow {
                kind: RowKind::StateUpper { k },
                coeffs: sens.iter().map(|s| -s).collect(),
                rhs: roll.states[k - 1] - lin_offset - self.limits.state_max,
            });
        }

        for k in 0..t {
            let mut lo = vec![0.0; t];
            lo[k] = 1.0;
            rows.push(LocpRow {
                kind: RowKind::ControlLower { k },
                coeffs: lo,
                rhs: 0.0,
            });
            let mut hi = vec![0.0; t];
            hi[k] = -1.0;
            rows.push(LocpRow {
                kind: RowKind::ControlUpper { k },
                coeffs: hi,
                rhs: -self.limits.u_max,
            });
        }

        for k in 0..t {
            let mut lo = vec![0.0; t];
            lo[k] = 1.0;
            rows.push(LocpRow {
                kind: RowKind::TrustLower { k },
                coeffs: lo,
                rhs: u_ref[k] - trust_radius,
            });
            let mut hi = vec![0.0; t];
            hi[k] = -1.0;
            rows.push(LocpRow {
                kind: RowKind::TrustUpper { k },
                coeffs: hi,
                rhs: -(u_ref[k] + trust_radius),
            });
        }

        let objective = self.cost_gradient(u_ref);
        let offset = self.cost_value(u_ref)
            - objective.iter().zip(u_ref).map(|(a, b)| a * b).sum::<f64>();
        Ok(LocpProblem {
            objective,
            offset,
            rows,
            trust_center: u_ref.to_vec(),
            trust_radius,
        })
    }

    /// Worst constraint violation of a plan under the true (nonlinear)
    /// constraints — negative when every constraint holds with margin.
    /// Unbounded prediction errors make the safety constraint unsatisfiable,
    /// so they evaluate to +∞.
    pub fn feasibility_violation(&self, u: &[f64]) -> f64 {
        let t = self.horizon();
        let roll = rollout(self.model, self.vehicle.position, u);
        let mut worst = f64::NEG_INFINITY;
        for (m, _) in self.pedestrians.iter().enumerate() {
            if self.bounds[m].iter().any(|b| !b.is_finite()) {
                return f64::INFINITY;
            }
            let pred = self.predictor.predict(&self.predictor_input(m, u));
            for k in 1..=t {
                let c = safety_value(self.vehicle_point(&roll, k), pred[k - 1], self.safety.d_safe);
                worst = worst.max(self.safety.lipschitz * self.bounds[m][k - 1] - c);
            }
        }
        for k in 0..t {
            worst = worst.max(self.limits.state_min - roll.states[k]);
            worst = worst.max(roll.states[k] - self.limits.state_max);
            worst = worst.max(-u[k]);
            worst = worst.max(u[k] - self.limits.u_max);
        }
        worst
    }
}
