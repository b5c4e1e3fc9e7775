//! Sequential convex programming over linearized subproblems.
//!
//! Starting from an admissible plan, each iteration linearizes the problem
//! around the incumbent, solves the resulting LP inside a trust region, and
//! shrinks the region geometrically. Because the smoothness cost is
//! quadratic, many subproblem optima sit strictly inside some coordinate's
//! box, where an LP vertex can only circle the optimum at trust-radius
//! resolution; each LP solve is therefore followed by a polish step that
//! re-minimizes the quadratic cost model over the LP's active rows and keeps
//! the result only when its multipliers and feasibility check out. Iteration
//! stops early when the solve map returns the incumbent itself (a fixed
//! point); plans whose final step and true constraint violation are small
//! count as converged. For converged solves the constraints are rebuilt at
//! the solution and paired with the final multipliers into a stationarity /
//! complementary-slackness certificate. An LP with no feasible point is
//! retried with penalized slack on the clearance rows, so the loop degrades
//! gracefully instead of aborting when a warm start is momentarily
//! inconsistent with refreshed error bounds.

pub mod simplex;

use crate::ocp::{DocpError, DocpInstance, LocpProblem, RowKind, VehicleModel};
use crate::predictor::TrajectoryPredictor;
use serde::{Deserialize, Serialize};
use simplex::{solve_lp, LpError};
use thiserror::Error;

/// Step size below which the linearize-solve map is treated as stationary.
pub const FIXED_POINT_TOL: f64 = 1e-9;

/// Errors from the inner loop.
#[derive(Debug, Error)]
pub enum ScpError {
    #[error(transparent)]
    Assembly(#[from] DocpError),
    #[error("subproblem solve failed: {0}")]
    Lp(#[from] LpError),
    #[error("initial plan entry {index} = {value} is outside the control box")]
    BadInit { index: usize, value: f64 },
}

/// Inner-loop parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScpConfig {
    /// Initial trust radius.
    pub delta0: f64,
    /// Per-iteration trust decay.
    pub beta: f64,
    /// Step threshold below which the outer refresh loop treats consecutive
    /// plans as settled.
    pub eps_tol: f64,
    pub max_inner_iters: usize,
    /// Exact-penalty weight on clearance slack in the infeasibility retry.
    pub slack_penalty: f64,
    /// Constraint-violation threshold for accepting a plan.
    pub feas_tol: f64,
}

impl Default for ScpConfig {
    fn default() -> Self {
        ScpConfig {
            delta0: 0.5,
            beta: 0.8,
            eps_tol: 1e-3,
            max_inner_iters: 20,
            slack_penalty: 1e4,
            feas_tol: 1e-6,
        }
    }
}

/// Solution of one linearized subproblem.
#[derive(Debug, Clone)]
pub struct LocpSolution {
    pub u: Vec<f64>,
    /// One multiplier per subproblem row.
    pub duals: Vec<f64>,
    /// Linearized objective value at `u` (including the model offset).
    pub objective: f64,
    pub slack_total: f64,
    pub used_slack: bool,
    pub lp_iterations: usize,
}

/// Solve one subproblem; on infeasibility, retry with penalized nonnegative
/// slack added to the clearance rows.
pub fn solve_locp(problem: &LocpProblem, cfg: &ScpConfig) -> Result<LocpSolution, ScpError> {
    let n = problem.objective.len();
    let a: Vec<Vec<f64>> = problem.rows.iter().map(|r| r.coeffs.clone()).collect();
    let b: Vec<f64> = problem.rows.iter().map(|r| r.rhs).collect();
    match solve_lp(&problem.objective, &a, &b, &vec![false; n]) {
        Ok(sol) => Ok(LocpSolution {
            objective: problem.offset + sol.objective,
            u: sol.x,
            duals: sol.duals,
            slack_total: 0.0,
            used_slack: false,
            lp_iterations: sol.iterations,
        }),
        Err(LpError::Infeasible { .. }) => {
            let safety_rows: Vec<usize> = problem
                .rows
                .iter()
                .enumerate()
                .filter(|(_, r)| matches!(r.kind, RowKind::Safety { .. }))
                .map(|(i, _)| i)
                .collect();
            if safety_rows.is_empty() {
                // Nothing to relax; report the original infeasibility.
                let err = solve_lp(&problem.objective, &a, &b, &vec![false; n]).unwrap_err();
                return Err(err.into());
            }
            let n_ext = n + safety_rows.len();
            let mut c_ext = problem.objective.clone();
            c_ext.resize(n_ext, cfg.slack_penalty);
            let mut nonneg = vec![false; n];
            nonneg.resize(n_ext, true);
            let mut a_ext: Vec<Vec<f64>> = a
                .iter()
                .map(|row| {
                    let mut r = row.clone();
                    r.resize(n_ext, 0.0);
                    r
                })
                .collect();
            for (s, &row_idx) in safety_rows.iter().enumerate() {
                a_ext[row_idx][n + s] = 1.0;
            }
            let sol = solve_lp(&c_ext, &a_ext, &b, &nonneg)?;
            let slack_total = sol.x[n..].iter().sum();
            let u = sol.x[..n].to_vec();
            let objective =
                problem.offset + problem.objective.iter().zip(&u).map(|(c, x)| c * x).sum::<f64>();
            Ok(LocpSolution {
                u,
                duals: sol.duals,
                objective,
                slack_total,
                used_slack: true,
                lp_iterations: sol.iterations,
            })
        }
        Err(e) => Err(e.into()),
    }
}

/// Dual threshold above which a row counts as active for the polish step.
const POLISH_DUAL_TOL: f64 = 1e-7;

/// Solve `A x = b` by Gaussian elimination with partial pivoting. `None`
/// when the system is numerically singular.
fn lu_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| {
            a[i][col]
                .abs()
                .partial_cmp(&a[j][col].abs())
                .expect("finite pivot candidates")
        })?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut v = b[row];
        for k in row + 1..n {
            v -= a[row][k] * x[k];
        }
        x[row] = v / a[row][row];
    }
    Some(x)
}

/// Minimize the quadratic cost model over a working set of rows held as
/// equalities. Returns the minimizer and its row multipliers.
fn eqp_solve(
    q: &[Vec<f64>],
    objective: &[f64],
    trust_center: &[f64],
    rows: &LocpProblem,
    active: &[usize],
) -> Option<(Vec<f64>, Vec<f64>)> {
    // Stationarity of the quadratic model around the linearization point ū:
    // ∇J(ū) + Q·(u − ū) = Σ λ_i a_i, with the working rows held tight.
    let n = objective.len();
    let dim = n + active.len();
    let mut kkt = vec![vec![0.0; dim]; dim];
    let mut rhs = vec![0.0; dim];
    for r in 0..n {
        kkt[r][..n].copy_from_slice(&q[r]);
        rhs[r] = -objective[r] + (0..n).map(|c| q[r][c] * trust_center[c]).sum::<f64>();
        for (j, &i) in active.iter().enumerate() {
            kkt[r][n + j] = -rows.rows[i].coeffs[r];
        }
    }
    for (j, &i) in active.iter().enumerate() {
        kkt[n + j][..n].copy_from_slice(&rows.rows[i].coeffs);
        rhs[n + j] = rows.rows[i].rhs;
    }
    let xl = lu_solve(kkt, rhs)?;
    let (u, lam) = xl.split_at(n);
    Some((u.to_vec(), lam.to_vec()))
}

/// Refine an LP vertex into the exact minimizer of the quadratic cost model
/// over the LP's active rows (trust rows excluded), with the multipliers
/// that certify it. Rows whose multiplier comes out negative are not truly
/// binding at the model optimum — the vertex merely leaned on them — so they
/// are dropped one at a time (most negative first) and the reduced system is
/// re-solved. The result is accepted only when it stays inside the trust
/// box, satisfies every row, and has nonnegative multipliers; otherwise the
/// LP vertex stands and the trust decay keeps globalizing.
fn polish_qp<P: TrajectoryPredictor, M: VehicleModel>(
    inst: &DocpInstance<P, M>,
    problem: &LocpProblem,
    sol: &LocpSolution,
) -> Option<(Vec<f64>, Vec<f64>)> {
    let n = problem.objective.len();
    let is_trust =
        |kind: RowKind| matches!(kind, RowKind::TrustLower { .. } | RowKind::TrustUpper { .. });
    let mut active: Vec<usize> = problem
        .rows
        .iter()
        .enumerate()
        .filter(|&(i, row)| sol.duals[i] > POLISH_DUAL_TOL && !is_trust(row.kind))
        .map(|(i, _)| i)
        .collect();
    // A full active set already pins the LP vertex exactly; re-deriving it
    // through the KKT system would only add round-off.
    if active.len() >= n {
        return None;
    }

    let q = inst.cost_hessian(n);
    let (u, lam) = loop {
        let (u, lam) = eqp_solve(&q, &problem.objective, &problem.trust_center, problem, &active)?;
        let worst = lam
            .iter()
            .enumerate()
            .filter(|&(_, &l)| l < -1e-9)
            .min_by(|a, b| a.1.partial_cmp(b.1).expect("finite multipliers"));
        match worst {
            None => break (u, lam),
            Some((j, _)) => {
                active.remove(j);
            }
        }
    };

    if u
        .iter()
        .zip(&problem.trust_center)
        .any(|(a, b)| (a - b).abs() > problem.trust_radius + 1e-9)
    {
        return None;
    }
    for row in &problem.rows {
        if is_trust(row.kind) {
            continue;
        }
        let lhs: f64 = row.coeffs.iter().zip(&u).map(|(a, x)| a * x).sum();
        if lhs < row.rhs - 1e-9 {
            return None;
        }
    }

    let mut duals = vec![0.0; problem.rows.len()];
    for (j, &i) in active.iter().enumerate() {
        duals[i] = lam[j];
    }
    Some((u, duals))
}

/// Trace entry for one inner iteration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScpIterLog {
    pub iteration: usize,
    pub delta: f64,
    /// `‖u_{j} − u_{j−1}‖∞` after this iteration's solve.
    pub step: f64,
    /// True (nonlinear) cost of the new incumbent.
    pub objective: f64,
    pub slack_total: f64,
    pub lp_iterations: usize,
}

/// Outcome of one inner-loop solve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScpReport {
    pub iterations: usize,
    /// The loop reached a plan its own subproblem reproduces and the plan
    /// satisfies the true constraints, so the final multipliers certify it.
    pub converged: bool,
    /// Loop exited because the subproblem reproduced its own incumbent.
    pub fixed_point: bool,
    pub step_final: f64,
    /// True constraint violation of the returned plan.
    pub violation: f64,
    pub slack_total_final: f64,
    pub used_slack_final: bool,
    /// `‖∇J(u*) − Σ λᵢ aᵢ(u*)‖∞` when converged.
    pub kkt_stationarity: Option<f64>,
    /// `maxᵢ |λᵢ·(aᵢ(u*)·u* − bᵢ(u*))|` when converged.
    pub kkt_comp_slack: Option<f64>,
    pub objective_final: f64,
    pub iter_log: Vec<ScpIterLog>,
}

/// Stationarity and complementary-slackness residuals of `(u, λ)` for a
/// subproblem's rows.
fn kkt_residuals(problem: &LocpProblem, u: &[f64], duals: &[f64]) -> (f64, f64) {
    let n = u.len();
    let mut residual = problem.objective.clone();
    let mut comp: f64 = 0.0;
    for (row, &lam) in problem.rows.iter().zip(duals) {
        for j in 0..n {
            residual[j] -= lam * row.coeffs[j];
        }
        let slack: f64 = row.coeffs.iter().zip(u).map(|(a, x)| a * x).sum::<f64>() - row.rhs;
        comp = comp.max((lam * slack).abs());
    }
    let stat = residual.iter().fold(0.0_f64, |m, r| m.max(r.abs()));
    (stat, comp)
}

/// Run the inner loop from `u_init` (which must lie in the control box up to
/// round-off). Returns the final plan with its report.
pub fn scp_inner<P: TrajectoryPredictor, M: VehicleModel>(
    inst: &DocpInstance<P, M>,
    u_init: &[f64],
    cfg: &ScpConfig,
) -> Result<(Vec<f64>, ScpReport), ScpError> {
    let t = inst.horizon();
    assert_eq!(u_init.len(), t, "initial plan length must be T");
    let mut u = Vec::with_capacity(t);
    for (index, &value) in u_init.iter().enumerate() {
        if value < -FIXED_POINT_TOL || value > inst.limits.u_max + FIXED_POINT_TOL {
            return Err(ScpError::BadInit { index, value });
        }
        u.push(value.clamp(0.0, inst.limits.u_max));
    }

    let mut delta = cfg.delta0;
    let mut iter_log = Vec::new();
    let mut step_final = f64::INFINITY;
    let mut fixed_point = false;
    let mut last_solution: Option<LocpSolution> = None;
    let mut last_delta = delta;
    let mut iterations = 0;

    for iteration in 1..=cfg.max_inner_iters {
        let problem = inst.linearize(&u, delta)?;
        let mut sol = solve_locp(&problem, cfg)?;
        if !sol.used_slack {
            if let Some((u_p, duals_p)) = polish_qp(inst, &problem, &sol) {
                sol.objective = problem.offset
                    + problem.objective.iter().zip(&u_p).map(|(c, x)| c * x).sum::<f64>();
                sol.u = u_p;
                sol.duals = duals_p;
            }
        }
        let step = sol
            .u
            .iter()
            .zip(&u)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        u = sol.u.clone();
        iter_log.push(ScpIterLog {
            iteration,
            delta,
            step,
            objective: inst.cost_value(&u),
            slack_total: sol.slack_total,
            lp_iterations: sol.lp_iterations,
        });
        last_delta = delta;
        last_solution = Some(sol);
        step_final = step;
        iterations = iteration;
        delta *= cfg.beta;
        if step <= FIXED_POINT_TOL {
            fixed_point = true;
            break;
        }
    }

    let violation = inst.feasibility_violation(&u);
    let sol = last_solution.expect("at least one inner iteration");
    // Only a reproducing plan earns a certificate: the multipliers come from
    // the last subproblem, so they certify the returned plan only when the
    // linearization point and the plan coincide. A small-but-nonzero final
    // step would leave a stationarity residual of roughly step × curvature.
    let converged = fixed_point && violation <= cfg.feas_tol;
    let (kkt_stationarity, kkt_comp_slack) = if converged {
        // Certify against the constraints rebuilt at the solution itself.
        let problem = inst.linearize(&u, last_delta)?;
        let (stat, comp) = kkt_residuals(&problem, &u, &sol.duals);
        (Some(stat), Some(comp))
    } else {
        (None, None)
    };

    let report = ScpReport {
        iterations,
        converged,
        fixed_point,
        step_final,
        violation,
        slack_total_final: sol.slack_total,
        used_slack_final: sol.used_slack,
        kkt_stationarity,
        kkt_comp_slack,
        objective_final: inst.cost_value(&u),
        iter_log,
    };
    Ok((u, report))
}
