//! Receding-horizon outer loop around the inner trust-region solver.
//!
//! A solved plan changes the region its prediction queries fall in, which
//! changes the calibrated error bounds, which changes the problem. The outer
//! loop therefore alternates: look bounds up for the current plan, solve,
//! look bounds up for the new plan, and accept only if the new plan is
//! feasible under its own refreshed bounds. When a converged lap's refresh
//! leaves every bound non-decreasing the plan already satisfies the next
//! subproblem's optimality conditions, so the loop can exit early instead of
//! confirming with another solve. Iterates that fail their refreshed
//! certificate are rejected, the offending bounds are merged into the working
//! set, and the lap repeats; when nothing is certifiable within the lap
//! budget the controller falls back to the previous certified plan or, as a
//! last resort, a full stop — zero displacement is always admissible for the
//! vehicle.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::conformal::BoundTable;
use crate::ocp::{ControlLimits, CostSpec, DocpInstance, SafetyConstants, VehicleModel};
use crate::predictor::{PedSnapshot, PredictorInput, TrajectoryPredictor};
use crate::scp::{scp_inner, ScpConfig, ScpReport};
use crate::sim::{Policy, PolicyOutput, Scenario, SimError, StepDiag, VehicleState, WorldState};

/// Outer-loop settings. Step and feasibility tolerances are shared with the
/// inner solver's [`ScpConfig`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OuterConfig {
    /// Bound-refresh laps before settling for the last certified plan.
    pub max_outer_iters: usize,
    /// Per-lap decay of the inner solver's initial trust radius.
    pub beta_prime: f64,
    /// Exit as soon as a converged lap's refresh leaves every bound
    /// non-decreasing.
    pub shortcut: bool,
    /// After a shortcut exit, re-solve from the returned plan under the
    /// refreshed bounds and record how far it moves. Costs one extra inner
    /// solve per shortcut; diagnostics only.
    pub verify_shortcut: bool,
}

impl Default for OuterConfig {
    fn default() -> Self {
        OuterConfig {
            max_outer_iters: 10,
            beta_prime: 0.9, // gentle decay: late laps can still adapt to shifted bounds
            shortcut: true,
            verify_shortcut: false,
        }
    }
}

/// Everything one receding-horizon solve needs besides the scene itself.
pub struct MpcContext<'a, P: TrajectoryPredictor, M: VehicleModel> {
    pub predictor: &'a P,
    pub model: &'a M,
    pub table: &'a BoundTable,
    pub cost: CostSpec,
    pub safety: SafetyConstants,
    pub limits: ControlLimits,
    /// s, control period (converts planned displacements into the speeds the
    /// region lookup buckets by).
    pub dt: f64,
    pub inner: ScpConfig,
    pub outer: OuterConfig,
}

/// Outcome of one receding-horizon solve.
#[derive(Debug, Clone)]
pub struct MpcReport {
    /// Inner-solver invocations made by the lap loop (always equals
    /// `inner.len()`; the optional shortcut verification solve is excluded).
    pub outer_iterations: usize,
    /// Loop exited because a refresh left every bound non-decreasing.
    pub shortcut: bool,
    /// The step ended on a fallback: no lap produced a plan feasible under
    /// its own refreshed bounds (or a subproblem was unsolvable).
    pub rejected: bool,
    /// Laps whose plan failed its refreshed-bounds check and was discarded;
    /// counted even when a later lap recovered.
    pub rejected_laps: usize,
    /// The returned plan is the conservative stop injected by a fallback
    /// path rather than a solved or warm-started plan.
    pub fail_safe: bool,
    /// Constraint violation of the returned plan under the newest bounds it
    /// was checked against (at most the feasibility tolerance). `None` when
    /// even the fallback went uncertified.
    pub certified_violation: Option<f64>,
    /// Per-lap bound profiles (pedestrian-major, then step) used for the
    /// solves.
    pub bound_profiles: Vec<Vec<Vec<f64>>>,
    /// Inner-loop reports per lap.
    pub inner: Vec<ScpReport>,
    /// How far the shortcut plan moved when re-solved under the refreshed
    /// bounds (verification mode only).
    pub shortcut_recheck_step: Option<f64>,
    /// s, wall time of the whole solve.
    pub wall_time: f64,
}

impl MpcReport {
    fn new() -> Self {
        MpcReport {
            outer_iterations: 0,
            shortcut: false,
            rejected: false,
            rejected_laps: 0,
            fail_safe: false,
            certified_violation: None,
            bound_profiles: Vec::new(),
            inner: Vec::new(),
            shortcut_recheck_step: None,
            wall_time: 0.0,
        }
    }
}

/// True iff every per-pedestrian, per-step bound in `new` is at least its
/// counterpart in `old` (so constraints could only tighten and a feasible
/// plan keeps its optimality certificate). Profiles must have equal shape.
pub fn bounds_nondecreasing(old: &[Vec<f64>], new: &[Vec<f64>]) -> bool {
    assert_eq!(old.len(), new.len(), "bound profile count changed");
    old.iter().zip(new).all(|(o, n)| {
        assert_eq!(o.len(), n.len(), "bound profile length changed");
        o.iter().zip(n).all(|(a, b)| b >= a)
    })
}

fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
}

fn has_infinite(bounds: &[Vec<f64>]) -> bool {
    bounds.iter().flatten().any(|b| !b.is_finite())
}

/// Widen each bound to the larger of the two profiles. A plan feasible under
/// the union is feasible under both.
fn merge_bounds(current: &mut [Vec<f64>], next: &[Vec<f64>]) {
    assert_eq!(current.len(), next.len(), "bound profile count changed");
    for (c, n) in current.iter_mut().zip(next) {
        assert_eq!(c.len(), n.len(), "bound profile length changed");
        for (a, b) in c.iter_mut().zip(n) {
            *a = a.max(*b);
        }
    }
}

impl<'a, P: TrajectoryPredictor, M: VehicleModel> MpcContext<'a, P, M> {
    /// Per-pedestrian bound profiles for the regions a plan's queries fall
    /// in.
    fn plan_bounds(
        &self,
        vehicle: VehicleState,
        pedestrians: &[PedSnapshot],
        u: &[f64],
    ) -> Vec<Vec<f64>> {
        let t = self.predictor.horizon();
        pedestrians
            .iter()
            .map(|&ped| {
                self.table.bounds_for(
                    &PredictorInput {
                        vehicle,
                        ped,
                        controls: u[..t - 1].to_vec(),
                    },
                    self.dt,
                )
            })
            .collect()
    }

    fn instance(
        &self,
        vehicle: VehicleState,
        pedestrians: &[PedSnapshot],
        bounds: Vec<Vec<f64>>,
        prev_u: f64,
    ) -> DocpInstance<'_, P, M> {
        DocpInstance {
            predictor: self.predictor,
            model: self.model,
            vehicle,
            pedestrians: pedestrians.to_vec(),
            bounds,
            prev_u,
            cost: self.cost,
            safety: self.safety,
            limits: self.limits,
        }
    }
}

/// One receding-horizon solve. Infallible by design: paths that cannot
/// produce a certified plan return the conservative stop with flags set in
/// the report.
pub fn mpc_step<P: TrajectoryPredictor, M: VehicleModel>(
    ctx: &MpcContext<'_, P, M>,
    vehicle: VehicleState,
    pedestrians: &[PedSnapshot],
    prev_u: f64,
    u_warm: &[f64],
) -> (Vec<f64>, MpcReport) {
    let started = Instant::now();
    let mut report = MpcReport::new();
    let u = run_step(ctx, vehicle, pedestrians, prev_u, u_warm, &mut report);
    report.wall_time = started.elapsed().as_secs_f64();
    (u, report)
}

fn run_step<P: TrajectoryPredictor, M: VehicleModel>(
    ctx: &MpcContext<'_, P, M>,
    vehicle: VehicleState,
    pedestrians: &[PedSnapshot],
    prev_u: f64,
    u_warm: &[f64],
    report: &mut MpcReport,
) -> Vec<f64> {
    let t = ctx.predictor.horizon();
    assert_eq!(u_warm.len(), t, "warm start must have horizon length");
    let u_cons = vec![0.0; t];

    // Round-off from the previous period's solve must not abort this one.
    let mut current: Vec<f64> = u_warm
        .iter()
        .map(|&v| v.clamp(0.0, ctx.limits.u_max))
        .collect();
    let mut bounds_current = ctx.plan_bounds(vehicle, pedestrians, &current);

    if has_infinite(&bounds_current) && current != u_cons {
        // The warm start's region carries no certificate; the conservative
        // plan may still land in a populated (slower) one.
        current = u_cons.clone();
        bounds_current = ctx.plan_bounds(vehicle, pedestrians, &current);
    }
    if has_infinite(&bounds_current) {
        // No certificate even for stopping: stop anyway, uncertified.
        report.rejected = true;
        report.fail_safe = true;
        return u_cons;
    }

    // Last plan that passed feasibility under its refreshed bounds, with the
    // violation value that certified it.
    let mut accepted: Option<(Vec<f64>, f64)> = None;

    for lap in 0..ctx.outer.max_outer_iters {
        let cfg = ScpConfig {
            delta0: ctx.inner.delta0 * ctx.outer.beta_prime.powi(lap as i32),
            ..ctx.inner
        };
        report.bound_profiles.push(bounds_current.clone());
        let inst = ctx.instance(vehicle, pedestrians, bounds_current.clone(), prev_u);
        let (candidate, inner_report) = match scp_inner(&inst, &current, &cfg) {
            Ok(pair) => pair,
            Err(_) => {
                // The subproblem itself was unsolvable (for example, a fast
                // warm plan pinning the trust region against the state box
                // near the end of the road). Treat it like a rejected lap.
                report.rejected = true;
                return finish_rejected(
                    ctx,
                    vehicle,
                    pedestrians,
                    prev_u,
                    accepted,
                    current,
                    bounds_current,
                    report,
                );
            }
        };
        report.outer_iterations += 1;
        let lap_converged = inner_report.converged;
        let lap_used_slack = inner_report.used_slack_final;
        report.inner.push(inner_report);

        let bounds_next = ctx.plan_bounds(vehicle, pedestrians, &candidate);
        let g = ctx
            .instance(vehicle, pedestrians, bounds_next.clone(), prev_u)
            .feasibility_violation(&candidate);
        if g > ctx.inner.feas_tol {
            // The lap's product is uncertifiable, but its refresh tells us
            // which bounds the next plan will be held to. Discard the plan,
            // adopt the componentwise-larger bounds, and solve again so the
            // next lap clears the requirement it will actually face. Two
            // cases are hopeless and fall back immediately: regions without
            // a certificate leave nothing to merge, and a lap that already
            // needed slack stays infeasible under any wider bounds.
            report.rejected_laps += 1;
            if has_infinite(&bounds_next) || lap_used_slack {
                report.rejected = true;
                return finish_rejected(
                    ctx,
                    vehicle,
                    pedestrians,
                    prev_u,
                    accepted,
                    current,
                    bounds_current,
                    report,
                );
            }
            merge_bounds(&mut bounds_current, &bounds_next);
            continue;
        }
        let outer_step = linf(&candidate, &current);
        accepted = Some((candidate.clone(), g));

        // The early exit keeps the candidate's optimality certificate, so it
        // is only available when the inner solve actually produced one.
        if ctx.outer.shortcut
            && lap_converged
            && bounds_nondecreasing(&bounds_current, &bounds_next)
        {
            report.shortcut = true;
            report.certified_violation = Some(g);
            if ctx.outer.verify_shortcut {
                let recheck_cfg = ScpConfig {
                    delta0: ctx.inner.delta0 * ctx.outer.beta_prime.powi(lap as i32 + 1),
                    ..ctx.inner
                };
                let inst_next = ctx.instance(vehicle, pedestrians, bounds_next, prev_u);
                if let Ok((resolved, _)) = scp_inner(&inst_next, &candidate, &recheck_cfg) {
                    report.shortcut_recheck_step = Some(linf(&resolved, &candidate));
                }
            }
            return candidate;
        }

        current = candidate;
        // Keeping the union instead of swapping to the refresh makes the
        // working bounds monotone across laps, so the solve-refresh cycle
        // cannot oscillate between a slow certified plan and a fast rejected
        // one. Where the regions are stable the union IS the refresh.
        merge_bounds(&mut bounds_current, &bounds_next);
        // Two consecutive lap products agreeing means the refresh cycle has
        // settled. The comparison at lap 0 would be against the warm start,
        // which no lap produced, so it certifies nothing.
        if lap > 0 && outer_step <= ctx.inner.eps_tol {
            break;
        }
    }

    match accepted {
        Some((u, g)) => {
            report.certified_violation = Some(g);
            u
        }
        // Every lap rejected (or the budget was zero): fall back, checking
        // the plan we still hold against the widest bounds seen.
        None => {
            report.rejected = true;
            finish_rejected(
                ctx,
                vehicle,
                pedestrians,
                prev_u,
                None,
                current,
                bounds_current,
                report,
            )
        }
    }
}

/// Resolution of a rejected lap: the previously certified plan if any, else
/// the plan the lap started from (checked under its own bounds), else the
/// conservative stop (certified when possible).
#[allow(clippy::too_many_arguments)]
fn finish_rejected<P: TrajectoryPredictor, M: VehicleModel>(
    ctx: &MpcContext<'_, P, M>,
    vehicle: VehicleState,
    pedestrians: &[PedSnapshot],
    prev_u: f64,
    accepted: Option<(Vec<f64>, f64)>,
    entry_u: Vec<f64>,
    entry_bounds: Vec<Vec<f64>>,
    report: &mut MpcReport,
) -> Vec<f64> {
    if let Some((u, g)) = accepted {
        report.certified_violation = Some(g);
        return u;
    }
    let g_entry = ctx
        .instance(vehicle, pedestrians, entry_bounds, prev_u)
        .feasibility_violation(&entry_u);
    if g_entry <= ctx.inner.feas_tol {
        report.certified_violation = Some(g_entry);
        return entry_u;
    }
    let u_cons = vec![0.0; ctx.predictor.horizon()];
    report.fail_safe = true;
    let cons_bounds = ctx.plan_bounds(vehicle, pedestrians, &u_cons);
    if !has_infinite(&cons_bounds) {
        let g_cons = ctx
            .instance(vehicle, pedestrians, cons_bounds, prev_u)
            .feasibility_violation(&u_cons);
        if g_cons <= ctx.inner.feas_tol {
            report.certified_violation = Some(g_cons);
        }
    }
    u_cons
}

/// Closed-loop driver: each period solve, apply the plan's first
/// displacement, and shift the rest one slot forward (holding the last
/// entry) as the next period's warm start.
pub struct MpcController<'a, P: TrajectoryPredictor, M: VehicleModel> {
    ctx: MpcContext<'a, P, M>,
    warm: Option<Vec<f64>>,
    prev_applied: f64,
    /// s, accumulated solver wall time across the episode.
    pub solve_time: f64,
}

impl<'a, P: TrajectoryPredictor, M: VehicleModel> MpcController<'a, P, M> {
    pub fn new(ctx: MpcContext<'a, P, M>) -> Self {
        MpcController {
            ctx,
            warm: None,
            prev_applied: 0.0,
            solve_time: 0.0,
        }
    }
}

/// Collapse a solve report into the per-step log diagnostics.
fn summarize(report: &MpcReport) -> StepDiag {
    let mut diag = StepDiag {
        outer_iterations: report.outer_iterations as u32,
        inner_iterations: report.inner.iter().map(|r| r.iterations as u32).sum(),
        converged_calls: report.inner.iter().filter(|r| r.converged).count() as u32,
        shortcut: report.shortcut,
        rejected: report.rejected,
        rejected_laps: report.rejected_laps as u32,
        fail_safe: report.fail_safe,
        kkt_stationarity: None,
        kkt_comp_slack: None,
        feasibility_max: None,
        shortcut_recheck_step: report.shortcut_recheck_step,
    };
    for r in report.inner.iter().filter(|r| r.converged) {
        diag.kkt_stationarity = max_opt(diag.kkt_stationarity, r.kkt_stationarity);
        diag.kkt_comp_slack = max_opt(diag.kkt_comp_slack, r.kkt_comp_slack);
        diag.feasibility_max = max_opt(diag.feasibility_max, Some(r.violation));
    }
    diag
}

fn max_opt(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x.max(y)),
        (x, None) => x,
        (None, y) => y,
    }
}

impl<P: TrajectoryPredictor, M: VehicleModel> Policy for MpcController<'_, P, M> {
    fn control(
        &mut self,
        world: &WorldState,
        scenario: &Scenario,
    ) -> Result<PolicyOutput, SimError> {
        let t = self.ctx.predictor.horizon();
        let peds: Vec<PedSnapshot> = world
            .pedestrians
            .iter()
            .map(|p| PedSnapshot {
                position: p.position,
                velocity: p.velocity,
            })
            .collect();
        let warm = match &self.warm {
            Some(w) => w.clone(),
            None => vec![0.0; t],
        };
        let (plan, report) = mpc_step(&self.ctx, world.vehicle, &peds, self.prev_applied, &warm);
        self.solve_time += report.wall_time;

        let cap = self.ctx.limits.u_max.min(scenario.u_max());
        let u0 = plan[0].clamp(0.0, cap);
        let mut next_warm: Vec<f64> = plan[1..].to_vec();
        next_warm.push(*plan.last().expect("plans have horizon length"));
        for v in &mut next_warm {
            *v = v.clamp(0.0, cap);
        }
        self.warm = Some(next_warm);
        self.prev_applied = u0;

        Ok(PolicyOutput {
            u: u0,
            diag: Some(summarize(&report)),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conformal::{BoundTable, Partition, RegionBounds};
    use crate::ocp::LinearDisplacement;
    use crate::sim::{run_episode, EpisodeStatus, PedestrianState, SfmParams, Vec2};
    use crate::testutil::ConstVelPredictor;
    use std::collections::BTreeMap;

    const T: usize = 5;

    /// Table with one constant per-step bound per listed region.
    fn table(partition: Partition, per_region: &[((usize, usize), f64)]) -> BoundTable {
        let mut entries = BTreeMap::new();
        for &(region, bound) in per_region {
            entries.insert(
                region,
                RegionBounds {
                    count: 1000,
                    bounds: vec![bound; T],
                },
            );
        }
        BoundTable {
            gamma: 0.015,
            horizon: T,
            n_min: 50,
            partition,
            entries,
        }
    }

    fn single_region() -> Partition {
        Partition {
            distance_edges: vec![0.0],
            speed_edges: vec![0.0],
        }
    }

    /// Two speed buckets split at 7.5 m/s (mean-plan speed with dt = 0.1).
    fn speed_split() -> Partition {
        Partition {
            distance_edges: vec![0.0],
            speed_edges: vec![0.0, 7.5],
        }
    }

    fn ctx<'a>(
        predictor: &'a ConstVelPredictor,
        model: &'a LinearDisplacement,
        table: &'a BoundTable,
    ) -> MpcContext<'a, ConstVelPredictor, LinearDisplacement> {
        MpcContext {
            predictor,
            model,
            table,
            cost: CostSpec::default(),
            safety: SafetyConstants::default(),
            limits: ControlLimits::default(),
            dt: 0.1,
            inner: ScpConfig::default(),
            outer: OuterConfig::default(),
        }
    }

    fn vehicle_at(x: f64) -> VehicleState {
        VehicleState {
            position: x,
            lane_offset: 0.0,
        }
    }

    #[test]
    fn profile_comparison_is_componentwise() {
        let old = vec![vec![0.1, 0.2], vec![0.3, 0.4]];
        assert!(bounds_nondecreasing(&old, &old));
        let grown = vec![vec![0.1, 0.25], vec![0.3, 0.4]];
        assert!(bounds_nondecreasing(&old, &grown));
        let shrunk = vec![vec![0.1, 0.2], vec![0.29, 0.4]];
        assert!(!bounds_nondecreasing(&old, &shrunk));
        // Infinite bounds collapsing to finite ones count as shrinking.
        let inf = vec![vec![f64::INFINITY; 2]; 2];
        assert!(!bounds_nondecreasing(&inf, &old));
        assert!(bounds_nondecreasing(&old, &inf));
        assert!(bounds_nondecreasing(&inf, &inf));
    }

    #[test]
    fn single_region_table_shortcuts_after_one_solve() {
        // Bounds cannot change across laps, so the first refresh is already
        // non-decreasing and one inner solve suffices.
        let predictor = ConstVelPredictor { horizon: T, dt: 0.1 };
        let model = LinearDisplacement;
        let tbl = table(single_region(), &[((0, 0), 0.1)]);
        let ctx = ctx(&predictor, &model, &tbl);
        let ped = PedSnapshot {
            position: Vec2::new(40.0, 3.0),
            velocity: Vec2::ZERO,
        };
        let (u, rep) = mpc_step(&ctx, vehicle_at(0.0), &[ped], 0.0, &vec![0.0; T]);
        assert!(rep.shortcut);
        assert!(!rep.rejected);
        assert!(!rep.fail_safe);
        assert_eq!(rep.outer_iterations, 1);
        assert_eq!(rep.inner.len(), 1);
        assert!(rep.certified_violation.unwrap() <= ctx.inner.feas_tol);
        // Far from the pedestrian the plan ramps toward top speed.
        assert!((u[0] - 1.25).abs() < 1e-9, "plan head {u:?}");
        assert!((u[T - 1] - 1.5).abs() < 1e-9);
    }

    #[test]
    fn growing_bounds_shortcut_and_the_plan_is_a_fixed_point() {
        // Accelerating moves the plan into a faster speed bucket with a
        // LARGER bound; feasibility still holds (pedestrian far), so the
        // shortcut fires and the verification re-solve must not move the
        // plan by more than the step tolerance.
        let predictor = ConstVelPredictor { horizon: T, dt: 0.1 };
        let model = LinearDisplacement;
        let tbl = table(speed_split(), &[((0, 0), 0.05), ((0, 1), 0.2)]);
        let mut ctx = ctx(&predictor, &model, &tbl);
        ctx.outer.verify_shortcut = true;
        let ped = PedSnapshot {
            position: Vec2::new(40.0, 3.0),
            velocity: Vec2::ZERO,
        };
        let (u, rep) = mpc_step(&ctx, vehicle_at(0.0), &[ped], 0.0, &vec![0.0; T]);
        // The solve starts under the slow bucket's bound and ends in the
        // fast bucket: mean planned speed well above the 7.5 m/s split.
        let mean_speed = u[..T - 1].iter().sum::<f64>() / (T - 1) as f64 / ctx.dt;
        assert!(mean_speed > 7.5, "plan stayed slow: {u:?}");
        assert!(rep.shortcut);
        assert_eq!(rep.outer_iterations, 1);
        let recheck = rep.shortcut_recheck_step.expect("verification ran");
        assert!(recheck <= ctx.inner.eps_tol, "re-solve moved {recheck}");
    }

    #[test]
    fn bound_growth_that_breaks_feasibility_retries_under_the_union() {
        // The full-speed plan passes the pedestrian with 2.3 m clearance:
        // fine under the slow bucket's 0.1 m bound, infeasible under the
        // fast bucket's 0.5 m bound it lands in. The lap is rejected, the
        // fast bound is merged in, and the retry advances exactly to the
        // fat bound's standoff line instead of freezing at the warm start.
        let predictor = ConstVelPredictor { horizon: T, dt: 0.1 };
        let model = LinearDisplacement;
        let tbl = table(speed_split(), &[((0, 0), 0.1), ((0, 1), 0.5)]);
        let ctx = ctx(&predictor, &model, &tbl);
        let ped = PedSnapshot {
            position: Vec2::new(4.0, 2.3),
            velocity: Vec2::ZERO,
        };
        let warm = vec![0.0; T];
        let (u, rep) = mpc_step(&ctx, vehicle_at(0.0), &[ped], 0.0, &warm);
        assert_eq!(rep.rejected_laps, 1);
        assert!(!rep.rejected, "the retry recovered, not a fallback");
        assert!(!rep.shortcut);
        assert!(!rep.fail_safe);
        assert!(
            rep.certified_violation.unwrap() <= ctx.inner.feas_tol,
            "returned plan lacks a certificate"
        );
        // Closest admissible approach: |x − 4| ≥ √((2 + 0.5)² − 2.3²).
        let standoff = 4.0 - (2.5_f64.powi(2) - 2.3_f64.powi(2)).sqrt();
        let reach: f64 = u.iter().sum();
        assert!(
            reach <= standoff + 1e-6 && reach > standoff - 1e-2,
            "retry should stop at the fat bound's standoff: {reach} vs {standoff}"
        );
        // Rejected ramp, certified retry, fixed-point confirmation.
        assert_eq!(rep.outer_iterations, 3);
    }

    #[test]
    fn unpopulated_regions_force_an_uncertified_stop() {
        let predictor = ConstVelPredictor { horizon: T, dt: 0.1 };
        let model = LinearDisplacement;
        let tbl = table(single_region(), &[]); // no calibrated regions at all
        let ctx = ctx(&predictor, &model, &tbl);
        let ped = PedSnapshot {
            position: Vec2::new(20.0, 3.0),
            velocity: Vec2::ZERO,
        };
        let (u, rep) = mpc_step(&ctx, vehicle_at(0.0), &[ped], 0.0, &vec![1.0; T]);
        assert_eq!(u, vec![0.0; T]);
        assert!(rep.fail_safe);
        assert!(rep.rejected);
        assert_eq!(rep.outer_iterations, 0);
        assert!(rep.certified_violation.is_none());
    }

    fn quiet_sfm() -> SfmParams {
        SfmParams {
            noise_std: 0.0,
            ..SfmParams::default()
        }
    }

    #[test]
    fn empty_road_crossing_runs_near_top_speed() {
        let scenario = Scenario {
            n_pedestrians: 0,
            ..Scenario::default()
        };
        let predictor = ConstVelPredictor {
            horizon: T,
            dt: scenario.dt,
        };
        let model = LinearDisplacement;
        let tbl = table(single_region(), &[((0, 0), 0.1)]);
        let mut controller = MpcController::new(ctx(&predictor, &model, &tbl));
        let log = run_episode(&mut controller, &scenario, &quiet_sfm(), 7);
        assert_eq!(log.status, EpisodeStatus::ReachedGoal);
        // One ramp-up step, then top speed throughout.
        let controls: Vec<f64> = log.steps.iter().map(|s| s.control).collect();
        assert!((controls[0] - 1.25).abs() < 1e-9);
        let after_warmup = &controls[1..controls.len() - 1];
        let avg = after_warmup.iter().sum::<f64>() / after_warmup.len() as f64;
        assert!(
            avg >= 0.9 * scenario.u_max(),
            "average displacement {avg} below 90% of top speed"
        );
    }

    #[test]
    fn standing_pedestrian_keeps_the_vehicle_clear() {
        // A pedestrian planted mid-lane (no retreat: repulsion disabled so
        // the scene stays static). The vehicle must brake and hold at least
        // the inflated clearance for the whole episode.
        let scenario = Scenario {
            max_episode_steps: 80,
            ..Scenario::default()
        };
        let params = SfmParams {
            repulsion_gain: 0.0,
            noise_std: 0.0,
            ..SfmParams::default()
        };
        let predictor = ConstVelPredictor {
            horizon: T,
            dt: scenario.dt,
        };
        let model = LinearDisplacement;
        let tbl = table(single_region(), &[((0, 0), 0.1)]);
        let mut controller = MpcController::new(ctx(&predictor, &model, &tbl));

        let ped = PedestrianState {
            position: Vec2::new(25.0, 0.0),
            velocity: Vec2::ZERO,
            goal: Vec2::new(25.0, 0.0),
        };
        let mut world = WorldState {
            vehicle: vehicle_at(0.0),
            pedestrians: vec![ped],
            step_index: 0,
        };
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(0);
        let mut min_dist = world.min_active_distance(&scenario);
        for _ in 0..scenario.max_episode_steps {
            let out = controller.control(&world, &scenario).unwrap();
            world = crate::sim::env_step(&world, out.u, &scenario, &params, &mut rng).unwrap();
            min_dist = min_dist.min(world.min_active_distance(&scenario));
        }
        assert!(
            min_dist >= scenario.d_safe,
            "clearance {min_dist} fell below d_safe"
        );
        assert!(
            world.vehicle.position < ped.position.x,
            "vehicle should stop short of the pedestrian"
        );
        assert!(
            world.vehicle.position > ped.position.x - 15.0,
            "vehicle stopped unreasonably early at {}",
            world.vehicle.position
        );
    }

    #[test]
    fn identical_seeds_replay_identical_episodes() {
        let scenario = Scenario::default();
        let predictor = ConstVelPredictor {
            horizon: T,
            dt: scenario.dt,
        };
        let model = LinearDisplacement;
        let tbl = table(
            speed_split(),
            &[((0, 0), 0.12), ((0, 1), 0.37)],
        );
        let run = || {
            let mut controller = MpcController::new(ctx(&predictor, &model, &tbl));
            run_episode(&mut controller, &scenario, &SfmParams::default(), 99).to_jsonl()
        };
        assert_eq!(run(), run());
    }
}
