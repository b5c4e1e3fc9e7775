//! Comparison controllers run under the same simulator and log contract as
//! the receding-horizon planner.
//!
//! Two baselines are provided. The artificial potential field (APF)
//! controller is purely reactive: a constant attractive pull toward the end
//! of the road minus the longitudinal component of inverse-square repulsion
//! from nearby pedestrians, mapped to a displacement and clamped to the
//! control box. The adaptive conformal planner (ACP) keeps a single scalar
//! error bound that it updates online from realized coverage: every period
//! it plans once with the bound applied uniformly across the horizon (no
//! bound-refresh laps), and once a prediction is old enough to be scored
//! against the realized pedestrian position it nudges the bound up after a
//! miss and down after a cover, so the long-run miss rate tracks the target
//! failure probability.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::ocp::{ControlLimits, CostSpec, DocpInstance, SafetyConstants, VehicleModel};
use crate::predictor::{PedSnapshot, PredictorInput, TrajectoryPredictor};
use crate::scp::{scp_inner, ScpConfig};
use crate::sim::{Policy, PolicyOutput, Scenario, SimError, StepDiag, Vec2, WorldState};

/// Gains for the potential-field controller. All positive.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ApfConfig {
    /// Constant forward pull toward the end of the road.
    pub attractive_gain: f64,
    /// Scale of the inverse-square pedestrian repulsion.
    pub repulsive_gain: f64,
    /// m, repulsion reaches exactly zero at this distance.
    pub influence_radius: f64,
    /// Converts net force to a displacement before clamping.
    pub speed_map_gain: f64,
}

impl Default for ApfConfig {
    fn default() -> Self {
        ApfConfig {
            attractive_gain: 1.0,
            repulsive_gain: 30.0,  // brakes hard inside ~4 m
            influence_radius: 8.0, // m
            speed_map_gain: 1.5,   // saturates the control box on an empty road
        }
    }
}

/// Net potential-field displacement for the current scene, clamped to
/// `[0, u_max]`.
///
/// Repulsion magnitude for a pedestrian at distance `d` is
/// `repulsive_gain·(1/d − 1/influence_radius)/d²` inside the influence
/// radius and zero outside (continuous at the boundary). Only its
/// longitudinal component brakes the vehicle: the magnitude is weighted by
/// how directly ahead the pedestrian is, and pedestrians behind the vehicle
/// are ignored.
pub fn apf_control(world: &WorldState, scenario: &Scenario, cfg: &ApfConfig) -> f64 {
    let v = world.vehicle.point();
    let mut repulsion = 0.0;
    for ped in &world.pedestrians {
        let d = ped.position.dist(v);
        if d <= 0.0 || d >= cfg.influence_radius {
            continue;
        }
        let magnitude = cfg.repulsive_gain * (1.0 / d - 1.0 / cfg.influence_radius) / (d * d);
        let ahead = ((ped.position.x - v.x) / d).max(0.0);
        repulsion += magnitude * ahead;
    }
    let force = cfg.attractive_gain - repulsion;
    (cfg.speed_map_gain * force).clamp(0.0, scenario.u_max())
}

/// Stateless [`Policy`] wrapper around [`apf_control`].
#[derive(Debug, Clone, Default)]
pub struct ApfController {
    pub cfg: ApfConfig,
}

impl Policy for ApfController {
    fn control(
        &mut self,
        world: &WorldState,
        scenario: &Scenario,
    ) -> Result<PolicyOutput, SimError> {
        Ok(PolicyOutput::plain(apf_control(world, scenario, &self.cfg)))
    }
}

/// Online-quantile settings for the adaptive conformal baseline.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcpConfig {
    /// m, initial error bound (held fixed until the first prediction can be
    /// scored).
    pub q0: f64,
    /// m per update, learning rate of the quantile tracker.
    pub eta: f64,
    /// Target miss rate the tracker equilibrates to.
    pub alpha: f64,
}

impl Default for AcpConfig {
    fn default() -> Self {
        AcpConfig {
            q0: 0.3,     // m, generous against typical one-second errors
            eta: 0.05,   // m per update
            alpha: 0.15, // matches the planner's failure budget
        }
    }
}

/// A horizon-length-old prediction waiting to be scored against reality.
#[derive(Debug, Clone)]
struct PendingScore {
    /// Predicted pedestrian positions (storage order) at the step now being
    /// realized.
    predicted: Vec<Vec2>,
    /// Bound that was in effect when the prediction was planned with.
    q_used: f64,
}

/// Evolving quantile state; one per episode.
#[derive(Debug, Clone)]
pub struct AcpState {
    /// m, current error bound.
    pub q: f64,
    pub eta: f64,
    pub alpha: f64,
    pending: VecDeque<PendingScore>,
}

impl AcpState {
    pub fn new(cfg: AcpConfig) -> Self {
        AcpState {
            q: cfg.q0,
            eta: cfg.eta,
            alpha: cfg.alpha,
            pending: VecDeque::new(),
        }
    }

    /// One coverage observation: a miss raises the bound by `eta·(1 − alpha)`,
    /// a cover lowers it by `eta·alpha`, and the bound never goes negative.
    /// At a long-run miss rate of exactly `alpha` the expected increment is
    /// zero.
    pub fn update(&mut self, covered: bool) {
        let err = if covered { 0.0 } else { 1.0 };
        self.q = (self.q + self.eta * (err - self.alpha)).max(0.0);
    }
}

/// Everything the adaptive conformal planner needs besides the scene.
pub struct AcpContext<'a, P: TrajectoryPredictor, M: VehicleModel> {
    pub predictor: &'a P,
    pub model: &'a M,
    pub cost: CostSpec,
    pub safety: SafetyConstants,
    pub limits: ControlLimits,
    pub inner: ScpConfig,
    pub cfg: AcpConfig,
}

/// Closed-loop adaptive conformal planner: plan once per period under the
/// current uniform bound, apply the first displacement, and score
/// predictions once their target step is realized.
pub struct AcpController<'a, P: TrajectoryPredictor, M: VehicleModel> {
    ctx: AcpContext<'a, P, M>,
    state: AcpState,
    warm: Option<Vec<f64>>,
    prev_applied: f64,
    /// s, accumulated solver wall time across the episode.
    pub solve_time: f64,
}

impl<'a, P: TrajectoryPredictor, M: VehicleModel> AcpController<'a, P, M> {
    pub fn new(ctx: AcpContext<'a, P, M>) -> Self {
        let state = AcpState::new(ctx.cfg);
        AcpController {
            ctx,
            state,
            warm: None,
            prev_applied: 0.0,
            solve_time: 0.0,
        }
    }

    /// Current quantile state (inspection only).
    pub fn state(&self) -> &AcpState {
        &self.state
    }
}

impl<P: TrajectoryPredictor, M: VehicleModel> Policy for AcpController<'_, P, M> {
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

        // Score the prediction whose target step is being realized now (the
        // buffer holds exactly one entry per elapsed step, so the front one
        // is horizon-length old once the buffer is full). The bound stays at
        // its initial value until then.
        if self.state.pending.len() == t {
            let due = self.state.pending.pop_front().expect("buffer non-empty");
            if !due.predicted.is_empty() {
                let covered = due
                    .predicted
                    .iter()
                    .zip(world.pedestrians.iter())
                    .all(|(pred, ped)| pred.dist(ped.position) <= due.q_used);
                self.state.update(covered);
            }
        }

        let started = std::time::Instant::now();
        let warm = match &self.warm {
            Some(w) => w.clone(),
            None => vec![0.0; t],
        };
        let bounds = vec![vec![self.state.q; t]; peds.len()];
        let inst = DocpInstance {
            predictor: self.ctx.predictor,
            model: self.ctx.model,
            vehicle: world.vehicle,
            pedestrians: peds,
            bounds,
            prev_u: self.prev_applied,
            cost: self.ctx.cost,
            safety: self.ctx.safety,
            limits: self.ctx.limits,
        };
        let mut diag = StepDiag {
            outer_iterations: 1,
            ..StepDiag::default()
        };
        let plan = match scp_inner(&inst, &warm, &self.ctx.inner) {
            Ok((u, report)) => {
                diag.inner_iterations = report.iterations as u32;
                if report.converged {
                    diag.converged_calls = 1;
                    diag.kkt_stationarity = report.kkt_stationarity;
                    diag.kkt_comp_slack = report.kkt_comp_slack;
                    diag.feasibility_max = Some(report.violation);
                }
                u
            }
            Err(_) => {
                diag.fail_safe = true;
                vec![0.0; t]
            }
        };
        self.solve_time += started.elapsed().as_secs_f64();

        // Remember what this plan predicts for the last horizon step so it
        // can be scored once that step is realized.
        let predicted: Vec<Vec2> = inst
            .pedestrians
            .iter()
            .map(|&ped| {
                let input = PredictorInput {
                    vehicle: world.vehicle,
                    ped,
                    controls: plan[..t - 1].to_vec(),
                };
                *self
                    .ctx
                    .predictor
                    .predict(&input)
                    .last()
                    .expect("predictions span the horizon")
            })
            .collect();
        self.state.pending.push_back(PendingScore {
            predicted,
            q_used: self.state.q,
        });

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
            diag: Some(diag),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conformal::{BoundTable, Partition, RegionBounds};
    use crate::mpc::{MpcContext, MpcController};
    use crate::ocp::LinearDisplacement;
    use crate::scp::ScpConfig;
    use crate::sim::{run_episode, PedestrianState, SfmParams, VehicleState};
    use crate::testutil::ConstVelPredictor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use std::collections::BTreeMap;

    const T: usize = 5;

    fn world_with_ped(ped_x: f64, ped_y: f64) -> WorldState {
        WorldState {
            vehicle: VehicleState {
                position: 0.0,
                lane_offset: 0.0,
            },
            pedestrians: vec![PedestrianState {
                position: Vec2::new(ped_x, ped_y),
                velocity: Vec2::ZERO,
                goal: Vec2::new(ped_x, -ped_y),
            }],
            step_index: 0,
        }
    }

    #[test]
    fn empty_scene_saturates_the_control_box() {
        let scenario = Scenario::default();
        let mut world = world_with_ped(40.0, 3.0);
        world.pedestrians.clear();
        let u = apf_control(&world, &scenario, &ApfConfig::default());
        assert_eq!(u, scenario.u_max());
    }

    #[test]
    fn repulsion_vanishes_continuously_at_the_influence_radius() {
        let scenario = Scenario::default();
        let cfg = ApfConfig::default();
        let at_radius = apf_control(&world_with_ped(cfg.influence_radius, 0.0), &scenario, &cfg);
        let mut world = world_with_ped(40.0, 3.0);
        world.pedestrians.clear();
        let unobstructed = apf_control(&world, &scenario, &cfg);
        assert_eq!(at_radius, unobstructed);
        // Just inside the radius the braking is tiny, not a jump.
        let just_inside = apf_control(
            &world_with_ped(cfg.influence_radius - 1e-6, 0.0),
            &scenario,
            &cfg,
        );
        assert!((just_inside - unobstructed).abs() < 1e-5);
    }

    #[test]
    fn braking_grows_monotonically_as_a_frontal_pedestrian_nears() {
        let scenario = Scenario::default();
        let cfg = ApfConfig::default();
        let mut last = f64::INFINITY;
        let mut d = cfg.influence_radius;
        while d > 0.5 {
            let u = apf_control(&world_with_ped(d, 0.0), &scenario, &cfg);
            assert!(u <= last + 1e-12, "u grew from {last} to {u} at d = {d}");
            assert!((0.0..=scenario.u_max()).contains(&u));
            last = u;
            d -= 0.25;
        }
        // Close range drives the command all the way to a stop.
        assert_eq!(apf_control(&world_with_ped(0.5, 0.0), &scenario, &cfg), 0.0);
    }

    #[test]
    fn frontal_pedestrian_at_three_meters_brakes_to_known_value() {
        // magnitude = 30·(1/3 − 1/8)/9 = 25/36; u = 1.5·(1 − 25/36) = 55/120.
        let u = apf_control(
            &world_with_ped(3.0, 0.0),
            &Scenario::default(),
            &ApfConfig::default(),
        );
        assert!((u - 55.0 / 120.0).abs() < 1e-12, "u = {u}");
    }

    #[test]
    fn pedestrians_behind_or_abeam_never_speed_the_vehicle_up() {
        let scenario = Scenario::default();
        let cfg = ApfConfig::default();
        let mut world = world_with_ped(40.0, 3.0);
        world.pedestrians.clear();
        let unobstructed = apf_control(&world, &scenario, &cfg);
        let behind = apf_control(&world_with_ped(-3.0, 0.0), &scenario, &cfg);
        assert_eq!(behind, unobstructed);
        // Directly abeam: zero longitudinal projection, no braking.
        let abeam = apf_control(&world_with_ped(0.0, 3.0), &scenario, &cfg);
        assert_eq!(abeam, unobstructed);
    }

    #[test]
    fn output_stays_in_the_control_box_across_random_scenes() {
        let scenario = Scenario::default();
        let cfg = ApfConfig::default();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..500 {
            let world = world_with_ped(
                rng.random_range(-10.0..60.0),
                rng.random_range(-10.0..10.0),
            );
            let u = apf_control(&world, &scenario, &cfg);
            assert!((0.0..=scenario.u_max()).contains(&u), "u = {u}");
        }
    }

    #[test]
    fn quantile_update_matches_hand_values() {
        let mut s = AcpState::new(AcpConfig::default());
        s.update(true); // cover: down by eta·alpha = 0.0075
        assert!((s.q - 0.2925).abs() < 1e-12);
        let mut s = AcpState::new(AcpConfig::default());
        s.update(false); // miss: up by eta·(1 − alpha) = 0.0425
        assert!((s.q - 0.3425).abs() < 1e-12);
    }

    #[test]
    fn quantile_stays_nonnegative_and_moves_at_most_eta() {
        let mut s = AcpState::new(AcpConfig {
            q0: 0.001,
            ..AcpConfig::default()
        });
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let before = s.q;
            s.update(rng.random_bool(0.5));
            assert!(s.q >= 0.0);
            assert!((s.q - before).abs() <= s.eta + 1e-15);
        }
    }

    #[test]
    fn miss_rate_at_target_leaves_the_quantile_unchanged() {
        // 17 covers and 3 misses in 20 updates is exactly the 0.15 target:
        // the increments cancel and the bound returns to where it started.
        let mut s = AcpState::new(AcpConfig::default());
        for i in 0..20 {
            s.update(i % 20 >= 3);
        }
        let q0 = AcpConfig::default().q0;
        assert!((s.q - q0).abs() < 1e-12, "q drifted to {}", s.q);
    }

    #[test]
    fn miss_streak_raises_the_bound_every_step() {
        let mut s = AcpState::new(AcpConfig::default());
        let mut last = s.q;
        for _ in 0..10 {
            s.update(false);
            assert!(s.q > last);
            last = s.q;
        }
    }

    fn acp_ctx<'a>(
        predictor: &'a ConstVelPredictor,
        model: &'a LinearDisplacement,
        cfg: AcpConfig,
    ) -> AcpContext<'a, ConstVelPredictor, LinearDisplacement> {
        AcpContext {
            predictor,
            model,
            cost: CostSpec::default(),
            safety: SafetyConstants::default(),
            limits: ControlLimits::default(),
            inner: ScpConfig::default(),
            cfg,
        }
    }

    #[test]
    fn bound_holds_still_until_the_first_prediction_matures() {
        let scenario = Scenario::default();
        let params = SfmParams {
            noise_std: 0.0,
            ..SfmParams::default()
        };
        let predictor = ConstVelPredictor {
            horizon: T,
            dt: scenario.dt,
        };
        let model = LinearDisplacement;
        let mut controller = AcpController::new(acp_ctx(&predictor, &model, AcpConfig::default()));

        let mut world = world_with_ped(30.0, 4.0);
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut q_history = Vec::new();
        for _ in 0..(2 * T) {
            let out = controller.control(&world, &scenario).unwrap();
            q_history.push(controller.state().q);
            world = crate::sim::env_step(&world, out.u, &scenario, &params, &mut rng).unwrap();
        }
        // Steps 0..T−1 plan with the untouched initial bound.
        let q0 = AcpConfig::default().q0;
        for (i, q) in q_history[..T].iter().enumerate() {
            assert_eq!(*q, q0, "bound moved at step {i} before any score");
        }
        // From step T on, every step scores one matured prediction.
        for (i, pair) in q_history[T - 1..].windows(2).enumerate() {
            assert_ne!(pair[1], pair[0], "no update at step {}", T + i);
        }
    }

    #[test]
    fn zero_bound_planner_matches_the_refreshing_planner_when_clear() {
        // With the bound pinned at zero and the pedestrian far away, the
        // adaptive planner and the bound-refreshing planner solve the same
        // problem: average applied speeds agree within 5%.
        let scenario = Scenario {
            crossing_min: 35.0,
            crossing_max: 35.0,
            ..Scenario::default()
        };
        let params = SfmParams::default();
        let predictor = ConstVelPredictor {
            horizon: T,
            dt: scenario.dt,
        };
        let model = LinearDisplacement;

        let mut acp = AcpController::new(acp_ctx(
            &predictor,
            &model,
            AcpConfig {
                q0: 0.0,
                eta: 0.0, // freeze the bound for the comparison
                ..AcpConfig::default()
            },
        ));
        let log_acp = run_episode(&mut acp, &scenario, &params, 42);

        let mut entries = BTreeMap::new();
        entries.insert(
            (0, 0),
            RegionBounds {
                count: 1000,
                bounds: vec![0.0; T],
            },
        );
        let table = BoundTable {
            gamma: 0.015,
            horizon: T,
            n_min: 50,
            partition: Partition {
                distance_edges: vec![0.0],
                speed_edges: vec![0.0],
            },
            entries,
        };
        let mut scp2 = MpcController::new(MpcContext {
            predictor: &predictor,
            model: &model,
            table: &table,
            cost: CostSpec::default(),
            safety: SafetyConstants::default(),
            limits: ControlLimits::default(),
            dt: scenario.dt,
            inner: ScpConfig::default(),
            outer: Default::default(),
        });
        let log_scp2 = run_episode(&mut scp2, &scenario, &params, 42);

        let avg = |steps: &[crate::sim::StepRecord]| {
            steps.iter().map(|s| s.control).sum::<f64>() / steps.len() as f64
        };
        let a = avg(&log_acp.steps);
        let b = avg(&log_scp2.steps);
        assert!(
            (a - b).abs() <= 0.05 * b.max(a),
            "average speeds diverged: {a} vs {b}"
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
        let run = || {
            let mut controller =
                AcpController::new(acp_ctx(&predictor, &model, AcpConfig::default()));
            run_episode(&mut controller, &scenario, &SfmParams::default(), 5).to_jsonl()
        };
        assert_eq!(run(), run());

        let apf_run = || {
            let mut controller = ApfController::default();
            run_episode(&mut controller, &scenario, &SfmParams::default(), 5).to_jsonl()
        };
        assert_eq!(apf_run(), apf_run());
    }
}
