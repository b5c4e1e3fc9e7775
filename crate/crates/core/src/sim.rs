//! Road-crossing simulation.
//!
//! Geometry: `x` runs along the road in the vehicle's travel direction, `y`
//! across it. The vehicle keeps a fixed lateral offset and advances by a
//! bounded per-step displacement `u ∈ [0, v_max·dt]`. Pedestrians enter from
//! one sidewalk and walk to the other under a social-force model: relaxation
//! toward their desired crossing velocity, an exponential repulsion from the
//! vehicle that strengthens with the vehicle's current speed, and white
//! acceleration noise. Integration is semi-implicit Euler with a hard cap on
//! walking speed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::ops::{Add, Mul, Sub};
use thiserror::Error;

/// Errors produced by the environment and by policies driving it.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("control {u} outside admissible range [0, {max}]")]
    ControlOutOfRange { u: f64, max: f64 },
    #[error("policy failed at step {step}: {reason}")]
    PolicyFailure { step: usize, reason: String },
}

impl SimError {
    /// Convenience constructor for controllers reporting an internal failure.
    pub fn policy(step: usize, reason: impl std::fmt::Display) -> Self {
        SimError::PolicyFailure {
            step,
            reason: reason.to_string(),
        }
    }
}

/// Plane vector used for pedestrian kinematics and distances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(self, other: Vec2) -> f64 {
        (self - other).norm()
    }

    /// Unit vector in the direction of `self`, or zero when degenerate.
    pub fn unit_or_zero(self) -> Vec2 {
        let n = self.norm();
        if n > 1e-12 {
            self * (1.0 / n)
        } else {
            Vec2::ZERO
        }
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

/// Static description of one crossing scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scenario {
    /// m, travel distance to the vehicle's goal line.
    pub road_length: f64,
    /// m, crossing distance between the two sidewalks.
    pub road_width: f64,
    /// s, integration and control period.
    pub dt: f64,
    /// Number of simultaneously crossing pedestrians.
    pub n_pedestrians: usize,
    /// m, minimum admissible vehicle-pedestrian distance.
    pub d_safe: f64,
    /// m/s, top vehicle speed.
    pub v_max: f64,
    /// Step budget before an episode times out.
    pub max_episode_steps: usize,
    /// m, earliest crossing point along the road.
    pub crossing_min: f64,
    /// m, latest crossing point along the road.
    pub crossing_max: f64,
    /// Whether an episode stops at the first safety violation. Disabled for
    /// data collection so close-range interactions stay observable.
    pub terminate_on_violation: bool,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            road_length: 50.0,
            road_width: 20.0,
            dt: 0.1,
            n_pedestrians: 1,
            d_safe: 2.0,
            v_max: 15.0,
            max_episode_steps: 600,
            crossing_min: 15.0,
            crossing_max: 35.0,
            terminate_on_violation: true,
        }
    }
}

impl Scenario {
    /// m, largest admissible per-step displacement.
    pub fn u_max(&self) -> f64 {
        self.v_max * self.dt
    }

    /// m, lateral half-width of the road band.
    pub fn half_width(&self) -> f64 {
        self.road_width / 2.0
    }
}

/// Social-force walking-model parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SfmParams {
    /// kg, pedestrian mass.
    pub mass: f64,
    /// s, relaxation time toward the desired velocity.
    pub tau: f64,
    /// m/s, preferred walking speed.
    pub desired_speed: f64,
    /// N, vehicle repulsion strength at zero distance and zero vehicle speed.
    pub repulsion_gain: f64,
    /// m, e-folding distance of the vehicle repulsion.
    pub repulsion_range: f64,
    /// m/s² per axis, std of the white acceleration noise.
    pub noise_std: f64,
    /// m/s, hard cap on walking speed.
    pub v_ped_max: f64,
}

impl Default for SfmParams {
    fn default() -> Self {
        SfmParams {
            mass: 70.0,
            tau: 0.5,
            desired_speed: 1.4,
            // Short-range, moderate repulsion: pedestrians flinch away from a
            // vehicle closing in on them but cannot outrun one that arrives
            // at speed, so clearance has to come from the vehicle's side.
            repulsion_gain: 120.0,
            repulsion_range: 1.8,
            noise_std: 0.4,
            v_ped_max: 3.0,
        }
    }
}

/// Vehicle pose: scalar progress along the road plus a fixed lane offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    /// m, progress along the road axis.
    pub position: f64,
    /// m, lateral offset of the lane center.
    pub lane_offset: f64,
}

impl VehicleState {
    /// Plane position of the vehicle.
    pub fn point(&self) -> Vec2 {
        Vec2::new(self.position, self.lane_offset)
    }
}

/// One pedestrian's kinematic state and crossing goal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PedestrianState {
    pub position: Vec2,
    pub velocity: Vec2,
    /// Target point on the opposite sidewalk.
    pub goal: Vec2,
}

/// Full simulation state at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub vehicle: VehicleState,
    pub pedestrians: Vec<PedestrianState>,
    pub step_index: usize,
}

impl WorldState {
    /// Distance to the closest pedestrian currently on the road band, or
    /// +inf when none is.
    pub fn min_active_distance(&self, scenario: &Scenario) -> f64 {
        let v = self.vehicle.point();
        self.pedestrians
            .iter()
            .filter(|p| p.position.y.abs() <= scenario.half_width())
            .map(|p| p.position.dist(v))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Advance the vehicle by one admissible displacement.
pub fn vehicle_step(
    vehicle: &VehicleState,
    u: f64,
    scenario: &Scenario,
) -> Result<VehicleState, SimError> {
    let max = scenario.u_max();
    if !u.is_finite() || u < 0.0 || u > max {
        return Err(SimError::ControlOutOfRange { u, max });
    }
    Ok(VehicleState {
        position: vehicle.position + u,
        lane_offset: vehicle.lane_offset,
    })
}

/// Pedestrian acceleration under the social-force model.
///
/// `u` is the displacement the vehicle applies during the current step; the
/// repulsion gain scales with `1 + u/u_max` so a faster approach produces a
/// stronger avoidance response. At zero vehicle-pedestrian distance the
/// repulsion direction degenerates; it falls back to the road axis with the
/// magnitude capped at `10·repulsion_gain/mass`.
pub fn sfm_accel<R: Rng>(
    ped: &PedestrianState,
    vehicle: &VehicleState,
    u: f64,
    params: &SfmParams,
    scenario: &Scenario,
    rng: &mut R,
) -> Vec2 {
    // Relaxation toward the desired crossing velocity; pedestrians standing
    // on their goal relax toward zero velocity.
    let desired = (ped.goal - ped.position).unit_or_zero() * params.desired_speed;
    let dest = (desired - ped.velocity) * (1.0 / params.tau);

    // Speed-scaled exponential repulsion from the vehicle.
    let offset = ped.position - vehicle.point();
    let d = offset.norm();
    let gain = params.repulsion_gain * (1.0 + u / scenario.u_max());
    let mag = (gain * (-d / params.repulsion_range).exp() / params.mass)
        .min(10.0 * params.repulsion_gain / params.mass);
    let dir = if d > 1e-12 {
        offset * (1.0 / d)
    } else {
        Vec2::new(1.0, 0.0)
    };
    let repulsion = dir * mag;

    let mut accel = dest + repulsion;
    if params.noise_std > 0.0 {
        let normal = Normal::new(0.0, params.noise_std).expect("valid noise std");
        accel.x += normal.sample(rng);
        accel.y += normal.sample(rng);
    }
    accel
}

/// Advance the whole world by one step: the vehicle moves by `u`, every
/// pedestrian integrates its social-force acceleration (semi-implicit Euler,
/// speed capped at `v_ped_max`). Pedestrians react to the vehicle pose at the
/// start of the step; noise is drawn per pedestrian in storage order, x axis
/// first.
pub fn env_step<R: Rng>(
    world: &WorldState,
    u: f64,
    scenario: &Scenario,
    params: &SfmParams,
    rng: &mut R,
) -> Result<WorldState, SimError> {
    let vehicle = vehicle_step(&world.vehicle, u, scenario)?;
    let dt = scenario.dt;
    let pedestrians = world
        .pedestrians
        .iter()
        .map(|ped| {
            let a = sfm_accel(ped, &world.vehicle, u, params, scenario, rng);
            let mut v = ped.velocity + a * dt;
            let speed = v.norm();
            if speed > params.v_ped_max {
                v = v * (params.v_ped_max / speed);
            }
            PedestrianState {
                position: ped.position + v * dt,
                velocity: v,
                goal: ped.goal,
            }
        })
        .collect();
    Ok(WorldState {
        vehicle,
        pedestrians,
        step_index: world.step_index + 1,
    })
}

/// Sample the initial world: vehicle at the road start, pedestrians mid-walk
/// at a uniformly random point of their sidewalk-to-sidewalk crossing, so an
/// episode can open with someone about to enter — or already on — the lane.
pub fn initial_world<R: Rng>(scenario: &Scenario, params: &SfmParams, rng: &mut R) -> WorldState {
    let half = scenario.half_width();
    let pedestrians = (0..scenario.n_pedestrians)
        .map(|_| {
            let cross_x = rng.random_range(scenario.crossing_min..=scenario.crossing_max);
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let start = Vec2::new(cross_x, side * (half + 0.5));
            let goal = Vec2::new(cross_x, -side * (half + 1.0));
            let phase = rng.random_range(0.0..1.0);
            let position = start + (goal - start) * phase;
            PedestrianState {
                position,
                velocity: (goal - position).unit_or_zero() * params.desired_speed,
                goal,
            }
        })
        .collect();
    WorldState {
        vehicle: VehicleState {
            position: 0.0,
            lane_offset: 0.0,
        },
        pedestrians,
        step_index: 0,
    }
}

/// How an episode ended.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum EpisodeStatus {
    /// Vehicle crossed the goal line.
    ReachedGoal,
    /// Vehicle came closer than `d_safe` to a pedestrian on the road band.
    SafetyViolation,
    /// Step budget exhausted.
    Timeout,
    /// The policy or the environment raised an error.
    Aborted(String),
}

/// Per-step controller diagnostics carried into the episode log. Fields that
/// a controller does not produce stay at their empty defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepDiag {
    /// Bound-refresh laps performed by the outer loop.
    pub outer_iterations: u32,
    /// Total linearize-and-solve iterations across all inner calls.
    pub inner_iterations: u32,
    /// Inner solves that converged this step.
    pub converged_calls: u32,
    /// Outer loop exited through the bound-growth shortcut.
    pub shortcut: bool,
    /// The step ended on a fallback plan; no lap certified a fresh one.
    pub rejected: bool,
    /// Laps discarded for failing their refreshed-bounds check, recovered or
    /// not.
    pub rejected_laps: u32,
    /// Controller fell back to zero displacement.
    pub fail_safe: bool,
    /// Max stationarity residual over this step's converged inner calls.
    pub kkt_stationarity: Option<f64>,
    /// Max complementary-slackness product over converged inner calls.
    pub kkt_comp_slack: Option<f64>,
    /// Max nonlinear constraint violation of the returned plans over this
    /// step's converged inner calls.
    pub feasibility_max: Option<f64>,
    /// Distance the shortcut solution moved when re-solved under the
    /// refreshed bounds (populated only in verification mode).
    pub shortcut_recheck_step: Option<f64>,
}

/// Control decision for one step.
#[derive(Debug, Clone)]
pub struct PolicyOutput {
    /// m, displacement to apply this step.
    pub u: f64,
    pub diag: Option<StepDiag>,
}

impl PolicyOutput {
    pub fn plain(u: f64) -> Self {
        PolicyOutput { u, diag: None }
    }
}

/// A closed-loop controller. One value drives one episode; construct a fresh
/// one per episode so warm starts and online state reset.
pub trait Policy {
    fn control(&mut self, world: &WorldState, scenario: &Scenario)
        -> Result<PolicyOutput, SimError>;
}

/// Serde adapter for distances that may be +inf (no pedestrian on the road
/// band). JSON has no infinity literal, so the infinite case maps to `null`.
mod distance_or_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// State of the world after one executed step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Index of the executed step (the resulting world has this step_index).
    pub step: usize,
    /// m, displacement applied during the step.
    pub control: f64,
    /// World after the step.
    pub world: WorldState,
    /// Distance to the closest on-road pedestrian after the step (+inf when
    /// none is on the road band).
    #[serde(with = "distance_or_null")]
    pub min_distance: f64,
    pub diag: Option<StepDiag>,
}

/// Complete record of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub seed: u64,
    pub status: EpisodeStatus,
    /// Smallest on-road pedestrian distance observed over the episode.
    #[serde(with = "distance_or_null")]
    pub min_distance: f64,
    pub initial: WorldState,
    pub steps: Vec<StepRecord>,
}

/// One line of the serialized episode log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum LogLine {
    Meta {
        seed: u64,
        status: EpisodeStatus,
        steps: usize,
        #[serde(with = "distance_or_null")]
        min_distance: f64,
    },
    Init {
        world: WorldState,
    },
    Step(StepRecord),
}

impl EpisodeLog {
    /// Number of executed steps.
    pub fn steps_taken(&self) -> usize {
        self.steps.len()
    }

    /// m, total distance the vehicle traveled.
    pub fn distance_traveled(&self) -> f64 {
        match self.steps.last() {
            Some(last) => last.world.vehicle.position - self.initial.vehicle.position,
            None => 0.0,
        }
    }

    /// Serialize as line-delimited records: one meta line, one initial-state
    /// line, then one line per executed step. Field order is fixed by the
    /// record definitions, so equal logs serialize to equal bytes.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |line: &LogLine| {
            out.push_str(&serde_json::to_string(line).expect("log serialization"));
            out.push('\n');
        };
        push(&LogLine::Meta {
            seed: self.seed,
            status: self.status.clone(),
            steps: self.steps.len(),
            min_distance: self.min_distance,
        });
        push(&LogLine::Init {
            world: self.initial.clone(),
        });
        for step in &self.steps {
            push(&LogLine::Step(step.clone()));
        }
        out
    }

    /// Parse a log serialized by [`EpisodeLog::to_jsonl`].
    pub fn from_jsonl(text: &str) -> Result<EpisodeLog, serde_json::Error> {
        let mut seed = 0;
        let mut status = EpisodeStatus::Timeout;
        let mut min_distance = f64::INFINITY;
        let mut initial = None;
        let mut steps = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            match serde_json::from_str::<LogLine>(line)? {
                LogLine::Meta {
                    seed: s,
                    status: st,
                    min_distance: d,
                    ..
                } => {
                    seed = s;
                    status = st;
                    min_distance = d;
                }
                LogLine::Init { world } => initial = Some(world),
                LogLine::Step(rec) => steps.push(rec),
            }
        }
        Ok(EpisodeLog {
            seed,
            status,
            min_distance,
            initial: initial.unwrap_or(WorldState {
                vehicle: VehicleState {
                    position: 0.0,
                    lane_offset: 0.0,
                },
                pedestrians: Vec::new(),
                step_index: 0,
            }),
            steps,
        })
    }
}

/// Run one full episode under `policy` with a self-contained random stream.
///
/// Termination, checked in order at the start of each step: goal line
/// reached, step budget exhausted. After each transition the safety condition
/// is evaluated on the new state: a pedestrian on the road band closer than
/// `d_safe` is a violation, which ends the episode unless
/// `terminate_on_violation` is off. Policy or environment errors abort the
/// episode with a diagnostic status.
pub fn run_episode<P: Policy>(
    policy: &mut P,
    scenario: &Scenario,
    params: &SfmParams,
    seed: u64,
) -> EpisodeLog {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let initial = initial_world(scenario, params, &mut rng);
    let mut world = initial.clone();
    let mut steps = Vec::new();
    let mut min_distance = world.min_active_distance(scenario);

    let status = loop {
        if world.vehicle.position >= scenario.road_length {
            break EpisodeStatus::ReachedGoal;
        }
        if world.step_index >= scenario.max_episode_steps {
            break EpisodeStatus::Timeout;
        }
        let out = match policy.control(&world, scenario) {
            Ok(out) => out,
            Err(e) => break EpisodeStatus::Aborted(e.to_string()),
        };
        let next = match env_step(&world, out.u, scenario, params, &mut rng) {
            Ok(next) => next,
            Err(e) => break EpisodeStatus::Aborted(e.to_string()),
        };
        let dist = next.min_active_distance(scenario);
        min_distance = min_distance.min(dist);
        steps.push(StepRecord {
            step: next.step_index,
            control: out.u,
            world: next.clone(),
            min_distance: dist,
            diag: out.diag,
        });
        world = next;
        if dist < scenario.d_safe && scenario.terminate_on_violation {
            break EpisodeStatus::SafetyViolation;
        }
    };

    EpisodeLog {
        seed,
        status,
        min_distance,
        initial,
        steps,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn quiet_params() -> SfmParams {
        SfmParams {
            noise_std: 0.0,
            ..SfmParams::default()
        }
    }

    struct ConstPolicy(f64);
    impl Policy for ConstPolicy {
        fn control(&mut self, _: &WorldState, _: &Scenario) -> Result<PolicyOutput, SimError> {
            Ok(PolicyOutput::plain(self.0))
        }
    }

    #[test]
    fn vehicle_step_advances_by_displacement() {
        let sc = Scenario::default();
        let v = VehicleState {
            position: 10.0,
            lane_offset: 0.0,
        };
        let next = vehicle_step(&v, 1.2, &sc).unwrap();
        assert_relative_eq!(next.position, 11.2, max_relative = 1e-15);
        assert_eq!(next.lane_offset, 0.0);
    }

    #[test]
    fn vehicle_step_rejects_out_of_range_control() {
        let sc = Scenario::default();
        let v = VehicleState {
            position: 0.0,
            lane_offset: 0.0,
        };
        assert!(matches!(
            vehicle_step(&v, 2.0, &sc),
            Err(SimError::ControlOutOfRange { .. })
        ));
        assert!(vehicle_step(&v, -0.1, &sc).is_err());
        assert_eq!(vehicle_step(&v, 0.0, &sc).unwrap().position, 0.0);
    }

    #[test]
    fn sfm_accel_vanishes_at_desired_velocity_far_from_vehicle() {
        let sc = Scenario::default();
        let params = quiet_params();
        let goal = Vec2::new(20.0, -11.0);
        let position = Vec2::new(20.0, 5.0);
        let ped = PedestrianState {
            position,
            velocity: (goal - position).unit_or_zero() * params.desired_speed,
            goal,
        };
        let far_vehicle = VehicleState {
            position: -1.0e6,
            lane_offset: 0.0,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let a = sfm_accel(&ped, &far_vehicle, 0.0, &params, &sc, &mut rng);
        assert!(a.norm() < 1e-9, "expected ~0 acceleration, got {a:?}");
    }

    #[test]
    fn sfm_accel_relaxation_magnitude_from_rest() {
        let sc = Scenario::default();
        let params = quiet_params();
        let ped = PedestrianState {
            position: Vec2::new(20.0, 10.0),
            velocity: Vec2::ZERO,
            goal: Vec2::new(20.0, -11.0),
        };
        let far_vehicle = VehicleState {
            position: -1.0e6,
            lane_offset: 0.0,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let a = sfm_accel(&ped, &far_vehicle, 0.0, &params, &sc, &mut rng);
        // |a| = desired_speed / tau = 1.4 / 0.5, pointing at the goal.
        assert_relative_eq!(a.norm(), 2.8, max_relative = 1e-12);
        assert!(a.y < 0.0 && a.x.abs() < 1e-12);
    }

    #[test]
    fn sfm_accel_repulsion_grows_with_vehicle_speed() {
        let sc = Scenario::default();
        let params = quiet_params();
        let ped = PedestrianState {
            position: Vec2::new(12.0, 1.0),
            velocity: Vec2::ZERO,
            goal: Vec2::new(12.0, -11.0),
        };
        let vehicle = VehicleState {
            position: 10.0,
            lane_offset: 0.0,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let slow = sfm_accel(&ped, &vehicle, 0.0, &params, &sc, &mut rng);
        let fast = sfm_accel(&ped, &vehicle, sc.u_max(), &params, &sc, &mut rng);
        // Same geometry, doubled gain at full speed: strictly stronger push
        // away from the vehicle along the offset direction.
        let dir = (ped.position - vehicle.point()).unit_or_zero();
        let proj_slow = slow.x * dir.x + slow.y * dir.y;
        let proj_fast = fast.x * dir.x + fast.y * dir.y;
        assert!(proj_fast > proj_slow + 1e-9);
    }

    #[test]
    fn sfm_accel_same_seed_same_noise() {
        let sc = Scenario::default();
        let params = SfmParams::default();
        let ped = PedestrianState {
            position: Vec2::new(12.0, 3.0),
            velocity: Vec2::new(0.2, -1.0),
            goal: Vec2::new(12.0, -11.0),
        };
        let vehicle = VehicleState {
            position: 8.0,
            lane_offset: 0.0,
        };
        let a1 = sfm_accel(
            &ped,
            &vehicle,
            0.7,
            &params,
            &sc,
            &mut ChaCha12Rng::seed_from_u64(42),
        );
        let a2 = sfm_accel(
            &ped,
            &vehicle,
            0.7,
            &params,
            &sc,
            &mut ChaCha12Rng::seed_from_u64(42),
        );
        assert_eq!(a1, a2);
    }

    #[test]
    fn env_step_is_identity_for_settled_world() {
        let sc = Scenario::default();
        let params = quiet_params();
        let goal = Vec2::new(20.0, -11.0);
        // Vehicle far enough away that its exponential repulsion underflows;
        // at moderate range it still nudges a settled pedestrian measurably.
        let world = WorldState {
            vehicle: VehicleState {
                position: -1e6,
                lane_offset: 0.0,
            },
            pedestrians: vec![PedestrianState {
                position: goal,
                velocity: Vec2::ZERO,
                goal,
            }],
            step_index: 3,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let next = env_step(&world, 0.0, &sc, &params, &mut rng).unwrap();
        assert_eq!(next.vehicle, world.vehicle);
        assert!(next.pedestrians[0].position.dist(goal) < 1e-9);
        assert!(next.pedestrians[0].velocity.norm() < 1e-9);
        assert_eq!(next.step_index, 4);
    }

    /// Re-integrate a short rollout with an independent straight-line
    /// transcription of the model equations and the same noise stream.
    #[test]
    fn env_step_matches_independent_reintegration() {
        let sc = Scenario {
            n_pedestrians: 2,
            ..Scenario::default()
        };
        let params = SfmParams::default();
        let mut spawn_rng = ChaCha12Rng::seed_from_u64(9);
        let start = initial_world(&sc, &params, &mut spawn_rng);
        let controls: Vec<f64> = (0..20).map(|i| 0.07 * (i % 10) as f64).collect();

        // Reference trajectory through env_step.
        let mut rng = ChaCha12Rng::seed_from_u64(123);
        let mut world = start.clone();
        let mut reference = Vec::new();
        for &u in &controls {
            world = env_step(&world, u, &sc, &params, &mut rng).unwrap();
            reference.push(world.clone());
        }

        // Independent re-integration with its own arithmetic.
        let mut rng = ChaCha12Rng::seed_from_u64(123);
        let mut veh_x = start.vehicle.position;
        let mut peds: Vec<(Vec2, Vec2, Vec2)> = start
            .pedestrians
            .iter()
            .map(|p| (p.position, p.velocity, p.goal))
            .collect();
        for (t, &u) in controls.iter().enumerate() {
            let veh = Vec2::new(veh_x, 0.0);
            veh_x += u;
            for (pos, vel, goal) in peds.iter_mut() {
                let to_goal = *goal - *pos;
                let n = to_goal.norm();
                let desired = if n > 1e-12 {
                    Vec2::new(
                        to_goal.x / n * params.desired_speed,
                        to_goal.y / n * params.desired_speed,
                    )
                } else {
                    Vec2::ZERO
                };
                let mut ax = (desired.x - vel.x) / params.tau;
                let mut ay = (desired.y - vel.y) / params.tau;
                let off = *pos - veh;
                let d = (off.x * off.x + off.y * off.y).sqrt();
                let gain = params.repulsion_gain * (1.0 + u / (sc.v_max * sc.dt));
                let mag = (gain * (-d / params.repulsion_range).exp() / params.mass)
                    .min(10.0 * params.repulsion_gain / params.mass);
                if d > 1e-12 {
                    ax += mag * off.x / d;
                    ay += mag * off.y / d;
                } else {
                    ax += mag;
                }
                let normal = Normal::new(0.0, params.noise_std).unwrap();
                ax += normal.sample(&mut rng);
                ay += normal.sample(&mut rng);
                let mut vx = vel.x + ax * sc.dt;
                let mut vy = vel.y + ay * sc.dt;
                let speed = (vx * vx + vy * vy).sqrt();
                if speed > params.v_ped_max {
                    vx *= params.v_ped_max / speed;
                    vy *= params.v_ped_max / speed;
                }
                *vel = Vec2::new(vx, vy);
                *pos = Vec2::new(pos.x + vx * sc.dt, pos.y + vy * sc.dt);
            }
            let got = &reference[t];
            assert_relative_eq!(got.vehicle.position, veh_x, max_relative = 1e-12);
            for (i, (pos, vel, _)) in peds.iter().enumerate() {
                assert!(got.pedestrians[i].position.dist(*pos) < 1e-12);
                assert!(got.pedestrians[i].velocity.dist(*vel) < 1e-12);
            }
        }
    }

    #[test]
    fn pedestrians_evolve_independently_without_noise() {
        let params = quiet_params();
        let sc5 = Scenario {
            n_pedestrians: 5,
            ..Scenario::default()
        };
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let world5 = initial_world(&sc5, &params, &mut rng);
        let mut joint = world5.clone();
        let mut rng_j = ChaCha12Rng::seed_from_u64(0);
        for _ in 0..30 {
            joint = env_step(&joint, 0.9, &sc5, &params, &mut rng_j).unwrap();
        }
        for (i, ped) in world5.pedestrians.iter().enumerate() {
            let mut solo = WorldState {
                vehicle: world5.vehicle,
                pedestrians: vec![*ped],
                step_index: 0,
            };
            let mut rng_s = ChaCha12Rng::seed_from_u64(0);
            for _ in 0..30 {
                solo = env_step(&solo, 0.9, &sc5, &params, &mut rng_s).unwrap();
            }
            assert!(joint.pedestrians[i]
                .position
                .dist(solo.pedestrians[0].position)
                < 1e-12);
        }
    }

    #[test]
    fn velocity_relaxes_geometrically_toward_desired() {
        let sc = Scenario::default();
        let params = quiet_params();
        // Goal far along +x keeps the desired direction effectively constant.
        let goal = Vec2::new(1.0e6, 0.0);
        let mut world = WorldState {
            vehicle: VehicleState {
                position: -1.0e5,
                lane_offset: 0.0,
            },
            pedestrians: vec![PedestrianState {
                position: Vec2::new(0.0, 0.0),
                velocity: Vec2::ZERO,
                goal,
            }],
            step_index: 0,
        };
        let desired = Vec2::new(params.desired_speed, 0.0);
        let mut gap = (world.pedestrians[0].velocity - desired).norm();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        for _ in 0..10 {
            world = env_step(&world, 0.0, &sc, &params, &mut rng).unwrap();
            let next_gap = (world.pedestrians[0].velocity - desired).norm();
            let rate = next_gap / gap;
            assert_relative_eq!(rate, 1.0 - sc.dt / params.tau, epsilon = 1e-5);
            gap = next_gap;
        }
    }

    #[test]
    fn walking_speed_is_hard_capped() {
        let sc = Scenario::default();
        let params = SfmParams {
            repulsion_gain: 1.0e5,
            noise_std: 3.0,
            ..SfmParams::default()
        };
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let mut world = initial_world(&sc, &params, &mut rng);
        // Park the vehicle on top of the pedestrian's path to excite the cap.
        world.vehicle.position = world.pedestrians[0].position.x;
        for _ in 0..200 {
            world = env_step(&world, 0.0, &sc, &params, &mut rng).unwrap();
            for p in &world.pedestrians {
                assert!(p.velocity.norm() <= params.v_ped_max + 1e-12);
            }
        }
    }

    #[test]
    fn full_speed_policy_reaches_goal_in_expected_steps() {
        let sc = Scenario {
            n_pedestrians: 0,
            ..Scenario::default()
        };
        let params = quiet_params();
        let log = run_episode(&mut ConstPolicy(1.5), &sc, &params, 5);
        assert_eq!(log.status, EpisodeStatus::ReachedGoal);
        // ceil(50 / 1.5) = 34 steps.
        assert_eq!(log.steps_taken(), 34);
        // Position is nondecreasing under nonnegative displacements.
        let mut prev = log.initial.vehicle.position;
        for s in &log.steps {
            assert!(s.world.vehicle.position >= prev);
            prev = s.world.vehicle.position;
        }
    }

    #[test]
    fn zero_policy_times_out() {
        let sc = Scenario {
            max_episode_steps: 40,
            ..Scenario::default()
        };
        let log = run_episode(&mut ConstPolicy(0.0), &sc, &quiet_params(), 5);
        assert_eq!(log.status, EpisodeStatus::Timeout);
        assert_eq!(log.steps_taken(), 40);
    }

    #[test]
    fn failing_policy_aborts_with_diagnostic() {
        struct Broken;
        impl Policy for Broken {
            fn control(&mut self, w: &WorldState, _: &Scenario) -> Result<PolicyOutput, SimError> {
                Err(SimError::policy(w.step_index, "solver exploded"))
            }
        }
        let log = run_episode(&mut Broken, &Scenario::default(), &quiet_params(), 5);
        match log.status {
            EpisodeStatus::Aborted(msg) => assert!(msg.contains("solver exploded")),
            other => panic!("expected abort, got {other:?}"),
        }
    }

    #[test]
    fn episode_logs_are_reproducible_and_round_trip() {
        let sc = Scenario::default();
        let params = SfmParams::default();
        let a = run_episode(&mut ConstPolicy(1.0), &sc, &params, 21).to_jsonl();
        let b = run_episode(&mut ConstPolicy(1.0), &sc, &params, 21).to_jsonl();
        assert_eq!(a, b, "same seed must produce byte-identical logs");
        let parsed = EpisodeLog::from_jsonl(&a).unwrap();
        assert_eq!(parsed.to_jsonl(), a);
    }
}
