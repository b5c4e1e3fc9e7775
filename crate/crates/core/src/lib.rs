//! Chance-constrained control of a vehicle driving past crossing pedestrians.
//!
//! The crate is organised as a pipeline:
//!
//! * [`sim`] — road-crossing environment: unicycle-along-a-line vehicle plus
//!   pedestrians driven by a social-force walking model.
//! * [`predictor`] — recurrent pedestrian-trajectory predictor with
//!   hand-rolled backpropagation, so the Jacobian of every predicted
//!   position w.r.t. every planned control is available in closed form.
//! * [`conformal`] — split-conformal calibration of per-step prediction
//!   error bounds, bucketed by interaction geometry.
//! * [`ocp`] — deterministic reformulation of the probabilistic avoidance
//!   constraint and its linearization around a reference control sequence.
//! * [`scp`] — trust-region sequential convex programming inner loop on top
//!   of a dense two-phase simplex solver.
//! * [`mpc`] — outer loop that refreshes conformal bounds from the latest
//!   plan, rejects uncertified plans, and exits early when bound growth
//!   makes further iterations provably unnecessary.
//! * [`baselines`] — artificial potential field and adaptive-conformal
//!   planning baselines used for comparison.
//! * [`harness`] — dataset generation, training/calibration drivers,
//!   closed-loop evaluation, benchmark and file-format plumbing.

pub mod baselines;
pub mod conformal;
pub mod harness;
pub mod mpc;
pub mod ocp;
pub mod predictor;
pub mod scp;
pub mod sim;

#[cfg(test)]
pub(crate) mod testutil;
