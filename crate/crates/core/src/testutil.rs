//! Test-only stand-ins shared by module tests.

use crate::predictor::{Mat, PredictorInput, TrajectoryPredictor};
use crate::sim::Vec2;

/// Predicts straight-line drift at the pedestrian's current velocity. The
/// plan never influences the prediction, so the control Jacobians vanish,
/// which makes closed-loop behavior easy to reason about by hand.
pub(crate) struct ConstVelPredictor {
    pub horizon: usize,
    pub dt: f64,
}

impl TrajectoryPredictor for ConstVelPredictor {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn predict(&self, input: &PredictorInput) -> Vec<Vec2> {
        (1..=self.horizon)
            .map(|k| input.ped.position + input.ped.velocity * (self.dt * k as f64))
            .collect()
    }

    fn input_jacobian(&self, _input: &PredictorInput) -> Vec<Mat> {
        vec![Mat::zeros(2, self.horizon - 1); self.horizon]
    }
}
