//! Common interface for anything that closes the tracking loop.

use nalgebra::{Matrix3, Vector3};

use crate::dynamics::Command;

/// What a controller may read at one control instant.
///
/// The learned policy only uses `actor_obs`. The model-based baseline uses
/// the noisy measurement together with the ground-truth attitude and thrust.
#[derive(Clone, Copy, Debug)]
pub struct Observation<'a> {
    /// Noisy error history, newest first.
    pub actor_obs: &'a [f64],
    /// Noisy body-frame target position, consistent with `actor_obs[..3]`.
    pub measurement: Vector3<f64>,
    pub attitude: Matrix3<f64>,
    pub thrust: f64,
}

pub trait Controller {
    fn name(&self) -> &str;

    /// Clears any per-episode state.
    fn reset(&mut self);

    fn act(&mut self, obs: &Observation<'_>) -> Command;
}

/// Always commands hover.
#[derive(Clone, Debug, Default)]
pub struct HoverController;

impl Controller for HoverController {
    fn name(&self) -> &str {
        "hover"
    }

    fn reset(&mut self) {}

    fn act(&mut self, _obs: &Observation<'_>) -> Command {
        Command::hover()
    }
}
