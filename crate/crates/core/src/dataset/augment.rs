use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{Scene, Vec2};

/// Rotation augmentation over multiples of `rotation_step` degrees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub rotation_step: f64,
    pub enabled: bool,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            rotation_step: 15.0,
            enabled: true,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        let steps = 360.0 / self.rotation_step;
        if !(self.rotation_step > 0.0) || (steps - steps.round()).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "rotation step {} does not divide 360",
                self.rotation_step
            )));
        }
        Ok(())
    }

    /// All rotation angles in degrees: 0, step, 2·step, … below 360.
    pub fn angles(&self) -> Vec<f64> {
        if !self.enabled {
            return vec![0.0];
        }
        let n = (360.0 / self.rotation_step).round() as usize;
        (0..n).map(|i| i as f64 * self.rotation_step).collect()
    }
}

pub(crate) fn rotate(v: Vec2, cos: f64, sin: f64) -> Vec2 {
    [cos * v[0] - sin * v[1], sin * v[0] + cos * v[1]]
}

/// Rotates every position, velocity and acceleration by `gamma_deg` about the
/// scene origin. Class probabilities and timesteps are untouched.
pub fn rotate_scene(scene: &Scene, gamma_deg: f64) -> Scene {
    let (sin, cos) = gamma_deg.to_radians().sin_cos();
    let mut out = scene.clone();
    for track in &mut out.tracks {
        for s in &mut track.states {
            s.position = rotate(s.position, cos, sin);
            s.velocity = rotate(s.velocity, cos, sin);
            s.acceleration = rotate(s.acceleration, cos, sin);
        }
    }
    out
}
