//! Attacks against the toy detector and the verification defense:
//! a projected gradient descent core over generic feasible sets, scene
//! attacks that steer the detector toward a target lane (norm-bounded or
//! patch-confined), and a two-stage adaptive variant that also pushes the
//! verifier's score down through the stabilization warp.

mod pgd;
mod record;
mod scene;

pub use pgd::{pgd, Feasible, PgdResult};
pub use record::{AttackRecord, LaneObservation, TargetInfo};
pub use scene::{
    attack_adaptive, attack_scene_seg, channel_mask, choose_gap_target, place_patch, scene_flat,
    scene_from_flat, stage2_verifier_attack, AdaptiveOutcome, PatchPlacement, PatchSizing,
    SceneAttackOutcome, PATCH_BASE_SIDE, PATCH_MIN_SIDE,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::GeometryError;
use crate::neural::NeuralError;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("non-finite gradient at iteration {0}")]
    NonFiniteGradient(usize),
    #[error("patch at row {row} lies outside the frame")]
    PatchOutOfFrame { row: i32 },
    #[error("scene has fewer than two lanes, so there is no gap to target")]
    NoGap,
    #[error("invalid attack config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

/// Projected gradient descent parameters.
///
/// The attack keeps the best-loss iterate seen so far and stops early when
/// the mean relative change of that best-loss sequence over the last
/// `conv_window` iterations falls below `conv_tol`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Radius of the L-infinity perturbation ball.
    pub eps: f64,
    /// Sign-step size.
    pub step: f64,
    pub max_iters: usize,
    pub conv_tol: f64,
    pub conv_window: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        let eps = 8.0 / 255.0;
        AttackConfig {
            eps,
            step: eps / 4.0,
            max_iters: 1000,
            conv_tol: 1e-4,
            conv_window: 10,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<(), AttackError> {
        if self.eps < 0.0 || !self.eps.is_finite() {
            return Err(AttackError::BadConfig("eps must be >= 0".into()));
        }
        if self.step <= 0.0 || !self.step.is_finite() {
            return Err(AttackError::BadConfig("step must be > 0".into()));
        }
        if self.max_iters == 0 {
            return Err(AttackError::BadConfig("max_iters must be >= 1".into()));
        }
        if self.conv_window == 0 {
            return Err(AttackError::BadConfig("conv_window must be >= 1".into()));
        }
        if self.conv_tol < 0.0 || !self.conv_tol.is_finite() {
            return Err(AttackError::BadConfig("conv_tol must be >= 0".into()));
        }
        Ok(())
    }
}
