//! Serialized attack results. One record per attacked scene, written as a
//! JSON line; evaluation consumes these records and can re-score the saved
//! stabilized-lane images with any verifier.

use serde::{Deserialize, Serialize};

use super::scene::PatchPlacement;
use crate::geometry::PolyLane;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetInfo {
    pub coeffs: Vec<f64>,
    pub row_min: i32,
    pub row_max: i32,
}

impl TargetInfo {
    pub fn from_poly(p: &PolyLane) -> Self {
        TargetInfo {
            coeffs: p.coeffs.clone(),
            row_min: p.row_min,
            row_max: p.row_max,
        }
    }

    pub fn to_poly(&self) -> PolyLane {
        PolyLane::new(self.coeffs.clone(), self.row_min, self.row_max)
    }
}

/// One lane the detector reported on the attacked scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneObservation {
    pub lane_id: u32,
    /// Polynomial fitted to the detected centerline.
    pub coeffs: Vec<f64>,
    pub row_min: i32,
    pub row_max: i32,
    /// Stabilized lane image, relative to the results root.
    pub stab_png: String,
    /// Fake probability assigned by the verifier used during the attack run.
    pub score: f64,
}

impl LaneObservation {
    pub fn to_poly(&self) -> PolyLane {
        PolyLane::new(self.coeffs.clone(), self.row_min, self.row_max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub scene_id: u64,
    /// "bounded", "patch-fixed", or "patch-variable".
    pub mode: String,
    /// Adaptive alternation rounds; 0 means the plain one-stage attack.
    pub cycles: usize,
    pub eps: f64,
    pub step: f64,
    pub patch: Option<PatchPlacement>,
    pub target: TargetInfo,
    /// Detector segmentation IoU against the target lane after the attack.
    pub iou_vs_target: f64,
    pub iterations: usize,
    pub converged: bool,
    pub wall_ms: u64,
    /// Lanes the detector found on the clean scene, for reference.
    pub clean_lanes: usize,
    /// Lanes the detector found on the attacked scene.
    pub lanes: Vec<LaneObservation>,
}
