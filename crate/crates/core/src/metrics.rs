//! Defense evaluation: IoU, threshold calibration, ROC / AUC, and the
//! per-condition defense report over attack records.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::AttackRecord;
use crate::geometry::PolyLane;
use crate::img::BitMap;
use crate::scene::{render_lane_mask, SceneConfig};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no scores to calibrate on")]
    NoScores,
}

/// Intersection over union of two masks; two empty masks count as a
/// perfect match.
pub fn iou_bitmaps(a: &BitMap, b: &BitMap) -> f64 {
    let inter = a.intersection_count(b) as f64;
    let mut u = a.clone();
    u.union_with(b);
    let union = u.count_ones() as f64;
    if union == 0.0 {
        1.0
    } else {
        inter / union
    }
}

/// Largest rejection threshold whose false positive rate on `real_scores`
/// does not exceed `target_fpr`, where a lane is rejected when its score is
/// strictly greater than the threshold.
///
/// With `allowed = floor(target_fpr * n)`, the threshold is the
/// (allowed + 1)-th largest real score; when every score may be rejected the
/// threshold drops below the minimum score.
pub fn calibrate_threshold(real_scores: &[f64], target_fpr: f64) -> Result<f64, MetricsError> {
    if real_scores.is_empty() {
        return Err(MetricsError::NoScores);
    }
    let n = real_scores.len();
    let allowed = (target_fpr * n as f64).floor() as usize;
    let mut sorted = real_scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    if allowed >= n {
        Ok(sorted[n - 1] - 1.0)
    } else {
        Ok(sorted[allowed])
    }
}

/// Observed rejection rate of `scores` at threshold `tau`.
pub fn rejection_rate(scores: &[f64], tau: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().filter(|&&s| s > tau).count() as f64 / scores.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    /// Fraction of real scores rejected (score > threshold).
    pub fpr: f64,
    /// Fraction of fake scores accepted (score <= threshold).
    pub fnr: f64,
}

/// ROC sweep over every distinct score plus a synthetic threshold below the
/// minimum, ordered by ascending threshold (descending FPR).
pub fn roc_curve(real: &[f64], fake: &[f64]) -> Vec<RocPoint> {
    let mut thresholds: Vec<f64> = real.iter().chain(fake).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    if thresholds.is_empty() {
        return Vec::new();
    }
    let mut points = Vec::with_capacity(thresholds.len() + 1);
    let mut push = |tau: f64| {
        let fpr = rejection_rate(real, tau);
        let fnr = if fake.is_empty() {
            0.0
        } else {
            fake.iter().filter(|&&s| s <= tau).count() as f64 / fake.len() as f64
        };
        points.push(RocPoint {
            threshold: tau,
            fpr,
            fnr,
        });
    };
    push(thresholds[0] - 1.0);
    for &t in &thresholds {
        push(t);
    }
    points
}

/// Area under the ROC as swept by [`roc_curve`], integrating the true
/// positive rate over the false positive rate with trapezoids. Equals the
/// probability that a random fake outscores a random real lane, counting
/// ties as one half.
pub fn auc(real: &[f64], fake: &[f64]) -> f64 {
    let points = roc_curve(real, fake);
    if points.is_empty() {
        return 0.5;
    }
    // Points run from high FPR to low; integrate in ascending order.
    let mut area = 0.0;
    for pair in points.windows(2) {
        let (hi, lo) = (&pair[0], &pair[1]);
        let width = hi.fpr - lo.fpr;
        let tpr_hi = 1.0 - hi.fnr;
        let tpr_lo = 1.0 - lo.fnr;
        area += width * (tpr_hi + tpr_lo) / 2.0;
    }
    area
}

/// False negative rate at a target false positive rate, linearly
/// interpolated along the ROC's lower envelope.
pub fn fnr_at_fpr(points: &[RocPoint], target_fpr: f64) -> f64 {
    // Lower envelope: best (smallest) FNR available at each distinct FPR.
    let mut env: Vec<(f64, f64)> = Vec::new();
    let mut sorted: Vec<(f64, f64)> = points.iter().map(|p| (p.fpr, p.fnr)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    for (fpr, fnr) in sorted {
        match env.last() {
            Some(&(last_fpr, _)) if last_fpr == fpr => {}
            _ => env.push((fpr, fnr)),
        }
    }
    if env.is_empty() {
        return 1.0;
    }
    if target_fpr <= env[0].0 {
        return env[0].1;
    }
    for pair in env.windows(2) {
        let ((f0, n0), (f1, n1)) = (pair[0], pair[1]);
        if target_fpr <= f1 {
            let t = (target_fpr - f0) / (f1 - f0);
            return n0 + t * (n1 - n0);
        }
    }
    env.last().unwrap().1
}

/// Mean absolute horizontal distance between two lane polynomials over
/// their shared rows; `None` when the extents do not overlap.
pub fn mean_abs_dx(a: &PolyLane, b: &PolyLane) -> Option<f64> {
    let lo = a.row_min.max(b.row_min);
    let hi = a.row_max.min(b.row_max);
    if hi < lo {
        return None;
    }
    let mut acc = 0.0;
    for y in lo..=hi {
        acc += (a.eval(y as f64) - b.eval(y as f64)).abs();
    }
    Some(acc / (hi - lo + 1) as f64)
}

/// Lanes closer than this (mean |dx| in pixels) to a reference polynomial
/// are treated as that lane.
pub const MATCH_TOL_PX: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MatchKind {
    Target,
    Real,
    Unmatched,
}

fn classify(poly: &PolyLane, target: &PolyLane, gt: &[PolyLane]) -> MatchKind {
    let to_target = mean_abs_dx(poly, target);
    let to_real = gt
        .iter()
        .filter_map(|g| mean_abs_dx(poly, g))
        .fold(f64::INFINITY, f64::min);
    match to_target {
        Some(d) if d < MATCH_TOL_PX && d <= to_real => MatchKind::Target,
        _ if to_real < MATCH_TOL_PX => MatchKind::Real,
        _ => MatchKind::Unmatched,
    }
}

/// Whether a detected lane realizes the planted target: within
/// [`MATCH_TOL_PX`] of the target curve and no closer to any real lane.
pub fn matches_target(poly: &PolyLane, target: &PolyLane, gt: &[PolyLane]) -> bool {
    classify(poly, target, gt) == MatchKind::Target
}

/// Everything evaluation needs for one attacked scene: the attack record,
/// per-lane fake probabilities (possibly re-scored by a different
/// verifier), and the clean scene's ground-truth lane polynomials.
pub struct SceneEvalInput<'a> {
    pub record: &'a AttackRecord,
    pub scores: &'a [f64],
    pub gt_polys: &'a [PolyLane],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseReport {
    pub tau: f64,
    /// Records evaluated.
    pub n_scenes: usize,
    /// Scenes where the detector reported a lane matching the planted
    /// target; only these count toward the false negative rate.
    pub n_attacked: usize,
    /// Attacked scenes where a target-matching lane passed the defense.
    pub false_negatives: usize,
    pub fnr: f64,
    /// Real lanes observed on attacked scenes and how many the defense
    /// wrongly rejected.
    pub real_lanes: usize,
    pub real_rejected: usize,
    pub real_reject_rate: f64,
    pub unmatched_lanes: usize,
    /// Mean IoU between the union of defense-surviving lanes and the
    /// target lane mask, over attacked scenes.
    pub fn_avg_iou: f64,
    /// Mean detector-vs-target IoU straight from the records.
    pub mean_iou_vs_target: f64,
}

/// Scores every observed lane against `tau` (accept iff score <= tau) and
/// aggregates defense quality over the attacked scenes. Pass
/// `tau = f64::INFINITY` for the unprotected baseline.
pub fn evaluate_defense(
    inputs: &[SceneEvalInput<'_>],
    tau: f64,
    cfg: &SceneConfig,
) -> DefenseReport {
    let mut n_attacked = 0usize;
    let mut false_negatives = 0usize;
    let mut real_lanes = 0usize;
    let mut real_rejected = 0usize;
    let mut unmatched_lanes = 0usize;
    let mut iou_sum = 0.0;
    let mut record_iou_sum = 0.0;

    for input in inputs {
        let rec = input.record;
        assert_eq!(
            rec.lanes.len(),
            input.scores.len(),
            "scores must align with observed lanes"
        );
        record_iou_sum += rec.iou_vs_target;
        let target = rec.target.to_poly();

        let mut scene_attacked = false;
        let mut scene_fn = false;
        let mut survivors: Vec<&crate::attack::LaneObservation> = Vec::new();
        for (lane, &score) in rec.lanes.iter().zip(input.scores) {
            let kind = classify(&lane.to_poly(), &target, input.gt_polys);
            let accepted = score <= tau;
            match kind {
                MatchKind::Target => {
                    scene_attacked = true;
                    if accepted {
                        scene_fn = true;
                    }
                }
                MatchKind::Real => {
                    real_lanes += 1;
                    if !accepted {
                        real_rejected += 1;
                    }
                }
                MatchKind::Unmatched => unmatched_lanes += 1,
            }
            if accepted {
                survivors.push(lane);
            }
        }
        if scene_attacked {
            n_attacked += 1;
            if scene_fn {
                false_negatives += 1;
            }
            let target_mask = render_lane_mask(&target, cfg);
            let mut union = BitMap::zeros(cfg.height, cfg.width);
            for lane in survivors {
                union.union_with(&render_lane_mask(&lane.to_poly(), cfg));
            }
            iou_sum += iou_bitmaps(&union, &target_mask);
        }
    }

    DefenseReport {
        tau,
        n_scenes: inputs.len(),
        n_attacked,
        false_negatives,
        fnr: if n_attacked == 0 {
            0.0
        } else {
            false_negatives as f64 / n_attacked as f64
        },
        real_lanes,
        real_rejected,
        real_reject_rate: if real_lanes == 0 {
            0.0
        } else {
            real_rejected as f64 / real_lanes as f64
        },
        unmatched_lanes,
        fn_avg_iou: if n_attacked == 0 {
            0.0
        } else {
            iou_sum / n_attacked as f64
        },
        mean_iou_vs_target: if inputs.is_empty() {
            0.0
        } else {
            record_iou_sum / inputs.len() as f64
        },
    }
}
