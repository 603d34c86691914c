//! The runtime defense: detect lanes, stabilize each one, score it with the
//! verifier, and reject lanes whose fake probability exceeds the calibrated
//! threshold.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::geometry::{fit_polynomial, stabilize_lane, Lane, PolyLane, StabilizationConfig};
use crate::img::{Plane, SceneImage};
use crate::neural::{ToyDetector, VerifierNet};

/// Anything that proposes lane centerlines for a scene.
pub trait LaneDetector {
    fn detect_lanes(&self, img: &SceneImage) -> Vec<Lane>;
}

impl LaneDetector for ToyDetector {
    fn detect_lanes(&self, img: &SceneImage) -> Vec<Lane> {
        self.detect(img).map(|(_, lanes)| lanes).unwrap_or_default()
    }
}

/// Replays fixed lanes regardless of the image. Lets tests and calibration
/// drive the verification stage with known inputs.
#[derive(Debug, Clone)]
pub struct GroundTruthDetector {
    pub lanes: Vec<Lane>,
}

impl LaneDetector for GroundTruthDetector {
    fn detect_lanes(&self, _img: &SceneImage) -> Vec<Lane> {
        self.lanes.clone()
    }
}

/// Score given to lanes that cannot be stabilized (degenerate fit or empty
/// extent). The maximum fake probability, so such lanes are always
/// rejected at any threshold below 1.
pub const FAIL_SAFE_SCORE: f64 = 1.0;

#[derive(Debug, Clone)]
pub struct VerifiedLane {
    pub lane: Lane,
    pub poly: Option<PolyLane>,
    pub stabilized: Option<Plane>,
    pub score: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone)]
pub struct SceneVerdict {
    pub lanes: Vec<VerifiedLane>,
    pub rejected: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Polynomial degree fitted to detected centerlines.
    pub fit_degree: usize,
    /// Accept a lane iff its fake probability is <= tau.
    pub tau: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            fit_degree: 3,
            tau: 0.5,
        }
    }
}

/// Runs the full defense on one scene.
///
/// Lanes whose polynomial fit or stabilization fails get the fail-safe
/// score and are rejected rather than silently passed.
pub fn verify_scene<D: LaneDetector, V: VerifierNet>(
    detector: &D,
    verifier: &V,
    img: &SceneImage,
    stab_cfg: &StabilizationConfig,
    cfg: &PipelineConfig,
) -> SceneVerdict {
    let mut out = Vec::new();
    let mut rejected = 0;
    for lane in detector.detect_lanes(img) {
        let fitted = fit_polynomial(&lane, cfg.fit_degree)
            .ok()
            .and_then(|poly| {
                stabilize_lane(img, &poly, stab_cfg)
                    .ok()
                    .map(|stab| (poly, stab))
            });
        let (poly, stabilized, score) = match fitted {
            Some((poly, stab)) => {
                let score = verifier
                    .score_plane(&stab.image)
                    .unwrap_or(FAIL_SAFE_SCORE);
                (Some(poly), Some(stab.image), score)
            }
            None => (None, None, FAIL_SAFE_SCORE),
        };
        let accepted = score <= cfg.tau;
        if !accepted {
            rejected += 1;
        }
        out.push(VerifiedLane {
            lane,
            poly,
            stabilized,
            score,
            accepted,
        });
    }
    SceneVerdict {
        lanes: out,
        rejected,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub runs: usize,
    pub scenes: usize,
    /// Median wall time of detection alone over all scenes, in ms.
    pub detect_ms: f64,
    /// Median wall time of the defended pipeline over all scenes, in ms.
    pub defended_ms: f64,
    /// (defended - detect) / detect.
    pub overhead: f64,
    /// Lanes verified per defended pass.
    pub lanes: usize,
    /// Median per-lane cost of the verification stage (fit + stabilize +
    /// score), in ms.
    pub verify_ms_per_lane: f64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Times detection alone against the defended pipeline over the same
/// scenes, reporting medians across `runs` repetitions.
pub fn bench_overhead<V: VerifierNet>(
    detector: &ToyDetector,
    verifier: &V,
    scenes: &[SceneImage],
    stab_cfg: &StabilizationConfig,
    cfg: &PipelineConfig,
    runs: usize,
) -> BenchReport {
    let mut detect_times = Vec::with_capacity(runs);
    let mut defended_times = Vec::with_capacity(runs);
    let mut per_lane_times = Vec::with_capacity(runs);
    let mut lanes = 0usize;
    for _ in 0..runs.max(1) {
        let t0 = Instant::now();
        for img in scenes {
            let found = detector.detect_lanes(img);
            std::hint::black_box(&found);
        }
        detect_times.push(t0.elapsed().as_secs_f64() * 1e3);

        let t1 = Instant::now();
        lanes = 0;
        for img in scenes {
            let verdict = verify_scene(detector, verifier, img, stab_cfg, cfg);
            lanes += verdict.lanes.len();
            std::hint::black_box(&verdict);
        }
        let defended = t1.elapsed().as_secs_f64() * 1e3;
        defended_times.push(defended);
        let detect = *detect_times.last().expect("pushed above");
        if lanes > 0 {
            per_lane_times.push((defended - detect).max(0.0) / lanes as f64);
        }
    }
    let detect_ms = median(detect_times);
    let defended_ms = median(defended_times);
    BenchReport {
        runs: runs.max(1),
        scenes: scenes.len(),
        detect_ms,
        defended_ms,
        overhead: if detect_ms > 0.0 {
            (defended_ms - detect_ms) / detect_ms
        } else {
            0.0
        },
        lanes,
        verify_ms_per_lane: median(per_lane_times),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::LaneLabel;
    use crate::neural::LinearVerifier;

    fn straight_lane(x: f64) -> Lane {
        Lane::new((40..=119).map(|y| (y, x)).collect(), LaneLabel::Real).unwrap()
    }

    #[test]
    fn accept_iff_score_at_most_tau() {
        let img = SceneImage::zeros(120, 192);
        let stab_cfg = StabilizationConfig::default();
        // Zero weights, bias b: score = sigmoid(b) regardless of input.
        let mut v = LinearVerifier::seeded(stab_cfg.out_height, stab_cfg.out_width, 1);
        for t in v.trainable_mut() {
            for val in t.data_mut() {
                *val = 0.0;
            }
        }
        let det = GroundTruthDetector {
            lanes: vec![straight_lane(60.0)],
        };
        let cfg = PipelineConfig {
            fit_degree: 3,
            tau: 0.5,
        };
        let verdict = verify_scene(&det, &v, &img, &stab_cfg, &cfg);
        assert_eq!(verdict.lanes.len(), 1);
        assert!(verdict.lanes[0].accepted, "score 0.5 <= tau 0.5");

        let tight = PipelineConfig {
            fit_degree: 3,
            tau: 0.4999,
        };
        let verdict = verify_scene(&det, &v, &img, &stab_cfg, &tight);
        assert!(!verdict.lanes[0].accepted);
        assert_eq!(verdict.rejected, 1);
    }

    #[test]
    fn degenerate_lane_is_fail_safe_rejected() {
        let img = SceneImage::zeros(120, 192);
        let stab_cfg = StabilizationConfig::default();
        let v = LinearVerifier::seeded(stab_cfg.out_height, stab_cfg.out_width, 1);
        // Two samples cannot support a cubic fit.
        let short = Lane::new(vec![(50, 10.0), (51, 11.0)], LaneLabel::Real).unwrap();
        let det = GroundTruthDetector { lanes: vec![short] };
        let verdict = verify_scene(&det, &v, &img, &stab_cfg, &PipelineConfig::default());
        assert_eq!(verdict.lanes[0].score, FAIL_SAFE_SCORE);
        assert!(!verdict.lanes[0].accepted);
        assert!(verdict.lanes[0].poly.is_none());
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
