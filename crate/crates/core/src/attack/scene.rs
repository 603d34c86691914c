//! Scene-level attacks: steering the detector toward a target lane under a
//! norm bound or inside a patch, and the verifier-aware second stage.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::pgd::{pgd, plateaued, Feasible};
use super::{AttackConfig, AttackError};
use crate::geometry::{stabilize_lane, write_back, PolyLane, StabilizationConfig};
use crate::img::{BitMap, Plane, SceneImage};
use crate::neural::{
    bce_with_logits_mean, scene_to_tensor, tensor_to_scene, Mode, Tensor, ToyDetector,
    VerifierNet,
};
use crate::scene::{Scene, SceneConfig};

/// Scene pixels flattened in [channel][row][col] order.
pub fn scene_flat(img: &SceneImage) -> Vec<f64> {
    scene_to_tensor(img).into_vec()
}

pub fn scene_from_flat(h: usize, w: usize, flat: Vec<f64>) -> SceneImage {
    let t = Tensor::from_vec(&[1, 3, h, w], flat).expect("flat scene length");
    tensor_to_scene(&t)
}

/// Midline of the widest gap between adjacent ground-truth lanes. This is
/// where a planted lane hurts most: far from every real marking, yet
/// plausibly placed.
pub fn choose_gap_target(scene: &Scene) -> Result<PolyLane, AttackError> {
    if scene.lane_polys.len() < 2 {
        return Err(AttackError::NoGap);
    }
    let bottom = scene
        .lane_polys
        .iter()
        .map(|p| p.eval(p.row_max as f64))
        .collect::<Vec<_>>();
    let mut widest = 0usize;
    let mut widest_gap = f64::NEG_INFINITY;
    for i in 0..bottom.len() - 1 {
        let gap = bottom[i + 1] - bottom[i];
        if gap > widest_gap {
            widest_gap = gap;
            widest = i;
        }
    }
    let (a, b) = (&scene.lane_polys[widest], &scene.lane_polys[widest + 1]);
    let mut coeffs = vec![0.0; a.coeffs.len().max(b.coeffs.len())];
    for (i, c) in coeffs.iter_mut().enumerate() {
        let ca = a.coeffs.get(i).copied().unwrap_or(0.0);
        let cb = b.coeffs.get(i).copied().unwrap_or(0.0);
        *c = 0.5 * (ca + cb);
    }
    Ok(PolyLane::new(
        coeffs,
        a.row_min.max(b.row_min),
        a.row_max.min(b.row_max),
    ))
}

/// How the patch side length is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchSizing {
    /// Constant side in pixels.
    Fixed,
    /// Side shrinks with distance: base_side scaled by the placement row's
    /// relative depth, floored at 4 px.
    Scaled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchPlacement {
    pub row: i32,
    pub side: usize,
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
}

impl PatchPlacement {
    pub fn mask(&self, scene_h: usize, scene_w: usize) -> BitMap {
        let mut m = BitMap::zeros(scene_h, scene_w);
        for y in self.y0..(self.y0 + self.h).min(scene_h) {
            for x in self.x0..(self.x0 + self.w).min(scene_w) {
                m.set(y, x, true);
            }
        }
        m
    }
}

pub const PATCH_BASE_SIDE: usize = 100;
pub const PATCH_MIN_SIDE: usize = 4;

/// Sizes and positions a patch on the target lane. The placement row is
/// uniform over the lower two thirds of the target's extent; the patch is
/// centered on the target there and clipped to the frame.
pub fn place_patch(
    cfg: &SceneConfig,
    target: &PolyLane,
    sizing: PatchSizing,
    rng: &mut ChaCha8Rng,
) -> Result<PatchPlacement, AttackError> {
    let r0 = target.row_min.max(cfg.vanishing_row);
    let r1 = target.row_max.min(cfg.bottom_row());
    if r1 <= r0 {
        return Err(AttackError::PatchOutOfFrame { row: r0 });
    }
    let lo = r0 + (r1 - r0) / 3;
    let row = rng.gen_range(lo..=r1);

    let side = match sizing {
        PatchSizing::Fixed => PATCH_BASE_SIDE,
        PatchSizing::Scaled => {
            let depth = (row - cfg.vanishing_row) as f64
                / (cfg.bottom_row() - cfg.vanishing_row) as f64;
            ((PATCH_BASE_SIDE as f64 * depth).round() as usize).max(PATCH_MIN_SIDE)
        }
    };

    let cy = row as i64;
    let cx = target.eval(row as f64).round() as i64;
    let half = side as i64 / 2;
    let y0 = (cy - half).max(0);
    let y1 = (cy - half + side as i64).min(cfg.height as i64);
    let x0 = (cx - half).max(0);
    let x1 = (cx - half + side as i64).min(cfg.width as i64);
    if y1 <= y0 || x1 <= x0 {
        return Err(AttackError::PatchOutOfFrame { row });
    }
    Ok(PatchPlacement {
        row,
        side,
        y0: y0 as usize,
        x0: x0 as usize,
        h: (y1 - y0) as usize,
        w: (x1 - x0) as usize,
    })
}

/// Replicates a pixel mask across the three channels of the flat layout.
pub fn channel_mask(mask: &BitMap) -> Vec<bool> {
    let plane: Vec<bool> = mask.as_slice().to_vec();
    let mut out = Vec::with_capacity(plane.len() * 3);
    for _ in 0..3 {
        out.extend_from_slice(&plane);
    }
    out
}

#[derive(Debug, Clone)]
pub struct SceneAttackOutcome {
    pub adv: SceneImage,
    pub iterations: usize,
    pub final_loss: f64,
    pub converged: bool,
}

/// Stage one: drive the detector's segmentation toward `target_seg` with
/// PGD over the feasible set. The target segmentation contains only the
/// planted lane, so real markings are attacked toward background.
pub fn attack_scene_seg(
    det: &ToyDetector,
    scene_img: &SceneImage,
    target_seg: &BitMap,
    feasible: &Feasible,
    cfg: &AttackConfig,
    rng: &mut ChaCha8Rng,
    warm_start: Option<&SceneImage>,
) -> Result<SceneAttackOutcome, AttackError> {
    let (h, w) = (scene_img.h(), scene_img.w());
    let targets: Vec<f64> = target_seg
        .as_slice()
        .iter()
        .map(|&b| if b { 1.0 } else { 0.0 })
        .collect();

    let objective = |x: &[f64], grad: &mut [f64]| -> f64 {
        let xt = Tensor::from_vec(&[1, 3, h, w], x.to_vec()).expect("flat scene length");
        let (logits, cache) = det.forward(&xt).expect("detector forward");
        let (loss, glogits) = bce_with_logits_mean(logits.data(), &targets);
        let g = Tensor::from_vec(logits.shape(), glogits).expect("logit shape");
        let dx = det.backward_input(&cache, &g).expect("detector backward");
        grad.copy_from_slice(dx.data());
        loss
    };

    let start_flat = warm_start.map(scene_flat);
    let result = pgd(objective, feasible, cfg, rng, start_flat.as_deref())?;
    Ok(SceneAttackOutcome {
        adv: scene_from_flat(h, w, result.x),
        iterations: result.iterations,
        final_loss: result.loss,
        converged: result.converged,
    })
}

/// Detector-forward budget for the `keep` predicate per stage-two call, so
/// the detection check cannot dominate the attack's runtime.
pub const MAX_KEEP_CHECKS: usize = 8;

/// Stage two: lower the verifier's fake score for the planted lane.
///
/// Each iteration stabilizes the current scene along the target, takes one
/// sign step against the verifier logit in the stabilized frame, maps the
/// step back through the warp, and re-projects onto the feasible set. The
/// perturbation starts at zero relative to `scene_img`.
///
/// Lowering the fake score unconstrained tends to simply erase the planted
/// evidence, which defeats the attack's own purpose. When `keep` is given,
/// only iterates it approves (typically: the detector still reports the
/// planted lane) are eligible as the returned best; the predicate is
/// consulted at most [`MAX_KEEP_CHECKS`] times, on logit improvements. When
/// no iterate qualifies the input scene is returned unchanged with an
/// infinite loss.
pub fn stage2_verifier_attack<V: VerifierNet>(
    verifier: &V,
    scene_img: &SceneImage,
    target: &PolyLane,
    stab_cfg: &StabilizationConfig,
    feasible: &Feasible,
    region_mask: Option<&BitMap>,
    cfg: &AttackConfig,
    keep: Option<&dyn Fn(&SceneImage) -> bool>,
) -> Result<SceneAttackOutcome, AttackError> {
    cfg.validate()?;
    let (h, w) = (scene_img.h(), scene_img.w());
    let mut x = scene_img.clone();
    let mut best = x.clone();
    let mut best_logit = f64::INFINITY;
    // Running minimum of the raw trajectory, for plateau detection; equals
    // best_logit when there is no keep predicate.
    let mut min_logit = f64::INFINITY;
    let mut checks = 0usize;
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut converged = false;

    for iter in 0..cfg.max_iters {
        let stab = stabilize_lane(&x, target, stab_cfg)?;
        let xt = Tensor::from_vec(
            &[1, 1, stab.image.h(), stab.image.w()],
            stab.image.as_slice().to_vec(),
        )
        .expect("stabilized shape");
        let (logits, cache) = verifier.forward(&xt, Mode::Eval)?;
        let logit = logits[0];
        iterations = iter + 1;
        if !logit.is_finite() {
            return Err(AttackError::NonFiniteGradient(iter));
        }
        min_logit = min_logit.min(logit);
        if logit < best_logit {
            match keep {
                None => {
                    best_logit = logit;
                    best = x.clone();
                }
                Some(pred) if checks < MAX_KEEP_CHECKS => {
                    checks += 1;
                    if pred(&x) {
                        best_logit = logit;
                        best = x.clone();
                    }
                }
                Some(_) => {}
            }
        }
        history.push(min_logit);
        if plateaued(&history, cfg.conv_window, cfg.conv_tol) {
            converged = true;
            break;
        }

        let (_, dimg) = verifier.backward(&cache, &[1.0]);
        if dimg.data().iter().any(|g| !g.is_finite()) {
            return Err(AttackError::NonFiniteGradient(iter));
        }
        let mut delta = Plane::from_vec(stab.image.h(), stab.image.w(), dimg.into_vec())
            .expect("gradient shape");
        delta.map_inplace(|g| {
            if g > 0.0 {
                -cfg.step
            } else if g < 0.0 {
                cfg.step
            } else {
                0.0
            }
        });
        let scene_delta = write_back(&delta, &stab, h, w, region_mask)?;
        x.add_to_all_channels(&scene_delta).expect("delta shape");
        let mut flat = scene_flat(&x);
        feasible.project(&mut flat);
        x = scene_from_flat(h, w, flat);
    }

    Ok(SceneAttackOutcome {
        adv: best,
        iterations,
        final_loss: best_logit,
        converged,
    })
}

#[derive(Debug, Clone)]
pub struct AdaptiveOutcome {
    pub adv: SceneImage,
    pub stage1_iterations: usize,
    pub stage2_iterations: usize,
    pub final_seg_loss: f64,
    pub final_logit: f64,
}

/// Alternates the segmentation attack and the verifier attack for `cycles`
/// rounds. The first stage-one call starts randomly (identical to the
/// non-adaptive attack under the same rng); later cycles warm-start from
/// the current adversarial scene. The returned scene is the best verifier
/// evasion across all cycles that `keep` approved, falling back to the
/// last cycle's detector-stage result when stage two never found one.
#[allow(clippy::too_many_arguments)]
pub fn attack_adaptive<V: VerifierNet>(
    det: &ToyDetector,
    verifier: &V,
    scene_img: &SceneImage,
    target: &PolyLane,
    target_seg: &BitMap,
    stab_cfg: &StabilizationConfig,
    feasible: &Feasible,
    region_mask: Option<&BitMap>,
    stage1_cfg: &AttackConfig,
    stage2_cfg: &AttackConfig,
    cycles: usize,
    rng: &mut ChaCha8Rng,
    keep: Option<&dyn Fn(&SceneImage) -> bool>,
) -> Result<AdaptiveOutcome, AttackError> {
    if cycles == 0 {
        return Err(AttackError::BadConfig("cycles must be >= 1".into()));
    }
    let mut current: Option<SceneImage> = None;
    let mut best: Option<(f64, SceneImage)> = None;
    let mut s1_iters = 0;
    let mut s2_iters = 0;
    let mut seg_loss = f64::NAN;
    let mut logit = f64::NAN;
    for _ in 0..cycles {
        let s1 = attack_scene_seg(
            det,
            scene_img,
            target_seg,
            feasible,
            stage1_cfg,
            rng,
            current.as_ref(),
        )?;
        s1_iters += s1.iterations;
        seg_loss = s1.final_loss;
        let s2 = stage2_verifier_attack(
            verifier,
            &s1.adv,
            target,
            stab_cfg,
            feasible,
            region_mask,
            stage2_cfg,
            keep,
        )?;
        s2_iters += s2.iterations;
        logit = s2.final_loss;
        // On ties (all-rejected cycles surface as infinite losses) prefer
        // the later cycle, whose warm-started detector stage has had the
        // most total iterations.
        if best.as_ref().map_or(true, |(l, _)| s2.final_loss <= *l) {
            best = Some((s2.final_loss, s2.adv.clone()));
        }
        current = Some(s2.adv);
    }
    Ok(AdaptiveOutcome {
        adv: best.expect("cycles >= 1").1,
        stage1_iterations: s1_iters,
        stage2_iterations: s2_iters,
        final_seg_loss: seg_loss,
        final_logit: logit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::generate_scene;
    use rand::SeedableRng;

    fn small_cfg() -> SceneConfig {
        // Two lanes with 72..100 px gaps fit a 192 px frame with margins;
        // more would push anchors off-frame.
        SceneConfig {
            width: 192,
            height: 120,
            lanes_min: 2,
            lanes_max: 2,
            vanishing_row: 40,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn gap_target_sits_between_lanes() {
        let cfg = small_cfg();
        let scene = generate_scene(&cfg, 5).unwrap();
        let target = choose_gap_target(&scene).unwrap();
        let bottoms: Vec<f64> = scene
            .lane_polys
            .iter()
            .map(|p| p.eval(p.row_max as f64))
            .collect();
        let tx = target.eval(target.row_max as f64);
        assert!(tx > bottoms[0] - 1.0 && tx < *bottoms.last().unwrap() + 1.0);
        // The midline keeps a healthy distance from every real lane at the
        // bottom row.
        let min_dist = bottoms
            .iter()
            .map(|b| (b - tx).abs())
            .fold(f64::INFINITY, f64::min);
        assert!(min_dist > 20.0, "distance {min_dist}");
    }

    #[test]
    fn scaled_patch_side_follows_depth() {
        let cfg = small_cfg();
        let target = PolyLane::new(vec![96.0], cfg.vanishing_row, cfg.bottom_row());
        let mut seen_small = usize::MAX;
        let mut seen_large = 0usize;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = place_patch(&cfg, &target, PatchSizing::Scaled, &mut rng).unwrap();
            let depth = (p.row - cfg.vanishing_row) as f64
                / (cfg.bottom_row() - cfg.vanishing_row) as f64;
            assert_eq!(
                p.side,
                ((100.0 * depth).round() as usize).max(4),
                "row {}",
                p.row
            );
            seen_small = seen_small.min(p.side);
            seen_large = seen_large.max(p.side);
        }
        assert!(seen_large > seen_small);
    }

    #[test]
    fn fixed_patch_clips_to_frame() {
        let cfg = small_cfg();
        // Target hugging the right edge forces horizontal clipping.
        let target = PolyLane::new(vec![190.0], cfg.vanishing_row, cfg.bottom_row());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = place_patch(&cfg, &target, PatchSizing::Fixed, &mut rng).unwrap();
        assert_eq!(p.side, 100);
        assert!(p.x0 + p.w <= cfg.width);
        assert!(p.y0 + p.h <= cfg.height);
        assert!(p.w < 100, "expected horizontal clipping, got w {}", p.w);
    }

    #[test]
    fn patch_fully_outside_errors() {
        let cfg = small_cfg();
        let target = PolyLane::new(vec![-400.0], cfg.vanishing_row, cfg.bottom_row());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(matches!(
            place_patch(&cfg, &target, PatchSizing::Scaled, &mut rng),
            Err(AttackError::PatchOutOfFrame { .. })
        ));
    }

    #[test]
    fn stage2_keep_predicate_pins_the_best_to_approved_iterates() {
        use crate::neural::LinearVerifier;
        let cfg = small_cfg();
        let scene = generate_scene(&cfg, 9).unwrap();
        let target = choose_gap_target(&scene).unwrap();
        let stab_cfg = StabilizationConfig::default();
        // All-positive weights: the logit is a pixel sum, so the attack
        // monotonically darkens the lane band to lower it.
        let mut v = LinearVerifier::seeded(stab_cfg.out_height, stab_cfg.out_width, 1);
        for t in v.trainable_mut() {
            for val in t.data_mut() {
                *val = 1.0;
            }
        }
        let feasible = Feasible::Ball {
            center: scene_flat(&scene.image),
            eps: 0.2,
        };
        let atk = AttackConfig {
            step: 0.05,
            max_iters: 12,
            ..AttackConfig::default()
        };
        let original = scene.image.channel(0).as_slice().to_vec();
        // Approve only untouched images: any darkening trips the sum check.
        let keep = |img: &SceneImage| -> bool {
            let now: f64 = img.channel(0).as_slice().iter().sum();
            now >= original.iter().sum::<f64>() - 1e-9
        };
        let out = stage2_verifier_attack(
            &v,
            &scene.image,
            &target,
            &stab_cfg,
            &feasible,
            None,
            &atk,
            Some(&keep),
        )
        .unwrap();
        // Only the starting iterate passes, so it must be returned even
        // though later iterates score lower.
        for c in 0..3 {
            assert_eq!(
                out.adv.channel(c).as_slice(),
                scene.image.channel(c).as_slice()
            );
        }
        assert!(out.final_loss.is_finite());

        let unconstrained = stage2_verifier_attack(
            &v,
            &scene.image,
            &target,
            &stab_cfg,
            &feasible,
            None,
            &atk,
            None,
        )
        .unwrap();
        assert!(
            unconstrained.final_loss < out.final_loss,
            "without the predicate the attack should find a lower logit"
        );
        assert_ne!(
            unconstrained.adv.channel(0).as_slice(),
            scene.image.channel(0).as_slice(),
            "unconstrained attack should actually move pixels"
        );
    }

    #[test]
    fn stage2_with_zero_verifier_returns_input_bits() {
        use crate::neural::LinearVerifier;
        let cfg = small_cfg();
        let scene = generate_scene(&cfg, 9).unwrap();
        let target = choose_gap_target(&scene).unwrap();
        let stab_cfg = StabilizationConfig::default();
        let mut v = LinearVerifier::seeded(stab_cfg.out_height, stab_cfg.out_width, 1);
        for t in v.trainable_mut() {
            for val in t.data_mut() {
                *val = 0.0;
            }
        }
        let feasible = Feasible::Ball {
            center: scene_flat(&scene.image),
            eps: 8.0 / 255.0,
        };
        let out = stage2_verifier_attack(
            &v,
            &scene.image,
            &target,
            &stab_cfg,
            &feasible,
            None,
            &AttackConfig::default(),
            None,
        )
        .unwrap();
        assert!(out.converged);
        assert_eq!(out.iterations, 11);
        for c in 0..3 {
            assert_eq!(
                out.adv.channel(c).as_slice(),
                scene.image.channel(c).as_slice()
            );
        }
    }
}
