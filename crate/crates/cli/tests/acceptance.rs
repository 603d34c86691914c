//! Release gates for the toolkit, printed one per line:
//!
//! ```text
//! ACCEPTANCE <n> <label>: PASS|FAIL (<detail>)
//! ```
//!
//! Run `cargo test --test acceptance -- --nocapture` to watch the lines
//! stream. Gates 1-4 are fast oracle suites with pinned runtime budgets;
//! gates 5-7 come from one full experiment at the default configuration;
//! gate 8 reruns a small experiment twice and compares artifacts byte for
//! byte. The test fails if any gate fails, but always prints all lines.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use lane_sentinel::attack::{
    attack_adaptive, attack_scene_seg, choose_gap_target, pgd, place_patch, scene_flat,
    AttackConfig, Feasible, PatchSizing,
};
use lane_sentinel::geometry::{
    curve_tangent_normal, fit_polynomial, stabilize_lane, write_back, Lane, LaneLabel, PolyLane,
    StabilizationConfig,
};
use lane_sentinel::img::{BitMap, Plane, SceneImage};
use lane_sentinel::metrics::{auc, calibrate_threshold, iou_bitmaps, rejection_rate};
use lane_sentinel::neural::{
    focal_loss, BatchNorm2d, Conv2d, FocalParams, Linear, LinearVerifier, Mode, Tensor,
    ToyDetector,
};
use lane_sentinel::scene::{generate_scene, render_lane_mask, SceneConfig};
use lane_sentinel_cli::config::ExperimentConfig;
use lane_sentinel_cli::experiment::{run_experiment, ExperimentOptions, ExperimentSummary};
use lane_sentinel_cli::jobs::build_pool;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

// Tolerances and budgets, pinned here so a gate cannot drift silently.
const GEOMETRY_BUDGET: Duration = Duration::from_secs(10);
const GRADIENT_BUDGET: Duration = Duration::from_secs(60);
const ATTACK_BUDGET: Duration = Duration::from_secs(60);
const METRICS_BUDGET: Duration = Duration::from_secs(10);
const FD_H: f64 = 1e-3;
const FD_REL_TOL: f64 = 1e-3;
const VERTICAL_CROP_TOL: f64 = 1e-6;
const PGD_OPT_TOL: f64 = 1e-6;
const AUC_TOL: f64 = 1e-9;
const TEST_FPR_MAX: f64 = 0.08;
const BOUNDED_FNR_MAX: f64 = 0.10;
const ADAPTIVE_FNR_MAX: f64 = 0.25;
const PATCH_FNR_MAX: f64 = 0.10;
const RESIDUAL_IOU_FRAC: f64 = 0.20;
const LINEAR_FNR_FACTOR: f64 = 2.0;
const CYCLES_FNR_TOL: f64 = 0.05;
const OVERHEAD_MAX: f64 = 0.15;

struct Gates {
    failures: Vec<String>,
}

impl Gates {
    fn new() -> Self {
        Gates {
            failures: Vec::new(),
        }
    }

    fn run(&mut self, n: usize, label: &str, body: impl FnOnce() -> Result<String, String>) {
        match catch_unwind(AssertUnwindSafe(body)) {
            Ok(Ok(detail)) => println!("ACCEPTANCE {n} {label}: PASS ({detail})"),
            Ok(Err(detail)) => {
                println!("ACCEPTANCE {n} {label}: FAIL ({detail})");
                self.failures.push(format!("{n} {label}: {detail}"));
            }
            Err(panic) => {
                let msg = panic
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".into());
                println!("ACCEPTANCE {n} {label}: FAIL (panicked: {msg})");
                self.failures.push(format!("{n} {label}: panicked: {msg}"));
            }
        }
    }
}

fn budget_check(elapsed: Duration, budget: Duration, detail: String) -> Result<String, String> {
    if elapsed <= budget {
        Ok(format!("{detail}, {:.1}s", elapsed.as_secs_f64()))
    } else {
        Err(format!(
            "{detail}, but took {:.1}s > {:.0}s budget",
            elapsed.as_secs_f64(),
            budget.as_secs_f64()
        ))
    }
}

fn noise_scene(h: usize, w: usize, seed: u64) -> SceneImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = SceneImage::zeros(h, w);
    for c in 0..3 {
        let plane = img.channel_mut(c);
        for y in 0..h {
            for x in 0..w {
                plane.set(y, x, rng.gen_range(0.0..1.0));
            }
        }
    }
    img
}

// ---------------------------------------------------------------- gate 1

fn geometry_gate() -> Result<String, String> {
    let start = Instant::now();

    // Zero perturbation in stabilized space must write back to exactly zero.
    let scene = noise_scene(100, 160, 8);
    let cfg = StabilizationConfig::default();
    let poly = PolyLane::new(vec![70.0, 0.2], 0, 99);
    let stab = stabilize_lane(&scene, &poly, &cfg).map_err(|e| e.to_string())?;
    let zero = Plane::zeros(cfg.out_height, cfg.out_width);
    let out = write_back(&zero, &stab, 100, 160, None).map_err(|e| e.to_string())?;
    if out.max_abs() != 0.0 {
        return Err("zero-delta write-back is not exactly zero".into());
    }

    // A vertical lane's stabilization degenerates to an axis-aligned crop.
    let scene = noise_scene(128, 200, 12);
    let poly = PolyLane::new(vec![100.5], 0, 127);
    let stab = stabilize_lane(&scene, &poly, &cfg).map_err(|e| e.to_string())?;
    for i in 0..cfg.out_height {
        for j in 0..cfg.out_width {
            let direct = scene
                .sample_luminance(i as f64, 81.0 + j as f64)
                .ok_or("crop sample out of image")?;
            let got = stab.image.get(i, j);
            if (got - direct).abs() >= VERTICAL_CROP_TOL {
                return Err(format!("vertical crop mismatch at ({i},{j}): {got} vs {direct}"));
            }
        }
    }

    // Fit oracle: exact polynomial samples are recovered (>= 100 cases).
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let mut fit_cases = 0;
    for _ in 0..120 {
        let degree = rng.gen_range(0..=3usize);
        let coeffs: Vec<f64> = [
            rng.gen_range(-200.0..200.0),
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-0.01..0.01),
            rng.gen_range(-0.0001..0.0001),
        ][..=degree]
            .to_vec();
        let row_min = rng.gen_range(0..100);
        let span = rng.gen_range(20..200);
        let truth = PolyLane::new(coeffs, row_min, row_min + span);
        let samples: Vec<(i32, f64)> = (row_min..=row_min + span)
            .map(|y| (y, truth.eval(y as f64)))
            .collect();
        let lane = Lane::new(samples.clone(), LaneLabel::Real).map_err(|e| e.to_string())?;
        let fitted = fit_polynomial(&lane, degree).map_err(|e| e.to_string())?;
        for (y, x) in samples {
            if (fitted.eval(y as f64) - x).abs() >= 1e-7 {
                return Err(format!("fit case {fit_cases}: row {y} off by >1e-7"));
            }
        }
        fit_cases += 1;
    }

    // Tangent/normal oracle: orthonormal frame, rightward normal (>= 100).
    let mut frame_cases = 0;
    for _ in 0..120 {
        let poly = PolyLane::new(
            vec![
                rng.gen_range(-200.0..200.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-0.05..0.05),
                rng.gen_range(-0.001..0.001),
            ],
            0,
            300,
        );
        let y = rng.gen_range(0.0..300.0);
        let (t, n) = curve_tangent_normal(&poly, y);
        let dot = t.x * n.x + t.y * n.y;
        if dot.abs() >= 1e-12
            || (t.norm() - 1.0).abs() >= 1e-12
            || (n.norm() - 1.0).abs() >= 1e-12
            || !(n.x > 0.0 || (n.x == 0.0 && t.x.abs() < 1e-12))
            || t.y <= 0.0
        {
            return Err(format!("frame case {frame_cases} violates orthonormality"));
        }
        frame_cases += 1;
    }

    budget_check(
        start.elapsed(),
        GEOMETRY_BUDGET,
        format!("round-trip + vertical crop + {fit_cases} fit / {frame_cases} frame cases"),
    )
}

// ---------------------------------------------------------------- gate 2

fn fd_ok(fd: f64, analytic: f64) -> bool {
    let scale = fd.abs().max(analytic.abs());
    if scale < 1e-4 {
        (fd - analytic).abs() < 1e-6
    } else {
        (fd - analytic).abs() / scale < FD_REL_TOL
    }
}

fn rand_tensor<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn proj(out: &Tensor, r: &[f64]) -> f64 {
    out.data().iter().zip(r).map(|(a, b)| a * b).sum()
}

fn conv_cases(stride: usize, padding: usize, rng: &mut ChaCha8Rng) -> Result<usize, String> {
    let (ci, co) = (2, 4);
    let conv = Conv2d::new(ci, co, 3, stride, padding, rng);
    let x = rand_tensor(&[2, ci, 13, 9], rng);
    let out = conv.forward(&x).map_err(|e| e.to_string())?;
    let r: Vec<f64> = (0..out.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let gout = Tensor::from_vec(out.shape(), r.clone()).unwrap();
    let (dw, db, dx) = conv.backward(&x, &gout, true).map_err(|e| e.to_string())?;
    let dx = dx.ok_or("conv dx missing")?;
    let mut cases = 0;
    for _ in 0..55 {
        let wi = rng.gen_range(0..conv.weight.numel());
        let mut cp = conv.clone();
        cp.weight.data_mut()[wi] += FD_H;
        let up = proj(&cp.forward(&x).unwrap(), &r);
        cp.weight.data_mut()[wi] -= 2.0 * FD_H;
        let dn = proj(&cp.forward(&x).unwrap(), &r);
        if !fd_ok((up - dn) / (2.0 * FD_H), dw.data()[wi]) {
            return Err(format!("conv s{stride}p{padding} dw[{wi}]"));
        }
        let bi = rng.gen_range(0..co);
        let mut cp = conv.clone();
        cp.bias.data_mut()[bi] += FD_H;
        let up = proj(&cp.forward(&x).unwrap(), &r);
        cp.bias.data_mut()[bi] -= 2.0 * FD_H;
        let dn = proj(&cp.forward(&x).unwrap(), &r);
        if !fd_ok((up - dn) / (2.0 * FD_H), db.data()[bi]) {
            return Err(format!("conv s{stride}p{padding} db[{bi}]"));
        }
        let xi = rng.gen_range(0..x.numel());
        let mut xp = x.clone();
        xp.data_mut()[xi] += FD_H;
        let up = proj(&conv.forward(&xp).unwrap(), &r);
        xp.data_mut()[xi] -= 2.0 * FD_H;
        let dn = proj(&conv.forward(&xp).unwrap(), &r);
        if !fd_ok((up - dn) / (2.0 * FD_H), dx.data()[xi]) {
            return Err(format!("conv s{stride}p{padding} dx[{xi}]"));
        }
        cases += 1;
    }
    Ok(cases)
}

fn batchnorm_cases(rng: &mut ChaCha8Rng) -> Result<usize, String> {
    let mut bn = BatchNorm2d::new(3);
    for (i, g) in bn.gamma.data_mut().iter_mut().enumerate() {
        *g = 0.5 + 0.3 * i as f64;
    }
    for (i, b) in bn.beta.data_mut().iter_mut().enumerate() {
        *b = -0.2 + 0.1 * i as f64;
    }
    let x = rand_tensor(&[4, 3, 6, 5], rng);
    let (out, cache) = bn.forward(&x, Mode::Train).map_err(|e| e.to_string())?;
    let r: Vec<f64> = (0..out.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let gout = Tensor::from_vec(out.shape(), r.clone()).unwrap();
    let (dgamma, dbeta, dx) = bn.backward(&cache, &gout);
    let loss_train = |bn: &BatchNorm2d, x: &Tensor| proj(&bn.forward(x, Mode::Train).unwrap().0, &r);
    let mut cases = 0;
    for _ in 0..55 {
        let gi = rng.gen_range(0..3);
        let mut cp = bn.clone();
        cp.gamma.data_mut()[gi] += FD_H;
        let up = loss_train(&cp, &x);
        cp.gamma.data_mut()[gi] -= 2.0 * FD_H;
        let dn = loss_train(&cp, &x);
        if !fd_ok((up - dn) / (2.0 * FD_H), dgamma.data()[gi]) {
            return Err("bn dgamma".into());
        }
        let bi = rng.gen_range(0..3);
        let mut cp = bn.clone();
        cp.beta.data_mut()[bi] += FD_H;
        let up = loss_train(&cp, &x);
        cp.beta.data_mut()[bi] -= 2.0 * FD_H;
        let dn = loss_train(&cp, &x);
        if !fd_ok((up - dn) / (2.0 * FD_H), dbeta.data()[bi]) {
            return Err("bn dbeta".into());
        }
        let xi = rng.gen_range(0..x.numel());
        let mut xp = x.clone();
        xp.data_mut()[xi] += FD_H;
        let up = loss_train(&bn, &xp);
        xp.data_mut()[xi] -= 2.0 * FD_H;
        let dn = loss_train(&bn, &xp);
        if !fd_ok((up - dn) / (2.0 * FD_H), dx.data()[xi]) {
            return Err("bn dx (train)".into());
        }
        cases += 1;
    }
    // Eval mode: running statistics fixed, only dx is defined.
    bn.running_var.data_mut()[1] = 0.9;
    bn.running_mean.data_mut()[2] = 0.2;
    let (out, cache) = bn.forward(&x, Mode::Eval).map_err(|e| e.to_string())?;
    let r: Vec<f64> = (0..out.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let gout = Tensor::from_vec(out.shape(), r.clone()).unwrap();
    let (_, _, dx) = bn.backward(&cache, &gout);
    for _ in 0..55 {
        let xi = rng.gen_range(0..x.numel());
        let mut xp = x.clone();
        xp.data_mut()[xi] += FD_H;
        let up = proj(&bn.forward(&xp, Mode::Eval).unwrap().0, &r);
        xp.data_mut()[xi] -= 2.0 * FD_H;
        let dn = proj(&bn.forward(&xp, Mode::Eval).unwrap().0, &r);
        if !fd_ok((up - dn) / (2.0 * FD_H), dx.data()[xi]) {
            return Err("bn dx (eval)".into());
        }
        cases += 1;
    }
    Ok(cases)
}

fn linear_cases(rng: &mut ChaCha8Rng) -> Result<usize, String> {
    let lin = Linear::new(12, 5, rng);
    let x = rand_tensor(&[3, 12], rng);
    let out = lin.forward(&x).map_err(|e| e.to_string())?;
    let r: Vec<f64> = (0..out.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let gout = Tensor::from_vec(out.shape(), r.clone()).unwrap();
    let (dw, db, dx) = lin.backward(&x, &gout);
    let mut cases = 0;
    for _ in 0..55 {
        let wi = rng.gen_range(0..lin.weight.numel());
        let mut cp = lin.clone();
        cp.weight.data_mut()[wi] += FD_H;
        let up = proj(&cp.forward(&x).unwrap(), &r);
        cp.weight.data_mut()[wi] -= 2.0 * FD_H;
        let dn = proj(&cp.forward(&x).unwrap(), &r);
        if !fd_ok((up - dn) / (2.0 * FD_H), dw.data()[wi]) {
            return Err("linear dw".into());
        }
        let bi = rng.gen_range(0..5);
        let mut cp = lin.clone();
        cp.bias.data_mut()[bi] += FD_H;
        let up = proj(&cp.forward(&x).unwrap(), &r);
        cp.bias.data_mut()[bi] -= 2.0 * FD_H;
        let dn = proj(&cp.forward(&x).unwrap(), &r);
        if !fd_ok((up - dn) / (2.0 * FD_H), db.data()[bi]) {
            return Err("linear db".into());
        }
        let xi = rng.gen_range(0..x.numel());
        let mut xp = x.clone();
        xp.data_mut()[xi] += FD_H;
        let up = proj(&lin.forward(&xp).unwrap(), &r);
        xp.data_mut()[xi] -= 2.0 * FD_H;
        let dn = proj(&lin.forward(&xp).unwrap(), &r);
        if !fd_ok((up - dn) / (2.0 * FD_H), dx.data()[xi]) {
            return Err("linear dx".into());
        }
        cases += 1;
    }
    Ok(cases)
}

fn focal_cases(rng: &mut ChaCha8Rng) -> Result<usize, String> {
    let mut cases = 0;
    for _ in 0..60 {
        let z = rng.gen_range(-4.0..4.0);
        let fake = rng.gen_bool(0.5);
        let params = FocalParams {
            gamma: rng.gen_range(0.5..4.0),
            alpha_fake: rng.gen_range(0.1..0.9),
            alpha_real: rng.gen_range(0.1..0.9),
        };
        let (_, dz) = focal_loss(z, fake, &params);
        let (up, _) = focal_loss(z + FD_H, fake, &params);
        let (dn, _) = focal_loss(z - FD_H, fake, &params);
        if !fd_ok((up - dn) / (2.0 * FD_H), dz) {
            return Err(format!("focal loss at z={z:.3} fake={fake}"));
        }
        cases += 1;
    }
    Ok(cases)
}

fn gradient_gate() -> Result<String, String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let c1 = conv_cases(1, 1, &mut rng)?;
    let c2 = conv_cases(3, 0, &mut rng)?;
    let bn = batchnorm_cases(&mut rng)?;
    let lin = linear_cases(&mut rng)?;
    let focal = focal_cases(&mut rng)?;
    budget_check(
        start.elapsed(),
        GRADIENT_BUDGET,
        format!("conv {c1}+{c2}, batchnorm {bn}, linear {lin}, focal {focal} cases"),
    )
}

// ---------------------------------------------------------------- gate 3

fn attack_gate() -> Result<String, String> {
    let start = Instant::now();

    // 1-D PGD against the closed-form projected optimum of (x-0.9)^2 over
    // the 0.1-ball around 0.5: clamp(0.9, [0.4, 0.6]) = 0.6.
    let feasible = Feasible::Ball {
        center: vec![0.5],
        eps: 0.1,
    };
    let cfg = AttackConfig {
        eps: 0.1,
        step: 0.025,
        max_iters: 1000,
        ..AttackConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let obj = |x: &[f64], g: &mut [f64]| {
        g[0] = 2.0 * (x[0] - 0.9);
        (x[0] - 0.9) * (x[0] - 0.9)
    };
    let res = pgd(obj, &feasible, &cfg, &mut rng, None).map_err(|e| e.to_string())?;
    if (res.x[0] - 0.6).abs() >= PGD_OPT_TOL {
        return Err(format!("1-D PGD ended at {} not 0.6", res.x[0]));
    }

    // Feasibility is exhaustive on real attack outputs. The detector and
    // verifier are untrained; the bounds must hold regardless.
    let scene_cfg = SceneConfig {
        width: 192,
        height: 120,
        lanes_min: 2,
        lanes_max: 2,
        vanishing_row: 40,
        ..SceneConfig::default()
    };
    let scene = generate_scene(&scene_cfg, 41).map_err(|e| e.to_string())?;
    let det = ToyDetector::seeded(3);
    let verifier = LinearVerifier::seeded(128, 40, 1);
    let target = choose_gap_target(&scene).map_err(|e| e.to_string())?;
    let target_seg = render_lane_mask(&target, &scene_cfg);
    let stab_cfg = StabilizationConfig::default();
    let eps = 0.125;
    let in_unit = |img: &SceneImage| -> bool {
        (0..3).all(|c| {
            img.channel(c)
                .as_slice()
                .iter()
                .all(|v| (0.0..=1.0).contains(v))
        })
    };

    let ball = Feasible::Ball {
        center: scene_flat(&scene.image),
        eps,
    };
    let atk = AttackConfig {
        eps,
        step: eps / 4.0,
        max_iters: 8,
        ..AttackConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let bounded = attack_scene_seg(&det, &scene.image, &target_seg, &ball, &atk, &mut rng, None)
        .map_err(|e| e.to_string())?;
    for c in 0..3 {
        let adv = bounded.adv.channel(c).as_slice();
        let orig = scene.image.channel(c).as_slice();
        for (i, (a, o)) in adv.iter().zip(orig).enumerate() {
            if (a - o).abs() > eps + 1e-9 {
                return Err(format!("bounded attack exceeds eps at channel {c} index {i}"));
            }
        }
    }
    if !in_unit(&bounded.adv) {
        return Err("bounded attack left [0,1]".into());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let placement = place_patch(&scene_cfg, &target, PatchSizing::Scaled, &mut rng)
        .map_err(|e| e.to_string())?;
    let mask = placement.mask(scene_cfg.height, scene_cfg.width);
    let boxed = Feasible::MaskedBox {
        center: scene_flat(&scene.image),
        mask: lane_sentinel::attack::channel_mask(&mask),
    };
    let patch_atk = AttackConfig {
        eps: 1.0,
        step: 0.05,
        max_iters: 8,
        ..AttackConfig::default()
    };
    let patched = attack_scene_seg(
        &det,
        &scene.image,
        &target_seg,
        &boxed,
        &patch_atk,
        &mut rng,
        None,
    )
    .map_err(|e| e.to_string())?;
    for c in 0..3 {
        let adv = patched.adv.channel(c).as_slice();
        let orig = scene.image.channel(c).as_slice();
        for (i, (a, o)) in adv.iter().zip(orig).enumerate() {
            let (y, x) = (i / scene_cfg.width, i % scene_cfg.width);
            if !mask.get(y, x) && a.to_bits() != o.to_bits() {
                return Err(format!("patch attack moved pixel outside mask at ({y},{x})"));
            }
        }
    }
    if !in_unit(&patched.adv) {
        return Err("patch attack left [0,1]".into());
    }

    // The adaptive two-stage path obeys the same ball.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let s1 = AttackConfig {
        max_iters: 3,
        ..atk.clone()
    };
    let s2 = AttackConfig {
        eps,
        step: 2.0 / 255.0,
        max_iters: 3,
        ..AttackConfig::default()
    };
    let adaptive = attack_adaptive(
        &det,
        &verifier,
        &scene.image,
        &target,
        &target_seg,
        &stab_cfg,
        &ball,
        None,
        &s1,
        &s2,
        2,
        &mut rng,
        None,
    )
    .map_err(|e| e.to_string())?;
    for c in 0..3 {
        let adv = adaptive.adv.channel(c).as_slice();
        let orig = scene.image.channel(c).as_slice();
        for (i, (a, o)) in adv.iter().zip(orig).enumerate() {
            if (a - o).abs() > eps + 1e-9 {
                return Err(format!("adaptive attack exceeds eps at channel {c} index {i}"));
            }
        }
    }
    if !in_unit(&adaptive.adv) {
        return Err("adaptive attack left [0,1]".into());
    }

    budget_check(
        start.elapsed(),
        ATTACK_BUDGET,
        "1-D optimum + exhaustive bounded/patch/adaptive feasibility".into(),
    )
}

// ---------------------------------------------------------------- gate 4

fn metrics_gate() -> Result<String, String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);

    // IoU equals naive pixel counting, exactly.
    for case in 0..60 {
        let (h, w) = (rng.gen_range(1..20), rng.gen_range(1..20));
        let mut a = BitMap::zeros(h, w);
        let mut b = BitMap::zeros(h, w);
        let (mut inter, mut union) = (0u64, 0u64);
        for y in 0..h {
            for x in 0..w {
                let va = rng.gen_bool(0.4);
                let vb = rng.gen_bool(0.4);
                a.set(y, x, va);
                b.set(y, x, vb);
                inter += u64::from(va && vb);
                union += u64::from(va || vb);
            }
        }
        // Two empty maps are identical, hence IoU 1.
        let expect = if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        };
        if iou_bitmaps(&a, &b) != expect {
            return Err(format!("IoU case {case} differs from pixel counting"));
        }
    }

    // AUC equals the Mann-Whitney pair count, with ties at half weight.
    // Coarse score grids force plenty of ties.
    for case in 0..60 {
        let n_real = rng.gen_range(1..40);
        let n_fake = rng.gen_range(1..40);
        let real: Vec<f64> = (0..n_real)
            .map(|_| rng.gen_range(0..10) as f64 / 10.0)
            .collect();
        let fake: Vec<f64> = (0..n_fake)
            .map(|_| rng.gen_range(0..10) as f64 / 10.0)
            .collect();
        let mut acc = 0.0;
        for f in &fake {
            for r in &real {
                acc += if f > r {
                    1.0
                } else if f == r {
                    0.5
                } else {
                    0.0
                };
            }
        }
        let expect = acc / (n_real * n_fake) as f64;
        let got = auc(&real, &fake);
        if (got - expect).abs() > AUC_TOL {
            return Err(format!("AUC case {case}: {got} vs pair count {expect}"));
        }
    }

    // Calibration: the chosen threshold never rejects more than the target
    // fraction of its own calibration scores.
    for case in 0..40 {
        let n = rng.gen_range(5..200);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let tau = calibrate_threshold(&scores, 0.05).map_err(|e| e.to_string())?;
        let fpr = rejection_rate(&scores, tau);
        if fpr > 0.05 + 1e-12 {
            return Err(format!("calibration case {case}: FPR {fpr} > 0.05"));
        }
    }

    budget_check(
        start.elapsed(),
        METRICS_BUDGET,
        "IoU/AUC oracles exact, calibration bounded by construction".into(),
    )
}

// ----------------------------------------------------------- gates 5-7

fn condition<'a>(summary: &'a ExperimentSummary, name: &str) -> Result<&'a lane_sentinel_cli::experiment::ConditionSummary, String> {
    summary
        .conditions
        .iter()
        .find(|c| c.name == name)
        .ok_or_else(|| format!("condition {name} missing from summary"))
}

fn experiment_gate(summary: &ExperimentSummary) -> Result<String, String> {
    let bounded = condition(summary, "bounded")?;
    let adaptive = condition(summary, "bounded-adaptive")?;
    let multi = condition(summary, "bounded-adaptive-multi")?;
    let fixed = condition(summary, "patch-fixed")?;
    let variable = condition(summary, "patch-variable")?;

    if bounded.n_attacked == 0 {
        return Err("bounded attack never planted its target".into());
    }
    if bounded.unprotected_fnr != 1.0 {
        return Err(format!(
            "unprotected FNR {} != 1.0 over {} attacked scenes",
            bounded.unprotected_fnr, bounded.n_attacked
        ));
    }
    if bounded.fnr > BOUNDED_FNR_MAX {
        return Err(format!("bounded FNR {} > {BOUNDED_FNR_MAX}", bounded.fnr));
    }
    if adaptive.fnr > ADAPTIVE_FNR_MAX {
        return Err(format!("adaptive FNR {} > {ADAPTIVE_FNR_MAX}", adaptive.fnr));
    }
    if adaptive.fnr < bounded.fnr {
        return Err(format!(
            "adaptive FNR {} below nonadaptive {}",
            adaptive.fnr, bounded.fnr
        ));
    }
    if fixed.fnr > PATCH_FNR_MAX || variable.fnr > PATCH_FNR_MAX {
        return Err(format!(
            "patch FNRs {} / {} exceed {PATCH_FNR_MAX}",
            fixed.fnr, variable.fnr
        ));
    }
    for c in [bounded, adaptive, multi, fixed, variable] {
        if c.n_attacked == 0 {
            return Err(format!("{}: attack never planted its target", c.name));
        }
        if c.fn_avg_iou >= RESIDUAL_IOU_FRAC * c.unprotected_fn_avg_iou {
            return Err(format!(
                "{}: residual IoU {} not under {RESIDUAL_IOU_FRAC} of unprotected {}",
                c.name, c.fn_avg_iou, c.unprotected_fn_avg_iou
            ));
        }
    }
    Ok(format!(
        "unprotected 1.0, FNR bounded {:.3} adaptive {:.3} patches {:.3}/{:.3}, residual IoU suppressed",
        bounded.fnr, adaptive.fnr, fixed.fnr, variable.fnr
    ))
}

fn ablation_gate(summary: &ExperimentSummary) -> Result<String, String> {
    let bounded = condition(summary, "bounded")?;
    let linear = condition(summary, "bounded-linear")?;
    let adaptive = condition(summary, "bounded-adaptive")?;
    let multi = condition(summary, "bounded-adaptive-multi")?;

    if linear.fnr < LINEAR_FNR_FACTOR * bounded.fnr {
        return Err(format!(
            "linear verifier FNR {} not >= {LINEAR_FNR_FACTOR}x cnn {}",
            linear.fnr, bounded.fnr
        ));
    }
    let gap = (multi.fnr - adaptive.fnr).abs();
    if gap > CYCLES_FNR_TOL {
        return Err(format!(
            "cycles={} FNR {} vs cycles=1 FNR {} gap {gap:.3} > {CYCLES_FNR_TOL}",
            multi.cycles, multi.fnr, adaptive.fnr
        ));
    }
    Ok(format!(
        "linear {:.3} vs cnn {:.3}, cycle gap {gap:.3}",
        linear.fnr, bounded.fnr
    ))
}

fn overhead_gate(summary: &ExperimentSummary) -> Result<String, String> {
    let bench = summary.bench.as_ref().ok_or("bench report missing")?;
    if bench.overhead > OVERHEAD_MAX {
        return Err(format!("overhead {:.3} > {OVERHEAD_MAX}", bench.overhead));
    }
    if !(bench.verify_ms_per_lane.is_finite() && bench.verify_ms_per_lane >= 0.0) {
        return Err("per-lane verify time not reported".into());
    }
    Ok(format!(
        "overhead {:.1}% (detect {:.1} ms -> defended {:.1} ms), {:.2} ms per lane",
        bench.overhead * 100.0,
        bench.detect_ms,
        bench.defended_ms,
        bench.verify_ms_per_lane
    ))
}

// ---------------------------------------------------------------- gate 8

/// Small but complete configuration for the double run: every stage
/// executes, nothing needs to train to quality.
fn determinism_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.scene.width = 192;
    cfg.scene.height = 96;
    cfg.scene.vanishing_row = 30;
    cfg.scene.lane_width_bottom = 9.0;
    cfg.scene.lanes_max = 3;
    cfg.n_scenes = 12;
    cfg.n_train = 8;
    cfg.n_val = 2;
    cfg.detector_train.steps = 25;
    cfg.detector_train.batch = 4;
    cfg.detector_train.crop = 64;
    cfg.detector_train_scenes = 8;
    cfg.verifier_train.epochs = 2;
    cfg.verifier_train.adv_steps = 2;
    cfg.linear_train.epochs = 2;
    cfg.linear_train.adv_steps = 2;
    cfg.attack_bounded.max_iters = 5;
    cfg.attack_patch.max_iters = 5;
    cfg.attack_stage2.max_iters = 4;
    cfg.attack_scenes = 2;
    cfg.adaptive_cycles = 2;
    cfg
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) {
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            walk(&path, out);
        } else {
            out.push(path);
        }
    }
}

/// Attack records carry a wall-clock duration by design; every other byte
/// of the results must match, so compare records as JSON minus that field.
fn results_equal_modulo_wall(a: &Path, b: &Path) -> Result<(), String> {
    let ta = fs::read_to_string(a).map_err(|e| e.to_string())?;
    let tb = fs::read_to_string(b).map_err(|e| e.to_string())?;
    let la: Vec<&str> = ta.lines().collect();
    let lb: Vec<&str> = tb.lines().collect();
    if la.len() != lb.len() {
        return Err(format!("{}: line counts differ", a.display()));
    }
    for (i, (ra, rb)) in la.iter().zip(&lb).enumerate() {
        let mut va: serde_json::Value = serde_json::from_str(ra).map_err(|e| e.to_string())?;
        let mut vb: serde_json::Value = serde_json::from_str(rb).map_err(|e| e.to_string())?;
        if let Some(o) = va.as_object_mut() {
            o.remove("wall_ms");
        }
        if let Some(o) = vb.as_object_mut() {
            o.remove("wall_ms");
        }
        if va != vb {
            return Err(format!("{}: line {} differs beyond wall_ms", a.display(), i + 1));
        }
    }
    Ok(())
}

fn determinism_gate() -> Result<String, String> {
    let cfg = determinism_config();
    let tmp = TempDir::new().map_err(|e| e.to_string())?;
    let pool = build_pool(2).map_err(|e| e.to_string())?;
    let opts = ExperimentOptions { bench: false };
    let dir_a = tmp.path().join("a");
    let dir_b = tmp.path().join("b");
    run_experiment(&cfg, &dir_a, &pool, &opts).map_err(|e| e.to_string())?;
    run_experiment(&cfg, &dir_b, &pool, &opts).map_err(|e| e.to_string())?;

    let mut files_a = Vec::new();
    walk(&dir_a, &mut files_a);
    files_a.sort();
    let mut compared = 0;
    let mut jsonl = 0;
    for path_a in &files_a {
        let rel = path_a.strip_prefix(&dir_a).unwrap();
        let path_b = dir_b.join(rel);
        if !path_b.is_file() {
            return Err(format!("{} missing from second run", rel.display()));
        }
        let name = path_a.file_name().unwrap().to_string_lossy();
        if name.ends_with(".meta.json") {
            continue; // timing sidecars, wall-clock by design
        }
        if name.ends_with(".jsonl") {
            results_equal_modulo_wall(path_a, &path_b)?;
            jsonl += 1;
        } else {
            let ba = fs::read(path_a).map_err(|e| e.to_string())?;
            let bb = fs::read(&path_b).map_err(|e| e.to_string())?;
            if ba != bb {
                return Err(format!("{} differs between runs", rel.display()));
            }
        }
        compared += 1;
    }
    let mut files_b = Vec::new();
    walk(&dir_b, &mut files_b);
    if files_b.len() != files_a.len() {
        return Err("second run produced a different file set".into());
    }
    Ok(format!(
        "{compared} artifacts byte-identical ({jsonl} results files modulo recorded wall time)"
    ))
}

// ------------------------------------------------------------------ main

#[test]
fn acceptance_gates() {
    let mut gates = Gates::new();

    gates.run(1, "geometry suite", geometry_gate);
    gates.run(2, "gradient suite", gradient_gate);
    gates.run(3, "attack feasibility suite", attack_gate);
    gates.run(4, "metric oracles", metrics_gate);

    // One full experiment at the default configuration feeds gates 5-7 and
    // the test-split FPR leg of gate 4.
    let cfg = ExperimentConfig::default();
    let tmp = TempDir::new().expect("tempdir");
    let pool = build_pool(2).expect("pool");
    let experiment_started = Instant::now();
    let summary = run_experiment(&cfg, tmp.path(), &pool, &ExperimentOptions { bench: true });
    let experiment_minutes = experiment_started.elapsed().as_secs_f64() / 60.0;

    match &summary {
        Ok(summary) => {
            gates.run(4, "metric oracles / test-split FPR", || {
                if summary.verifier_test_fpr <= TEST_FPR_MAX {
                    Ok(format!(
                        "test-split real-lane FPR {:.3} <= {TEST_FPR_MAX}",
                        summary.verifier_test_fpr
                    ))
                } else {
                    Err(format!(
                        "test-split real-lane FPR {:.3} > {TEST_FPR_MAX}",
                        summary.verifier_test_fpr
                    ))
                }
            });
            gates.run(5, "end-to-end experiment", || {
                experiment_gate(summary)
                    .map(|d| format!("{d}; {experiment_minutes:.0} min, {} scenes", summary.n_scenes))
            });
            gates.run(6, "ablations", || ablation_gate(summary));
            gates.run(7, "overhead benchmark", || overhead_gate(summary));
        }
        Err(e) => {
            for (n, label) in [
                (4, "metric oracles / test-split FPR"),
                (5, "end-to-end experiment"),
                (6, "ablations"),
                (7, "overhead benchmark"),
            ] {
                gates.run(n, label, || Err(format!("experiment failed: {e}")));
            }
        }
    }

    gates.run(8, "determinism", determinism_gate);

    assert!(
        gates.failures.is_empty(),
        "acceptance failures:\n  {}",
        gates.failures.join("\n  ")
    );
}
