//! Synthetic driving scenes with exact lane ground truth, plus fake-lane
//! synthesis for building verifier training data.
//!
//! A scene is a 512x288 RGB image in [0, 1]: sky above the vanishing row, a
//! textured road plane below, and 2..=5 lane markings that follow cubic
//! curves converging toward a per-scene vanishing point. Marking width
//! shrinks linearly from `lane_width_bottom` pixels at the bottom row to
//! 1 px at the vanishing row. Generation is fully deterministic in
//! (config, seed).

use crate::geometry::{GeometryError, Lane, LaneLabel, PolyLane};
use crate::img::{BitMap, Plane, SceneImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    #[error("lane extent spans {got} rows, need at least {min} for a fake lane")]
    ExtentTooShort { got: i32, min: i32 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Parameters of the synthetic scene generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub lanes_min: usize,
    pub lanes_max: usize,
    /// Row where lanes converge; sky above, road below.
    pub vanishing_row: i32,
    /// Marking width in pixels at the bottom row.
    pub lane_width_bottom: f64,
    /// Std-dev of the per-pixel Gaussian noise added last.
    pub noise_std: f64,
    /// Fraction of lanes painted dashed instead of solid.
    pub dash_fraction: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 512,
            height: 288,
            lanes_min: 2,
            lanes_max: 5,
            vanishing_row: 100,
            lane_width_bottom: 14.0,
            noise_std: 0.02,
            dash_fraction: 0.3,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.width < 64 || self.height < 64 {
            return Err(SceneError::InvalidConfig(format!(
                "frame {}x{} too small",
                self.width, self.height
            )));
        }
        if self.vanishing_row <= 0 || self.vanishing_row >= self.height as i32 - 32 {
            return Err(SceneError::InvalidConfig(format!(
                "vanishing_row {} must leave at least 32 road rows",
                self.vanishing_row
            )));
        }
        if self.lanes_min < 1 || self.lanes_min > self.lanes_max {
            return Err(SceneError::InvalidConfig(format!(
                "lane count range {}..={} invalid",
                self.lanes_min, self.lanes_max
            )));
        }
        if self.lane_width_bottom < 1.0 {
            return Err(SceneError::InvalidConfig(
                "lane_width_bottom must be >= 1 px".into(),
            ));
        }
        if self.noise_std < 0.0 {
            return Err(SceneError::InvalidConfig("noise_std must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.dash_fraction) {
            return Err(SceneError::InvalidConfig(
                "dash_fraction must be in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Bottom-most row index.
    pub fn bottom_row(&self) -> i32 {
        self.height as i32 - 1
    }

    /// Marking width at a row: 1 px at the vanishing row growing linearly to
    /// `lane_width_bottom` at the bottom row; 0 above the vanishing row.
    pub fn marking_width(&self, y: f64) -> f64 {
        let vr = self.vanishing_row as f64;
        let hb = self.bottom_row() as f64;
        if y < vr {
            return 0.0;
        }
        let t = ((y - vr) / (hb - vr)).min(1.0);
        1.0 + (self.lane_width_bottom - 1.0) * t
    }
}

/// A generated scene: image, exact segmentation, and per-lane ground truth.
#[derive(Debug, Clone)]
pub struct Scene {
    pub image: SceneImage,
    /// 1 exactly where a lane marking was painted (pre-noise).
    pub seg_map: BitMap,
    /// Painted lanes, left to right by bottom x, labeled Real. Samples
    /// exist only at rows where marking pixels were painted (dash gaps and
    /// off-frame rows are skipped).
    pub gt_lanes: Vec<Lane>,
    /// The exact cubic each lane was painted from.
    pub lane_polys: Vec<PolyLane>,
    pub seed: u64,
}

/// Columns covered by a marking of half-width `half` centered at `xc`,
/// clipped to the frame. Empty when the center is fully off-frame.
fn marking_cols(xc: f64, half: f64, w: usize) -> std::ops::RangeInclusive<i64> {
    let lo = (xc - half).ceil() as i64;
    let hi = (xc + half).floor() as i64;
    lo.max(0)..=hi.min(w as i64 - 1)
}

/// Paints one lane poly into a bitmap with the config's width law.
/// Rows outside [vanishing_row, bottom] or the poly extent are skipped.
pub fn render_lane_mask(poly: &PolyLane, cfg: &SceneConfig) -> BitMap {
    let mut mask = BitMap::zeros(cfg.height, cfg.width);
    let lo = poly.row_min.max(cfg.vanishing_row).max(0);
    let hi = poly.row_max.min(cfg.bottom_row());
    for y in lo..=hi {
        let width = cfg.marking_width(y as f64);
        if width <= 0.0 {
            continue;
        }
        let xc = poly.eval(y as f64);
        for x in marking_cols(xc, width / 2.0, cfg.width) {
            mask.set(y as usize, x as usize, true);
        }
    }
    mask
}

/// Smooth value-noise plane: a coarse random grid upsampled bilinearly.
fn value_noise(h: usize, w: usize, cell: usize, amp: f64, rng: &mut ChaCha8Rng) -> Plane {
    let gh = h / cell + 2;
    let gw = w / cell + 2;
    let grid: Vec<f64> = (0..gh * gw).map(|_| rng.gen_range(-amp..amp)).collect();
    let mut out = Plane::zeros(h, w);
    for y in 0..h {
        let gy = y as f64 / cell as f64;
        let y0 = gy.floor() as usize;
        let fy = gy - y0 as f64;
        for x in 0..w {
            let gx = x as f64 / cell as f64;
            let x0 = gx.floor() as usize;
            let fx = gx - x0 as f64;
            let g = |yy: usize, xx: usize| grid[yy * gw + xx];
            let v = g(y0, x0) * (1.0 - fy) * (1.0 - fx)
                + g(y0, x0 + 1) * (1.0 - fy) * fx
                + g(y0 + 1, x0) * fy * (1.0 - fx)
                + g(y0 + 1, x0 + 1) * fy * fx;
            out.set(y, x, v);
        }
    }
    out
}

/// Expands p0 + p1*t + p2*t^2 + p3*t^3 with t = (y - vr) / d into plain
/// coefficients of y.
fn poly_t_to_y(p: [f64; 4], vr: f64, d: f64) -> Vec<f64> {
    let mut out = [0.0f64; 4];
    for (k, &pk) in p.iter().enumerate() {
        // pk * ((y - vr)/d)^k expanded by the binomial theorem.
        let scale = pk / d.powi(k as i32);
        let mut binom = 1.0f64;
        for j in 0..=k {
            out[j] += scale * binom * (-vr).powi((k - j) as i32);
            binom = binom * (k - j) as f64 / (j + 1) as f64;
        }
    }
    out.to_vec()
}

struct LaneSpec {
    poly: PolyLane,
    brightness: f64,
    dashed: bool,
    dash_phase: i32,
}

const DASH_ON: i32 = 40;
const DASH_OFF: i32 = 8;

/// Generates one deterministic scene from (config, seed).
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<Scene, SceneError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.height, cfg.width);
    let vr = cfg.vanishing_row;
    let hb = cfg.bottom_row();
    let d = (hb - vr) as f64;

    // Backdrop: sky gradient above the vanishing row, textured road below.
    let road_base = rng.gen_range(0.16..0.32);
    let sky_base = rng.gen_range(0.45..0.70);
    let coarse = value_noise(h, w, 48, 0.05, &mut rng);
    let fine = value_noise(h, w, 12, 0.025, &mut rng);
    let mut image = SceneImage::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let tex = coarse.get(y, x) + fine.get(y, x);
            let (r, g, b) = if (y as i32) < vr {
                let t = 1.0 - y as f64 / vr as f64;
                let v = sky_base + 0.10 * t + tex * 0.4;
                (v, v, (v + 0.05).min(1.0))
            } else {
                let t = (y as f64 - vr as f64) / d;
                let v = road_base + 0.05 * t + tex;
                (v, v, v)
            };
            image.channel_mut(0).set(y, x, r.clamp(0.0, 1.0));
            image.channel_mut(1).set(y, x, g.clamp(0.0, 1.0));
            image.channel_mut(2).set(y, x, b.clamp(0.0, 1.0));
        }
    }

    // Lane geometry: bottom anchor positions with randomized gaps, all
    // curves converging near a shared vanishing x.
    let n_lanes = rng.gen_range(cfg.lanes_min..=cfg.lanes_max);
    let vx = rng.gen_range(0.38 * w as f64..0.62 * w as f64);
    let mut gaps = Vec::with_capacity(n_lanes.saturating_sub(1));
    let mut total_gap = 0.0;
    for _ in 1..n_lanes {
        let g = rng.gen_range(72.0..100.0);
        gaps.push(g);
        total_gap += g;
    }
    let margin = 40.0;
    let x_lo = margin;
    let x_hi = (w as f64 - margin - total_gap).max(x_lo + 1.0);
    let mut x_bottom = rng.gen_range(x_lo..x_hi);

    let mut specs = Vec::with_capacity(n_lanes);
    for i in 0..n_lanes {
        if i > 0 {
            x_bottom += gaps[i - 1];
        }
        let vx_i = vx + rng.gen_range(-14.0..14.0);
        let a2 = rng.gen_range(-30.0..30.0);
        let a3 = rng.gen_range(-12.0..12.0);
        // x(t) = vx_i + (xb - vx_i - a2 - a3) t + a2 t^2 + a3 t^3 anchors the
        // curve at vx_i (t = 0) and x_bottom (t = 1).
        let p_t = [vx_i, x_bottom - vx_i - a2 - a3, a2, a3];
        let coeffs = poly_t_to_y(p_t, vr as f64, d);
        specs.push(LaneSpec {
            poly: PolyLane::new(coeffs, vr, hb),
            brightness: rng.gen_range(0.78..0.95),
            dashed: rng.gen::<f64>() < cfg.dash_fraction,
            dash_phase: rng.gen_range(0..DASH_ON + DASH_OFF),
        });
    }

    // Paint markings and collect ground truth.
    let mut seg = BitMap::zeros(h, w);
    let mut gt_lanes = Vec::with_capacity(n_lanes);
    let mut lane_polys = Vec::with_capacity(n_lanes);
    for spec in &specs {
        let mut samples = Vec::new();
        for y in vr..=hb {
            if spec.dashed {
                let phase = (y - vr + spec.dash_phase) % (DASH_ON + DASH_OFF);
                if phase >= DASH_ON {
                    continue;
                }
            }
            let yf = y as f64;
            let xc = spec.poly.eval(yf);
            let half = cfg.marking_width(yf) / 2.0;
            let cols = marking_cols(xc, half, w);
            if cols.is_empty() {
                continue;
            }
            for x in cols {
                seg.set(y as usize, x as usize, true);
                for c in 0..3 {
                    image.channel_mut(c).set(y as usize, x as usize, spec.brightness);
                }
            }
            // The rounded center is always painted (width >= 1), so the
            // sample sits on a seg pixel.
            if xc.round() >= 0.0 && xc.round() <= (w - 1) as f64 {
                samples.push((y, xc));
            }
        }
        if samples.len() >= 4 {
            gt_lanes.push(Lane::new(samples, LaneLabel::Real)?);
            lane_polys.push(spec.poly.clone());
        }
    }

    // Order left to right by bottom x.
    let mut order: Vec<usize> = (0..gt_lanes.len()).collect();
    order.sort_by(|&a, &b| gt_lanes[a].bottom_x().total_cmp(&gt_lanes[b].bottom_x()));
    let gt_lanes: Vec<Lane> = order.iter().map(|&i| gt_lanes[i].clone()).collect();
    let lane_polys: Vec<PolyLane> = order.iter().map(|&i| lane_polys[i].clone()).collect();

    // Pixel noise last, clamped back into [0, 1].
    if cfg.noise_std > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_std).expect("validated std");
        for c in 0..3 {
            for v in image.channel_mut(c).as_mut_slice() {
                *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
    }

    Ok(Scene {
        image,
        seg_map: seg,
        gt_lanes,
        lane_polys,
        seed,
    })
}

/// Which way a fake lane bends away from its source lane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Left,
    Right,
    Random,
}

/// Parameters of the fake-lane generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FakeLaneSpec {
    /// Largest horizontal offset, reached at the top of the lane.
    pub max_deviation: f64,
    /// Power of the deviation ramp; higher keeps the bottom anchored longer.
    pub exponent: f64,
    pub direction: Direction,
}

impl Default for FakeLaneSpec {
    fn default() -> Self {
        FakeLaneSpec {
            max_deviation: 60.0,
            exponent: 2.0,
            direction: Direction::Random,
        }
    }
}

/// Minimum row span a lane needs before it can host a fake.
pub const FAKE_MIN_SPAN: i32 = 20;

/// Bends a real lane into a plausible fake: zero offset at the bottom row,
/// growing to `max_deviation` at the top as a power of normalized height.
///
/// x'(y) = x(y) + direction * max_deviation * ((row_max - y) / (row_max - row_min))^exponent
pub fn generate_fake_lane(
    lane: &Lane,
    spec: &FakeLaneSpec,
    seed: u64,
) -> Result<Lane, SceneError> {
    let span = lane.row_max() - lane.row_min();
    if span < FAKE_MIN_SPAN {
        return Err(SceneError::ExtentTooShort {
            got: span,
            min: FAKE_MIN_SPAN,
        });
    }
    let dir = match spec.direction {
        Direction::Left => -1.0,
        Direction::Right => 1.0,
        Direction::Random => {
            if ChaCha8Rng::seed_from_u64(seed).gen::<bool>() {
                1.0
            } else {
                -1.0
            }
        }
    };
    let row_max = lane.row_max() as f64;
    let denom = span as f64;
    let samples = lane
        .samples()
        .iter()
        .map(|&(y, x)| {
            let ramp = ((row_max - y as f64) / denom).powf(spec.exponent);
            (y, x + dir * spec.max_deviation * ramp)
        })
        .collect();
    Ok(Lane::new(samples, LaneLabel::Fake)?)
}
