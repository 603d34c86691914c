//! Lane geometry: polynomial fitting of lane point lists, curve frames
//! (tangent / normal), perspective-stabilized lane extraction, and the
//! inverse write-back of stabilized-space deltas into scene pixels.
//!
//! A lane lives in scene coordinates: integer rows (y, top = 0) paired with
//! fractional column positions x. Curves are modeled as x = c0 + c1*y +
//! c2*y^2 + c3*y^3. Stabilization resamples the scene along lines normal to
//! the curve into a fixed-size grayscale image whose center column tracks
//! the curve; every output pixel remembers the scene coordinate it was
//! sampled from so perturbations crafted in stabilized space can be pushed
//! back into the scene.

use crate::img::{bilinear_cell, BitMap, Plane, SceneImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("lane must contain at least one sample")]
    EmptyLane,
    #[error("lane rows must be strictly increasing (row {row} follows {prev})")]
    NonIncreasingRows { prev: i32, row: i32 },
    #[error("need at least {needed} samples to fit degree {degree}, lane has {got}")]
    TooFewSamples {
        needed: usize,
        degree: usize,
        got: usize,
    },
    #[error("polynomial degree {0} not supported (max 3)")]
    BadDegree(usize),
    #[error("normal equations are singular")]
    DegenerateSystem,
    #[error("lane extent covers fewer than 2 image rows")]
    EmptyExtent,
    #[error("stabilization config invalid: {0}")]
    BadConfig(String),
    #[error("delta is {got_h}x{got_w} but stabilized image is {expected_h}x{expected_w}")]
    DeltaShape {
        expected_h: usize,
        expected_w: usize,
        got_h: usize,
        got_w: usize,
    },
    #[error("region mask is {got_h}x{got_w} but scene is {expected_h}x{expected_w}")]
    MaskShape {
        expected_h: usize,
        expected_w: usize,
        got_h: usize,
        got_w: usize,
    },
}

/// Ground-truth class of a lane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LaneLabel {
    Real,
    Fake,
    Unknown,
}

/// An ordered list of (row, x) samples describing one lane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    samples: Vec<(i32, f64)>,
    label: LaneLabel,
}

impl Lane {
    /// Rows must be strictly increasing; gaps are allowed.
    pub fn new(samples: Vec<(i32, f64)>, label: LaneLabel) -> Result<Self, GeometryError> {
        if samples.is_empty() {
            return Err(GeometryError::EmptyLane);
        }
        for pair in samples.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(GeometryError::NonIncreasingRows {
                    prev: pair[0].0,
                    row: pair[1].0,
                });
            }
        }
        Ok(Lane { samples, label })
    }

    pub fn samples(&self) -> &[(i32, f64)] {
        &self.samples
    }

    pub fn label(&self) -> LaneLabel {
        self.label
    }

    pub fn with_label(mut self, label: LaneLabel) -> Self {
        self.label = label;
        self
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn row_min(&self) -> i32 {
        self.samples.first().unwrap().0
    }

    pub fn row_max(&self) -> i32 {
        self.samples.last().unwrap().0
    }

    /// Number of rows spanned, inclusive of both ends.
    pub fn row_span(&self) -> i32 {
        self.row_max() - self.row_min() + 1
    }

    /// x position at the lane's bottom-most sample.
    pub fn bottom_x(&self) -> f64 {
        self.samples.last().unwrap().1
    }

    /// True when every sample lies inside a w x h scene.
    pub fn in_bounds(&self, w: usize, h: usize) -> bool {
        self.samples.iter().all(|&(y, x)| {
            y >= 0 && (y as usize) < h && x >= 0.0 && x <= (w - 1) as f64
        })
    }
}

/// A fitted polynomial x(y) = coeffs[0] + coeffs[1]*y + ... over an
/// inclusive row extent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyLane {
    pub coeffs: Vec<f64>,
    pub row_min: i32,
    pub row_max: i32,
}

impl PolyLane {
    pub fn new(coeffs: Vec<f64>, row_min: i32, row_max: i32) -> Self {
        assert!(!coeffs.is_empty() && coeffs.len() <= 4, "degree 0..=3");
        assert!(row_max >= row_min, "extent must be nonempty");
        PolyLane {
            coeffs,
            row_min,
            row_max,
        }
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    /// x at a (possibly fractional) row, evaluated by Horner's rule.
    pub fn eval(&self, y: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * y + c)
    }

    /// dx/dy at a row.
    pub fn deriv(&self, y: f64) -> f64 {
        self.coeffs
            .iter()
            .enumerate()
            .skip(1)
            .rev()
            .fold(0.0, |acc, (k, c)| acc * y + k as f64 * c)
    }

    /// Samples the curve at every integer row of its extent.
    pub fn to_lane(&self, label: LaneLabel) -> Lane {
        let samples = (self.row_min..=self.row_max)
            .map(|y| (y, self.eval(y as f64)))
            .collect();
        Lane::new(samples, label).expect("rows are strictly increasing by construction")
    }
}

/// A 2-D vector in (x, y) scene coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y).sqrt()
    }

    pub fn dot(&self, other: &Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }
}

/// Least-squares polynomial fit of a lane, degree <= 3.
///
/// The system is solved on a row-centered basis (u = y - mean) for
/// conditioning and the coefficients are expanded back to plain powers of y.
pub fn fit_polynomial(lane: &Lane, degree: usize) -> Result<PolyLane, GeometryError> {
    if degree > 3 {
        return Err(GeometryError::BadDegree(degree));
    }
    let n = lane.len();
    if n < degree + 1 {
        return Err(GeometryError::TooFewSamples {
            needed: degree + 1,
            degree,
            got: n,
        });
    }
    let mean_y = lane.samples.iter().map(|&(y, _)| y as f64).sum::<f64>() / n as f64;
    let dim = degree + 1;

    // Normal equations A b = r with A[i][j] = sum u^(i+j), r[i] = sum u^i * x.
    let mut pow_sums = [0.0f64; 7];
    let mut rhs = [0.0f64; 4];
    for &(y, x) in &lane.samples {
        let u = y as f64 - mean_y;
        let mut up = 1.0;
        for (k, s) in pow_sums.iter_mut().enumerate().take(2 * degree + 1) {
            *s += up;
            if k < dim {
                rhs[k] += up * x;
            }
            up *= u;
        }
    }
    let mut a = [[0.0f64; 4]; 4];
    for i in 0..dim {
        for j in 0..dim {
            a[i][j] = pow_sums[i + j];
        }
    }
    let b = solve_linear(&mut a, &mut rhs, dim)?;

    // Expand sum b_j (y - m)^j into plain coefficients of y^k.
    let m = mean_y;
    let mut coeffs = vec![0.0f64; dim];
    for (j, &bj) in b.iter().enumerate().take(dim) {
        let mut binom = 1.0f64;
        for k in 0..=j {
            // binom = C(j, k); term b_j * C(j,k) * (-m)^(j-k) * y^k
            coeffs[k] += bj * binom * (-m).powi((j - k) as i32);
            binom = binom * (j - k) as f64 / (k + 1) as f64;
        }
    }
    Ok(PolyLane::new(coeffs, lane.row_min(), lane.row_max()))
}

/// Gaussian elimination with partial pivoting on a dim x dim system.
fn solve_linear(
    a: &mut [[f64; 4]; 4],
    rhs: &mut [f64; 4],
    dim: usize,
) -> Result<[f64; 4], GeometryError> {
    for col in 0..dim {
        let pivot = (col..dim)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[pivot][col].abs() < 1e-12 {
            return Err(GeometryError::DegenerateSystem);
        }
        a.swap(col, pivot);
        rhs.swap(col, pivot);
        for row in col + 1..dim {
            let f = a[row][col] / a[col][col];
            for k in col..dim {
                a[row][k] -= f * a[col][k];
            }
            rhs[row] -= f * rhs[col];
        }
    }
    let mut x = [0.0f64; 4];
    for col in (0..dim).rev() {
        let mut s = rhs[col];
        for k in col + 1..dim {
            s -= a[col][k] * x[k];
        }
        x[col] = s / a[col][col];
    }
    Ok(x)
}

/// Unit tangent and unit normal of a curve at a row.
///
/// The tangent points down-image (positive y component); the normal is the
/// tangent rotated a quarter turn and oriented so its x component is
/// positive, i.e. it points toward increasing x across the lane.
pub fn curve_tangent_normal(poly: &PolyLane, y: f64) -> (Vec2, Vec2) {
    let dx = poly.deriv(y);
    let norm = (dx * dx + 1.0).sqrt();
    let tangent = Vec2 {
        x: dx / norm,
        y: 1.0 / norm,
    };
    let mut normal = Vec2 {
        x: -tangent.y,
        y: tangent.x,
    };
    if normal.x < 0.0 {
        normal.x = -normal.x;
        normal.y = -normal.y;
    }
    (tangent, normal)
}

/// Parameters of the stabilized-lane extraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilizationConfig {
    /// Output height of the canonical image.
    pub out_height: usize,
    /// Output width of the canonical image.
    pub out_width: usize,
    /// Width in scene pixels of the band sampled across the curve
    /// (unit spacing between samples before resizing).
    pub raw_band_width: usize,
}

impl Default for StabilizationConfig {
    fn default() -> Self {
        StabilizationConfig {
            out_height: 128,
            out_width: 40,
            raw_band_width: 40,
        }
    }
}

impl StabilizationConfig {
    fn validate(&self) -> Result<(), GeometryError> {
        if self.out_height < 2 || self.out_width < 2 || self.raw_band_width < 2 {
            return Err(GeometryError::BadConfig(format!(
                "out {}x{}, band {}: all dimensions must be >= 2",
                self.out_height, self.out_width, self.raw_band_width
            )));
        }
        Ok(())
    }
}

/// A lane resampled into the canonical frame, with per-pixel provenance.
///
/// `provenance[i * w + j]` is the fractional (y, x) scene coordinate the
/// pixel was bilinearly sampled from, or None when the sample fell outside
/// the image (those pixels read 0).
#[derive(Debug, Clone)]
pub struct StabilizedLane {
    pub image: Plane,
    pub provenance: Vec<Option<(f64, f64)>>,
    pub source: PolyLane,
}

impl StabilizedLane {
    pub fn provenance_at(&self, i: usize, j: usize) -> Option<(f64, f64)> {
        self.provenance[i * self.image.w() + j]
    }
}

/// Resamples the scene into the canonical lane frame.
///
/// Output row i follows the curve from the top of the (image-clipped)
/// extent to its bottom; output column j walks across the curve along its
/// unit normal, covering `raw_band_width` scene pixels centered on the
/// curve. Every output pixel is one bilinear luminance sample of the scene
/// at the composed coordinate, so write_back can splat deltas to exactly
/// the pixels that produced it.
pub fn stabilize_lane(
    scene: &SceneImage,
    poly: &PolyLane,
    cfg: &StabilizationConfig,
) -> Result<StabilizedLane, GeometryError> {
    cfg.validate()?;
    let lo = poly.row_min.max(0) as f64;
    let hi = poly.row_max.min(scene.h() as i32 - 1) as f64;
    if !(hi - lo >= 1.0) {
        return Err(GeometryError::EmptyExtent);
    }
    let (oh, ow) = (cfg.out_height, cfg.out_width);
    let band = cfg.raw_band_width as f64;
    let mut image = Plane::zeros(oh, ow);
    let mut provenance = vec![None; oh * ow];
    for i in 0..oh {
        let yf = lo + (hi - lo) * i as f64 / (oh - 1) as f64;
        let cx = poly.eval(yf);
        let (_, normal) = curve_tangent_normal(poly, yf);
        for j in 0..ow {
            let off = (band - 1.0) * j as f64 / (ow - 1) as f64 - (band - 1.0) / 2.0;
            let py = yf + off * normal.y;
            let px = cx + off * normal.x;
            if let Some(v) = scene.sample_luminance(py, px) {
                image.set(i, j, v);
                provenance[i * ow + j] = Some((py, px));
            }
        }
    }
    Ok(StabilizedLane {
        image,
        provenance,
        source: poly.clone(),
    })
}

/// Splats a stabilized-space delta back into a scene-sized delta plane.
///
/// Each stabilized pixel deposits its delta onto the four scene pixels of
/// its provenance coordinate with bilinear weights; where deposits overlap,
/// the result is the weight-averaged delta, not the last write. Pixels with
/// no provenance (out-of-image reads) are skipped. If `region_mask` is
/// given, deposits outside the mask are zeroed.
pub fn write_back(
    delta: &Plane,
    stab: &StabilizedLane,
    scene_h: usize,
    scene_w: usize,
    region_mask: Option<&BitMap>,
) -> Result<Plane, GeometryError> {
    let (oh, ow) = (stab.image.h(), stab.image.w());
    if delta.h() != oh || delta.w() != ow {
        return Err(GeometryError::DeltaShape {
            expected_h: oh,
            expected_w: ow,
            got_h: delta.h(),
            got_w: delta.w(),
        });
    }
    if let Some(mask) = region_mask {
        if mask.h() != scene_h || mask.w() != scene_w {
            return Err(GeometryError::MaskShape {
                expected_h: scene_h,
                expected_w: scene_w,
                got_h: mask.h(),
                got_w: mask.w(),
            });
        }
    }
    let mut num = vec![0.0f64; scene_h * scene_w];
    let mut den = vec![0.0f64; scene_h * scene_w];
    for i in 0..oh {
        for j in 0..ow {
            let Some((yf, xf)) = stab.provenance[i * ow + j] else {
                continue;
            };
            let d = delta.get(i, j);
            let (y0, x0, fy, fx) = bilinear_cell(yf, xf, scene_h, scene_w);
            let y1 = (y0 + 1).min(scene_h - 1);
            let x1 = (x0 + 1).min(scene_w - 1);
            let mut splat = |y: usize, x: usize, w: f64| {
                if w > 0.0 {
                    num[y * scene_w + x] += w * d;
                    den[y * scene_w + x] += w;
                }
            };
            splat(y0, x0, (1.0 - fy) * (1.0 - fx));
            splat(y0, x1, (1.0 - fy) * fx);
            splat(y1, x0, fy * (1.0 - fx));
            splat(y1, x1, fy * fx);
        }
    }
    let mut out = Plane::zeros(scene_h, scene_w);
    for k in 0..scene_h * scene_w {
        if den[k] > 0.0 {
            let masked = region_mask
                .map(|m| !m.as_slice()[k])
                .unwrap_or(false);
            if !masked {
                out.as_mut_slice()[k] = num[k] / den[k];
            }
        }
    }
    Ok(out)
}
