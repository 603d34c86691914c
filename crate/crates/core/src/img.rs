//! Image primitives shared across the crate: single-channel planes, RGB scene
//! images, binary maps, bilinear sampling, and PNG round-trips.
//!
//! Coordinates are (row, col) = (y, x) with row 0 at the top. Fractional
//! coordinates are valid on [0, h-1] x [0, w-1]; anything outside is
//! out-of-image. Pixel values are f64 in [0, 1] unless a function says
//! otherwise (gradients and deltas may be any finite value).

use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Rec. 601 luma weights for collapsing RGB to grayscale.
pub const LUMA_R: f64 = 0.299;
pub const LUMA_G: f64 = 0.587;
pub const LUMA_B: f64 = 0.114;

#[derive(Debug, Error)]
pub enum ImgError {
    #[error("plane shape mismatch: expected {expected_h}x{expected_w}, got {got_h}x{got_w}")]
    ShapeMismatch {
        expected_h: usize,
        expected_w: usize,
        got_h: usize,
        got_w: usize,
    },
    #[error("data length {len} does not match {h}x{w}")]
    BadLength { len: usize, h: usize, w: usize },
    #[error("png io failed for {path}: {source}")]
    Png {
        path: String,
        source: image::ImageError,
    },
    #[error("png at {path} is {got_h}x{got_w}, expected {expected_h}x{expected_w}")]
    PngShape {
        path: String,
        expected_h: usize,
        expected_w: usize,
        got_h: usize,
        got_w: usize,
    },
}

/// A single-channel f64 image, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Plane {
    pub fn zeros(h: usize, w: usize) -> Self {
        Plane {
            h,
            w,
            data: vec![0.0; h * w],
        }
    }

    pub fn filled(h: usize, w: usize, v: f64) -> Self {
        Plane {
            h,
            w,
            data: vec![v; h * w],
        }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<f64>) -> Result<Self, ImgError> {
        if data.len() != h * w {
            return Err(ImgError::BadLength {
                len: data.len(),
                h,
                w,
            });
        }
        Ok(Plane { h, w, data })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.w + x] = v;
    }

    #[inline]
    pub fn row(&self, y: usize) -> &[f64] {
        &self.data[y * self.w..(y + 1) * self.w]
    }

    #[inline]
    pub fn row_mut(&mut self, y: usize) -> &mut [f64] {
        &mut self.data[y * self.w..(y + 1) * self.w]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// True when (yf, xf) lies inside the sampleable domain [0,h-1]x[0,w-1].
    #[inline]
    pub fn in_bounds(&self, yf: f64, xf: f64) -> bool {
        yf >= 0.0 && xf >= 0.0 && yf <= (self.h - 1) as f64 && xf <= (self.w - 1) as f64
    }

    /// Bilinear sample at a fractional coordinate; None outside the image.
    #[inline]
    pub fn bilinear(&self, yf: f64, xf: f64) -> Option<f64> {
        if !self.in_bounds(yf, xf) {
            return None;
        }
        let (y0, x0, fy, fx) = bilinear_cell(yf, xf, self.h, self.w);
        let y1 = (y0 + 1).min(self.h - 1);
        let x1 = (x0 + 1).min(self.w - 1);
        let v00 = self.get(y0, x0);
        let v01 = self.get(y0, x1);
        let v10 = self.get(y1, x0);
        let v11 = self.get(y1, x1);
        Some(
            v00 * (1.0 - fy) * (1.0 - fx)
                + v01 * (1.0 - fy) * fx
                + v10 * fy * (1.0 - fx)
                + v11 * fy * fx,
        )
    }

    pub fn map_inplace(&mut self, f: impl Fn(f64) -> f64) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    pub fn clamp01(&mut self) {
        self.map_inplace(|v| v.clamp(0.0, 1.0));
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Integer cell and fractional offsets for bilinear interpolation.
/// The caller guarantees in-bounds coordinates.
#[inline]
pub fn bilinear_cell(yf: f64, xf: f64, h: usize, w: usize) -> (usize, usize, f64, f64) {
    let mut y0 = yf.floor() as usize;
    let mut x0 = xf.floor() as usize;
    // Exact upper edge keeps the cell inside the image with fraction 1.
    if y0 >= h - 1 {
        y0 = h.saturating_sub(2).min(y0);
        if h == 1 {
            y0 = 0;
        }
    }
    if x0 >= w - 1 {
        x0 = w.saturating_sub(2).min(x0);
        if w == 1 {
            x0 = 0;
        }
    }
    let fy = (yf - y0 as f64).clamp(0.0, 1.0);
    let fx = (xf - x0 as f64).clamp(0.0, 1.0);
    (y0, x0, fy, fx)
}

/// A three-channel RGB image stored as channel-major planes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneImage {
    h: usize,
    w: usize,
    planes: Vec<Plane>,
}

impl SceneImage {
    pub fn zeros(h: usize, w: usize) -> Self {
        SceneImage {
            h,
            w,
            planes: vec![Plane::zeros(h, w); 3],
        }
    }

    pub fn from_planes(planes: [Plane; 3]) -> Result<Self, ImgError> {
        let (h, w) = (planes[0].h(), planes[0].w());
        for p in &planes {
            if p.h() != h || p.w() != w {
                return Err(ImgError::ShapeMismatch {
                    expected_h: h,
                    expected_w: w,
                    got_h: p.h(),
                    got_w: p.w(),
                });
            }
        }
        Ok(SceneImage {
            h,
            w,
            planes: planes.to_vec(),
        })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn channel(&self, c: usize) -> &Plane {
        &self.planes[c]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut Plane {
        &mut self.planes[c]
    }

    pub fn channels(&self) -> &[Plane] {
        &self.planes
    }

    /// Grayscale luminance at integer coordinates.
    #[inline]
    pub fn luminance(&self, y: usize, x: usize) -> f64 {
        LUMA_R * self.planes[0].get(y, x)
            + LUMA_G * self.planes[1].get(y, x)
            + LUMA_B * self.planes[2].get(y, x)
    }

    /// The canonical bilinear luminance sample used by lane stabilization.
    /// Out-of-image coordinates return None.
    #[inline]
    pub fn sample_luminance(&self, yf: f64, xf: f64) -> Option<f64> {
        if !self.planes[0].in_bounds(yf, xf) {
            return None;
        }
        let (y0, x0, fy, fx) = bilinear_cell(yf, xf, self.h, self.w);
        let y1 = (y0 + 1).min(self.h - 1);
        let x1 = (x0 + 1).min(self.w - 1);
        let lum = |y: usize, x: usize| self.luminance(y, x);
        Some(
            lum(y0, x0) * (1.0 - fy) * (1.0 - fx)
                + lum(y0, x1) * (1.0 - fy) * fx
                + lum(y1, x0) * fy * (1.0 - fx)
                + lum(y1, x1) * fy * fx,
        )
    }

    pub fn luminance_plane(&self) -> Plane {
        let mut p = Plane::zeros(self.h, self.w);
        for y in 0..self.h {
            for x in 0..self.w {
                p.set(y, x, self.luminance(y, x));
            }
        }
        p
    }

    pub fn clamp01(&mut self) {
        for p in &mut self.planes {
            p.clamp01();
        }
    }

    /// Largest |self - other| over all channels and pixels.
    pub fn linf_distance(&self, other: &SceneImage) -> f64 {
        let mut m = 0.0f64;
        for c in 0..3 {
            for (a, b) in self.planes[c]
                .as_slice()
                .iter()
                .zip(other.planes[c].as_slice())
            {
                m = m.max((a - b).abs());
            }
        }
        m
    }

    /// Adds the same delta plane to every channel, without clamping.
    pub fn add_to_all_channels(&mut self, delta: &Plane) -> Result<(), ImgError> {
        if delta.h() != self.h || delta.w() != self.w {
            return Err(ImgError::ShapeMismatch {
                expected_h: self.h,
                expected_w: self.w,
                got_h: delta.h(),
                got_w: delta.w(),
            });
        }
        for p in &mut self.planes {
            for (v, d) in p.as_mut_slice().iter_mut().zip(delta.as_slice()) {
                *v += d;
            }
        }
        Ok(())
    }
}

/// A binary per-pixel map (segmentation masks, patch masks).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitMap {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl BitMap {
    pub fn zeros(h: usize, w: usize) -> Self {
        BitMap {
            h,
            w,
            data: vec![false; h * w],
        }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.w + x] = v;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn union_with(&mut self, other: &BitMap) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a || *b;
        }
    }

    /// Pixels set in both maps.
    pub fn intersection_count(&self, other: &BitMap) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(a, b)| **a && **b)
            .count()
    }
}

/// Writes a grayscale plane as an 8-bit PNG. Values are clamped to [0, 1]
/// and quantized to 1/255 steps.
pub fn save_gray_png(plane: &Plane, path: &Path) -> Result<(), ImgError> {
    let mut buf = image::GrayImage::new(plane.w() as u32, plane.h() as u32);
    for y in 0..plane.h() {
        for x in 0..plane.w() {
            let v = (plane.get(y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
            buf.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    buf.save(path).map_err(|source| ImgError::Png {
        path: path.display().to_string(),
        source,
    })
}

/// Reads an 8-bit grayscale PNG back into a plane with values k/255.
pub fn load_gray_png(path: &Path) -> Result<Plane, ImgError> {
    let img = image::open(path)
        .map_err(|source| ImgError::Png {
            path: path.display().to_string(),
            source,
        })?
        .into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut plane = Plane::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            plane.set(y, x, img.get_pixel(x as u32, y as u32)[0] as f64 / 255.0);
        }
    }
    Ok(plane)
}

/// Writes an RGB scene as an 8-bit PNG (clamped, 1/255 quantization).
pub fn save_rgb_png(scene: &SceneImage, path: &Path) -> Result<(), ImgError> {
    let mut buf = image::RgbImage::new(scene.w() as u32, scene.h() as u32);
    for y in 0..scene.h() {
        for x in 0..scene.w() {
            let px = [
                (scene.channel(0).get(y, x).clamp(0.0, 1.0) * 255.0).round() as u8,
                (scene.channel(1).get(y, x).clamp(0.0, 1.0) * 255.0).round() as u8,
                (scene.channel(2).get(y, x).clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path).map_err(|source| ImgError::Png {
        path: path.display().to_string(),
        source,
    })
}

/// Reads an 8-bit RGB PNG back into a scene with values k/255.
pub fn load_rgb_png(path: &Path) -> Result<SceneImage, ImgError> {
    let img = image::open(path)
        .map_err(|source| ImgError::Png {
            path: path.display().to_string(),
            source,
        })?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut scene = SceneImage::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                scene.channel_mut(c).set(y, x, px[c] as f64 / 255.0);
            }
        }
    }
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_matches_corners_and_center() {
        let p = Plane::from_vec(2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(p.bilinear(0.0, 0.0), Some(0.0));
        assert_eq!(p.bilinear(0.0, 1.0), Some(1.0));
        assert_eq!(p.bilinear(1.0, 0.0), Some(2.0));
        assert_eq!(p.bilinear(1.0, 1.0), Some(3.0));
        assert_eq!(p.bilinear(0.5, 0.5), Some(1.5));
    }

    #[test]
    fn bilinear_outside_is_none() {
        let p = Plane::zeros(4, 4);
        assert_eq!(p.bilinear(-0.001, 0.0), None);
        assert_eq!(p.bilinear(0.0, 3.0001), None);
        assert_eq!(p.bilinear(3.0, 3.0), Some(0.0));
    }

    #[test]
    fn luminance_uses_rec601_weights() {
        let mut s = SceneImage::zeros(1, 1);
        s.channel_mut(0).set(0, 0, 1.0);
        s.channel_mut(1).set(0, 0, 1.0);
        s.channel_mut(2).set(0, 0, 1.0);
        assert!((s.luminance(0, 0) - 1.0).abs() < 1e-12, "weights must sum to 1");
        let mut r = SceneImage::zeros(1, 1);
        r.channel_mut(0).set(0, 0, 1.0);
        assert!((r.luminance(0, 0) - LUMA_R).abs() < 1e-12);
    }

    #[test]
    fn gray_png_roundtrip_quantizes_to_1_over_255() {
        let dir = std::env::temp_dir().join("lane_sentinel_img_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.png");
        let mut p = Plane::zeros(3, 5);
        for y in 0..3 {
            for x in 0..5 {
                p.set(y, x, (y * 5 + x) as f64 / 14.0);
            }
        }
        save_gray_png(&p, &path).unwrap();
        let q = load_gray_png(&path).unwrap();
        for y in 0..3 {
            for x in 0..5 {
                let expect = (p.get(y, x) * 255.0).round() / 255.0;
                assert!((q.get(y, x) - expect).abs() < 1e-12);
            }
        }
        std::fs::remove_file(&path).ok();
    }
}
