//! A small stand-in lane detector: four 3x3 convolutions producing a
//! per-pixel lane-marking logit, plus extraction of lane centerlines from
//! the thresholded segmentation.
//!
//! The detector exists so attacks and the verification pipeline have a
//! differentiable victim to work against; it is deliberately plain.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{relu_backward, relu_forward, Conv2d};
use super::{NeuralError, Tensor};
use crate::geometry::{Lane, LaneLabel};
use crate::img::{BitMap, Plane, SceneImage};

/// Channel plan: 3 -> 8 -> 16 -> 8 -> 1, all 3x3 stride 1 pad 1,
/// ReLU between layers, raw logits out.
const CHANNELS: [(usize, usize); 4] = [(3, 8), (8, 16), (16, 8), (8, 1)];

#[derive(Debug, Clone)]
pub struct ToyDetector {
    pub convs: Vec<Conv2d>,
}

/// Activations kept for the backward passes: the input and each
/// post-ReLU feature map.
pub struct DetectorCache {
    x: Tensor,
    relus: Vec<Tensor>,
}

impl DetectorCache {
    /// On/off pattern of every hidden ReLU unit in this forward pass. Two
    /// inputs with different patterns sit on different linear pieces of the
    /// network, so finite differences across them are not meaningful.
    pub fn relu_mask(&self) -> Vec<bool> {
        self.relus
            .iter()
            .flat_map(|t| t.data().iter().map(|&v| v > 0.0))
            .collect()
    }
}

/// Packs a scene into a [1, 3, h, w] tensor.
pub fn scene_to_tensor(img: &SceneImage) -> Tensor {
    let (h, w) = (img.h(), img.w());
    let mut data = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        data.extend_from_slice(img.channel(c).as_slice());
    }
    Tensor::from_vec(&[1, 3, h, w], data).expect("scene shape")
}

/// Unpacks a [1, 3, h, w] tensor into a scene image.
pub fn tensor_to_scene(t: &Tensor) -> SceneImage {
    let s = t.shape();
    assert!(s.len() == 4 && s[0] == 1 && s[1] == 3, "expected [1,3,h,w]");
    let (h, w) = (s[2], s[3]);
    let mut img = SceneImage::zeros(h, w);
    for c in 0..3 {
        let src = &t.data()[c * h * w..(c + 1) * h * w];
        img.channel_mut(c).as_mut_slice().copy_from_slice(src);
    }
    img
}

impl ToyDetector {
    pub const KIND: &'static str = "detector";
    /// Segmentation probability above which a pixel counts as lane marking.
    pub const THRESHOLD: f64 = 0.5;
    /// Minimum row span for an extracted component to count as a lane.
    pub const MIN_SPAN: usize = 30;

    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs = CHANNELS
            .iter()
            .map(|&(ci, co)| Conv2d::new(ci, co, 3, 1, 1, &mut rng))
            .collect();
        ToyDetector { convs }
    }

    /// Forward over an [n, 3, h, w] batch; logits are [n, 1, h, w].
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, DetectorCache), NeuralError> {
        let mut relus = Vec::with_capacity(3);
        let mut cur = self.convs[0].forward(x)?;
        for conv in &self.convs[1..] {
            let r = relu_forward(&cur);
            cur = conv.forward(&r)?;
            relus.push(r);
        }
        Ok((
            cur,
            DetectorCache {
                x: x.clone(),
                relus,
            },
        ))
    }

    /// Parameter gradients (conv weight/bias pairs in layer order) and the
    /// input gradient.
    pub fn backward(
        &self,
        cache: &DetectorCache,
        glogits: &Tensor,
    ) -> Result<(Vec<Tensor>, Tensor), NeuralError> {
        let mut grads = vec![Tensor::zeros(&[0]); self.convs.len() * 2];
        let mut g = glogits.clone();
        for li in (0..self.convs.len()).rev() {
            let input = if li == 0 { &cache.x } else { &cache.relus[li - 1] };
            let (dw, db, dx) = self.convs[li].backward(input, &g, true)?;
            grads[li * 2] = dw;
            grads[li * 2 + 1] = db;
            let mut dx = dx.expect("dx requested");
            if li > 0 {
                dx = relu_backward(&cache.relus[li - 1], &dx);
            }
            g = dx;
        }
        Ok((grads, g))
    }

    /// Input gradient only; used by attacks, which never update the
    /// detector.
    pub fn backward_input(
        &self,
        cache: &DetectorCache,
        glogits: &Tensor,
    ) -> Result<Tensor, NeuralError> {
        let s = cache.x.shape();
        let hw = (s[2], s[3]);
        let mut g = glogits.clone();
        for li in (0..self.convs.len()).rev() {
            let mut dx = self.convs[li].backward_input_only(hw, &g)?;
            if li > 0 {
                dx = relu_backward(&cache.relus[li - 1], &dx);
            }
            g = dx;
        }
        Ok(g)
    }

    /// Per-pixel lane-marking logits for one scene.
    pub fn forward_scene(&self, img: &SceneImage) -> Result<(Plane, DetectorCache), NeuralError> {
        let x = scene_to_tensor(img);
        let (logits, cache) = self.forward(&x)?;
        let plane = Plane::from_vec(img.h(), img.w(), logits.into_vec())
            .expect("logit plane shape");
        Ok((plane, cache))
    }

    /// Segmentation probabilities and extracted lane centerlines.
    pub fn detect(&self, img: &SceneImage) -> Result<(Plane, Vec<Lane>), NeuralError> {
        let (mut probs, _) = self.forward_scene(img)?;
        probs.map_inplace(super::loss::sigmoid);
        let lanes = extract_lanes(&probs, Self::THRESHOLD, Self::MIN_SPAN);
        Ok((probs, lanes))
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        self.convs
            .iter_mut()
            .flat_map(|c| [&mut c.weight, &mut c.bias])
            .collect()
    }

    pub fn state(&self) -> Vec<(String, &Tensor)> {
        self.convs
            .iter()
            .enumerate()
            .flat_map(|(i, c)| {
                [
                    (format!("conv{}.weight", i + 1), &c.weight),
                    (format!("conv{}.bias", i + 1), &c.bias),
                ]
            })
            .collect()
    }

    pub fn state_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.convs
            .iter_mut()
            .enumerate()
            .flat_map(|(i, c)| {
                [
                    (format!("conv{}.weight", i + 1), &mut c.weight),
                    (format!("conv{}.bias", i + 1), &mut c.bias),
                ]
            })
            .collect()
    }
}

/// Pixels with probability above `threshold`.
pub fn seg_from_probs(probs: &Plane, threshold: f64) -> BitMap {
    let mut seg = BitMap::zeros(probs.h(), probs.w());
    for y in 0..probs.h() {
        for x in 0..probs.w() {
            if probs.get(y, x) > threshold {
                seg.set(y, x, true);
            }
        }
    }
    seg
}

/// Groups above-threshold pixels into 8-connected components, reduces each
/// component to one centerline point per row (mean column), and keeps
/// components spanning at least `min_span` rows. Lanes are ordered by their
/// bottom-row x position.
pub fn extract_lanes(probs: &Plane, threshold: f64, min_span: usize) -> Vec<Lane> {
    let (h, w) = (probs.h(), probs.w());
    let mask = seg_from_probs(probs, threshold);
    let mut visited = vec![false; h * w];
    let mut lanes: Vec<Lane> = Vec::new();

    for sy in 0..h {
        for sx in 0..w {
            if !mask.get(sy, sx) || visited[sy * w + sx] {
                continue;
            }
            // BFS over the component, accumulating per-row column sums.
            let mut row_sum = vec![0.0f64; h];
            let mut row_cnt = vec![0u32; h];
            let mut queue = vec![(sy, sx)];
            visited[sy * w + sx] = true;
            while let Some((y, x)) = queue.pop() {
                row_sum[y] += x as f64;
                row_cnt[y] += 1;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dy == 0 && dx == 0 {
                            continue;
                        }
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny < 0 || ny >= h as i64 || nx < 0 || nx >= w as i64 {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if mask.get(ny, nx) && !visited[ny * w + nx] {
                            visited[ny * w + nx] = true;
                            queue.push((ny, nx));
                        }
                    }
                }
            }
            let samples: Vec<(i32, f64)> = (0..h)
                .filter(|&y| row_cnt[y] > 0)
                .map(|y| (y as i32, row_sum[y] / row_cnt[y] as f64))
                .collect();
            let span = (samples.last().unwrap().0 - samples[0].0 + 1) as usize;
            if span < min_span {
                continue;
            }
            lanes.push(Lane::new(samples, LaneLabel::Unknown).expect("rows ascend by construction"));
        }
    }
    lanes.sort_by(|a, b| a.bottom_x().total_cmp(&b.bottom_x()));
    lanes
}

/// Mean intersection-over-union of thresholded detections against ground
/// truth segmentation over a set of scenes. Training diagnostic.
pub fn detector_seg_iou(det: &ToyDetector, scenes: &[(SceneImage, BitMap)]) -> f64 {
    let mut total = 0.0;
    for (img, seg) in scenes {
        let (mut probs, _) = det.forward_scene(img).expect("scene shapes are fixed");
        probs.map_inplace(super::loss::sigmoid);
        let pred = seg_from_probs(&probs, ToyDetector::THRESHOLD);
        let inter = pred.intersection_count(seg) as f64;
        let mut union = pred.clone();
        union.union_with(seg);
        let u = union.count_ones() as f64;
        total += if u == 0.0 { 1.0 } else { inter / u };
    }
    total / scenes.len() as f64
}
