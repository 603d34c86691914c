//! Lane verifier models. A verifier maps a stabilized lane image to one
//! logit; sigmoid of that logit is the predicted probability that the lane
//! is fake.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{relu_backward, relu_forward, BatchNorm2d, BnCache, Conv2d, Linear};
use super::loss::sigmoid;
use super::{check_shape, Mode, NeuralError, Tensor};
use crate::img::Plane;

/// Stacks single-channel images into an [n, 1, h, w] batch tensor.
pub fn batch_from_planes(imgs: &[&Plane], h: usize, w: usize) -> Result<Tensor, NeuralError> {
    let mut data = Vec::with_capacity(imgs.len() * h * w);
    for img in imgs {
        if img.h() != h || img.w() != w {
            return Err(NeuralError::ShapeMismatch {
                context: "batch_from_planes".into(),
                expected: vec![h, w],
                got: vec![img.h(), img.w()],
            });
        }
        data.extend_from_slice(img.as_slice());
    }
    Tensor::from_vec(&[imgs.len(), 1, h, w], data)
}

/// Common interface over verifier architectures.
///
/// `backward` returns parameter gradients in the same order as
/// [`VerifierNet::trainable`], plus the gradient wrt the input batch.
pub trait VerifierNet: Clone {
    type Cache;

    fn kind(&self) -> &'static str;
    /// Expected (height, width) of input images.
    fn input_hw(&self) -> (usize, usize);
    fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Vec<f64>, Self::Cache), NeuralError>;
    fn backward(&self, cache: &Self::Cache, dlogits: &[f64]) -> (Vec<Tensor>, Tensor);
    /// Folds batch statistics from a Train-mode forward into running stats.
    fn commit_batchnorm(&mut self, cache: &Self::Cache);
    fn trainable_mut(&mut self) -> Vec<&mut Tensor>;
    fn state(&self) -> Vec<(&'static str, &Tensor)>;
    fn state_mut(&mut self) -> Vec<(&'static str, &mut Tensor)>;

    /// Fake probabilities for a batch of stabilized lane images (Eval mode).
    fn score_planes(&self, imgs: &[&Plane]) -> Result<Vec<f64>, NeuralError> {
        let (h, w) = self.input_hw();
        let x = batch_from_planes(imgs, h, w)?;
        let (logits, _) = self.forward(&x, Mode::Eval)?;
        Ok(logits.into_iter().map(sigmoid).collect())
    }

    fn score_plane(&self, img: &Plane) -> Result<f64, NeuralError> {
        Ok(self.score_planes(&[img])?[0])
    }
}

/// Two-block convolutional verifier:
/// [n,1,128,40] -> conv 3x3 stride 3 -> BN -> ReLU -> [n,8,42,13]
///             -> conv 3x3 stride 3 -> BN -> ReLU -> [n,16,14,4]
///             -> linear 896 -> 1 logit.
#[derive(Debug, Clone)]
pub struct VerifierModel {
    pub in_h: usize,
    pub in_w: usize,
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub fc: Linear,
}

pub struct VerifierCache {
    x: Tensor,
    bc1: BnCache,
    r1: Tensor,
    bc2: BnCache,
    /// Post-ReLU activations of the second block, flattened to [n, flat].
    r2_flat: Tensor,
}

impl VerifierModel {
    pub const KIND: &'static str = "verifier-cnn";

    pub fn seeded(in_h: usize, in_w: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv1 = Conv2d::new(1, 8, 3, 3, 0, &mut rng);
        let bn1 = BatchNorm2d::new(8);
        let conv2 = Conv2d::new(8, 16, 3, 3, 0, &mut rng);
        let bn2 = BatchNorm2d::new(16);
        let (h1, w1) = conv1.out_hw(in_h, in_w);
        let (h2, w2) = conv2.out_hw(h1, w1);
        let flat = 16 * h2 * w2;
        let fc = Linear::new(flat, 1, &mut rng);
        VerifierModel {
            in_h,
            in_w,
            conv1,
            bn1,
            conv2,
            bn2,
            fc,
        }
    }

    fn flat_dim(&self) -> usize {
        self.fc.in_dim
    }
}

impl VerifierCache {
    /// On/off pattern of every hidden ReLU unit in this forward pass. Two
    /// inputs with different patterns sit on different linear pieces of the
    /// network, so finite differences across them are not meaningful.
    pub fn relu_mask(&self) -> Vec<bool> {
        self.r1
            .data()
            .iter()
            .chain(self.r2_flat.data())
            .map(|&v| v > 0.0)
            .collect()
    }
}

impl VerifierNet for VerifierModel {
    type Cache = VerifierCache;

    fn kind(&self) -> &'static str {
        Self::KIND
    }

    fn input_hw(&self) -> (usize, usize) {
        (self.in_h, self.in_w)
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Vec<f64>, VerifierCache), NeuralError> {
        let n = x.shape().first().copied().unwrap_or(0);
        check_shape("VerifierModel input", &[n, 1, self.in_h, self.in_w], x.shape())?;
        let c1 = self.conv1.forward(x)?;
        let (b1, bc1) = self.bn1.forward(&c1, mode)?;
        let r1 = relu_forward(&b1);
        let c2 = self.conv2.forward(&r1)?;
        let (b2, bc2) = self.bn2.forward(&c2, mode)?;
        let r2_flat = relu_forward(&b2).reshaped(&[n, self.flat_dim()])?;
        let logits = self.fc.forward(&r2_flat)?;
        Ok((
            logits.into_vec(),
            VerifierCache {
                x: x.clone(),
                bc1,
                r1,
                bc2,
                r2_flat,
            },
        ))
    }

    fn backward(&self, cache: &VerifierCache, dlogits: &[f64]) -> (Vec<Tensor>, Tensor) {
        let n = dlogits.len();
        let g = Tensor::from_vec(&[n, 1], dlogits.to_vec()).expect("dlogits shape");
        let (dw_fc, db_fc, dflat) = self.fc.backward(&cache.r2_flat, &g);
        let dr2 = relu_backward(&cache.r2_flat, &dflat);
        let s2 = cache.bc2.xhat.shape().to_vec();
        let dr2 = dr2.reshaped(&s2).expect("r2 shape");
        let (dg2, dbe2, dc2) = self.bn2.backward(&cache.bc2, &dr2);
        let (dw2, db2, dr1) = self
            .conv2
            .backward(&cache.r1, &dc2, true)
            .expect("conv2 backward");
        let dr1 = relu_backward(&cache.r1, &dr1.expect("dx requested"));
        let (dg1, dbe1, dc1) = self.bn1.backward(&cache.bc1, &dr1);
        let (dw1, db1, dx) = self
            .conv1
            .backward(&cache.x, &dc1, true)
            .expect("conv1 backward");
        (
            vec![dw1, db1, dg1, dbe1, dw2, db2, dg2, dbe2, dw_fc, db_fc],
            dx.expect("dx requested"),
        )
    }

    fn commit_batchnorm(&mut self, cache: &VerifierCache) {
        self.bn1.commit_running(&cache.bc1);
        self.bn2.commit_running(&cache.bc2);
    }

    fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.bn1.gamma,
            &mut self.bn1.beta,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
            &mut self.bn2.gamma,
            &mut self.bn2.beta,
            &mut self.fc.weight,
            &mut self.fc.bias,
        ]
    }

    fn state(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("conv1.weight", &self.conv1.weight),
            ("conv1.bias", &self.conv1.bias),
            ("bn1.gamma", &self.bn1.gamma),
            ("bn1.beta", &self.bn1.beta),
            ("bn1.running_mean", &self.bn1.running_mean),
            ("bn1.running_var", &self.bn1.running_var),
            ("conv2.weight", &self.conv2.weight),
            ("conv2.bias", &self.conv2.bias),
            ("bn2.gamma", &self.bn2.gamma),
            ("bn2.beta", &self.bn2.beta),
            ("bn2.running_mean", &self.bn2.running_mean),
            ("bn2.running_var", &self.bn2.running_var),
            ("fc.weight", &self.fc.weight),
            ("fc.bias", &self.fc.bias),
        ]
    }

    fn state_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("conv1.weight", &mut self.conv1.weight),
            ("conv1.bias", &mut self.conv1.bias),
            ("bn1.gamma", &mut self.bn1.gamma),
            ("bn1.beta", &mut self.bn1.beta),
            ("bn1.running_mean", &mut self.bn1.running_mean),
            ("bn1.running_var", &mut self.bn1.running_var),
            ("conv2.weight", &mut self.conv2.weight),
            ("conv2.bias", &mut self.conv2.bias),
            ("bn2.gamma", &mut self.bn2.gamma),
            ("bn2.beta", &mut self.bn2.beta),
            ("bn2.running_mean", &mut self.bn2.running_mean),
            ("bn2.running_var", &mut self.bn2.running_var),
            ("fc.weight", &mut self.fc.weight),
            ("fc.bias", &mut self.fc.bias),
        ]
    }
}

/// Single linear layer over the flattened image, as an ablation baseline.
#[derive(Debug, Clone)]
pub struct LinearVerifier {
    pub in_h: usize,
    pub in_w: usize,
    pub fc: Linear,
}

impl LinearVerifier {
    pub const KIND: &'static str = "verifier-linear";

    pub fn seeded(in_h: usize, in_w: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fc = Linear::new(in_h * in_w, 1, &mut rng);
        LinearVerifier { in_h, in_w, fc }
    }
}

impl VerifierNet for LinearVerifier {
    type Cache = Tensor;

    fn kind(&self) -> &'static str {
        Self::KIND
    }

    fn input_hw(&self) -> (usize, usize) {
        (self.in_h, self.in_w)
    }

    fn forward(&self, x: &Tensor, _mode: Mode) -> Result<(Vec<f64>, Tensor), NeuralError> {
        let n = x.shape().first().copied().unwrap_or(0);
        check_shape("LinearVerifier input", &[n, 1, self.in_h, self.in_w], x.shape())?;
        let flat = x.clone().reshaped(&[n, self.fc.in_dim])?;
        let logits = self.fc.forward(&flat)?;
        Ok((logits.into_vec(), flat))
    }

    fn backward(&self, cache: &Tensor, dlogits: &[f64]) -> (Vec<Tensor>, Tensor) {
        let n = dlogits.len();
        let g = Tensor::from_vec(&[n, 1], dlogits.to_vec()).expect("dlogits shape");
        let (dw, db, dx) = self.fc.backward(cache, &g);
        let dx = dx
            .reshaped(&[n, 1, self.in_h, self.in_w])
            .expect("input shape");
        (vec![dw, db], dx)
    }

    fn commit_batchnorm(&mut self, _cache: &Tensor) {}

    fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.fc.weight, &mut self.fc.bias]
    }

    fn state(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("fc.weight", &self.fc.weight), ("fc.bias", &self.fc.bias)]
    }

    fn state_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![("fc.weight", &mut self.fc.weight), ("fc.bias", &mut self.fc.bias)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verifier_shapes_line_up() {
        let m = VerifierModel::seeded(128, 40, 3);
        assert_eq!(m.flat_dim(), 896);
        let x = Tensor::zeros(&[2, 1, 128, 40]);
        let (logits, _) = m.forward(&x, Mode::Eval).unwrap();
        assert_eq!(logits.len(), 2);
    }

    #[test]
    fn zeroed_verifier_scores_half() {
        let mut m = VerifierModel::seeded(128, 40, 3);
        for t in m.trainable_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let img = Plane::filled(128, 40, 0.7);
        let s = m.score_plane(&img).unwrap();
        assert!((s - 0.5).abs() < 1e-12);
    }

    #[test]
    fn linear_verifier_input_gradient_is_weight_row() {
        let m = LinearVerifier::seeded(128, 40, 5);
        let x = Tensor::zeros(&[1, 1, 128, 40]);
        let (_, cache) = m.forward(&x, Mode::Eval).unwrap();
        let (_, dx) = m.backward(&cache, &[1.0]);
        for (a, b) in dx.data().iter().zip(m.fc.weight.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn batch_rejects_wrong_plane_size() {
        let img = Plane::filled(64, 40, 0.0);
        assert!(batch_from_planes(&[&img], 128, 40).is_err());
    }

    #[test]
    fn backward_grad_count_matches_trainable() {
        let mut m = VerifierModel::seeded(128, 40, 3);
        let x = Tensor::zeros(&[1, 1, 128, 40]);
        let (_, cache) = m.forward(&x, Mode::Train).unwrap();
        let (grads, _) = m.backward(&cache, &[1.0]);
        assert_eq!(grads.len(), m.trainable_mut().len());
        for (g, p) in grads.iter().zip(m.trainable_mut()) {
            assert_eq!(g.shape(), p.shape());
        }
    }
}
