//! From-scratch neural components: a dense f64 tensor, conv / batchnorm /
//! linear layers with hand-derived backward passes, focal and binary
//! cross-entropy losses, the lane verifier models, the toy segmentation
//! detector, SGD training loops, and a small binary model-file format.
//!
//! Everything is deterministic: parameter init, shuffling, and adversarial
//! example generation all derive from explicit seeds, and no operation
//! depends on thread count.

mod detector;
mod io;
mod layers;
mod loss;
mod train;
mod verifier;

pub use detector::{
    detector_seg_iou, extract_lanes, scene_to_tensor, seg_from_probs, tensor_to_scene,
    DetectorCache, ToyDetector,
};
pub use io::{
    load_detector, load_model_file, load_verifier, save_detector, save_model_file, save_verifier,
    ModelFile, TensorMeta, MODEL_MAGIC,
};
pub use layers::{relu_backward, relu_forward, BatchNorm2d, BnCache, Conv2d, Linear};
pub use loss::{bce_with_logits_mean, focal_loss, sigmoid, FocalParams};
pub use train::{
    train_detector, train_verifier, DetectorTrainConfig, DetectorTrainReport, EpochStats,
    TrainConfig, TrainReport,
};
pub use verifier::{batch_from_planes, LinearVerifier, VerifierCache, VerifierModel, VerifierNet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("training split has no {0} examples")]
    EmptyClass(String),
    #[error("non-finite value produced in {0}")]
    NonFinite(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("incompatible model file: {0}")]
    BadModelFile(String),
}

/// Whether a forward pass uses batch statistics (Train) or running
/// statistics (Eval) in BatchNorm layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// A dense row-major f64 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self, NeuralError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NeuralError::ShapeMismatch {
                context: "Tensor::from_vec".into(),
                expected: shape.to_vec(),
                got: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Tensor::zeros(&other.shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self, NeuralError> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(NeuralError::ShapeMismatch {
                context: "Tensor::reshaped".into(),
                expected: shape.to_vec(),
                got: self.shape.clone(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// self += other (shapes must match).
    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }
}

/// expected/got helper for layer input checks.
pub(crate) fn check_shape(
    context: &str,
    expected: &[usize],
    got: &[usize],
) -> Result<(), NeuralError> {
    if expected != got {
        return Err(NeuralError::ShapeMismatch {
            context: context.into(),
            expected: expected.to_vec(),
            got: got.to_vec(),
        });
    }
    Ok(())
}

/// SGD with momentum: v <- momentum * v + g; p <- p - lr * v.
pub fn sgd_step(params: &mut [&mut Tensor], grads: &[Tensor], velocity: &mut [Tensor], lr: f64, momentum: f64) {
    debug_assert_eq!(params.len(), grads.len());
    debug_assert_eq!(params.len(), velocity.len());
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for ((pv, gv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(v.data_mut().iter_mut())
        {
            *vv = momentum * *vv + gv;
            *pv -= lr * *vv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_checks() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::zeros(&[2, 3]);
        assert!(t.clone().reshaped(&[3, 2]).is_ok());
        assert!(t.reshaped(&[4, 2]).is_err());
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut p = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let g = Tensor::from_vec(&[1], vec![0.5]).unwrap();
        let mut v = vec![Tensor::zeros(&[1])];
        sgd_step(&mut [&mut p], &[g.clone()], &mut v, 0.1, 0.9);
        assert!((p.data()[0] - 0.95).abs() < 1e-12);
        sgd_step(&mut [&mut p], &[g], &mut v, 0.1, 0.9);
        // v = 0.9*0.5 + 0.5 = 0.95; p = 0.95 - 0.095
        assert!((p.data()[0] - 0.855).abs() < 1e-12);
    }
}
