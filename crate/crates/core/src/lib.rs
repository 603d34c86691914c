//! lane-sentinel: a desk-scale, model-agnostic defense for lane detection.
//!
//! The crate turns each detected lane into a canonical, perspective-free
//! grayscale image (stabilization), scores it with a small trained verifier
//! (real vs. planted), and flags lanes whose score exceeds a threshold
//! calibrated to a target false-positive rate. Synthetic road scenes, a toy
//! segmentation detector, gradient attacks (bounded, patch, adaptive
//! two-stage), and defense metrics (FPR / FNR / IoU / ROC / timing) make the
//! whole loop reproducible end to end on a laptop CPU.
//!
//! Modules:
//! - [`img`]: image planes, bilinear sampling, PNG round-trips
//! - [`geometry`]: lane fitting, curve frames, stabilization, write-back
//! - [`scene`]: synthetic scene generation and fake-lane synthesis
//! - [`dataset`]: stabilized-lane corpus construction and manifests
//! - [`neural`]: tensors, layers, the verifier models, the toy detector,
//!   losses, training, model files
//! - [`attack`]: PGD core and the bounded / patch / adaptive attacks
//! - [`metrics`]: IoU, threshold calibration, ROC/AUC, defense evaluation,
//!   runtime overhead benchmarking
//! - [`pipeline`]: the detector-agnostic verify-scene entry point

pub mod attack;
pub mod dataset;
pub mod geometry;
pub mod img;
pub mod metrics;
pub mod neural;
pub mod pipeline;
pub mod scene;
