//! Command-line harness around the lane-sentinel library: dataset
//! generation, model training, attacks, evaluation, benchmarking, and a
//! one-shot driver that runs the whole experiment.
//!
//! Every command writes its artifact plus a `.meta.json` sidecar carrying
//! the resolved config hash, the seed, and wall time. Artifacts themselves
//! contain no clocks or absolute paths, so identical invocations produce
//! identical bytes (per-record attack timings are the documented exception,
//! stored in a `wall_ms` field).

pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;
pub mod jobs;
pub mod meta;
pub mod svg;
