mod attack;
mod bench;
mod eval;
mod gen_data;
mod train;

pub use attack::{
    cmd_attack, read_results, resolve_stab_path, AttackArgs, AttackMode, ResultsHeader,
    RESULTS_KIND,
};
pub use bench::{cmd_bench, BenchArgs};
pub use eval::{cmd_eval, CalibrationReport, EvalArgs, EvalReport};
pub use gen_data::cmd_gen_data;
pub use train::{cmd_train, Role};

use std::fs;
use std::path::Path;

use lane_sentinel::geometry::StabilizationConfig;
use lane_sentinel::img::Plane;
use lane_sentinel::neural::{
    load_detector, load_model_file, load_verifier, LinearVerifier, NeuralError, ToyDetector,
    VerifierModel, VerifierNet,
};

use crate::error::{io_err, CliError};

/// Either trained verifier, loaded by the kind string stored in the model
/// file, so commands work with whichever model a path points at.
#[derive(Debug, Clone)]
pub enum AnyVerifier {
    Cnn(VerifierModel),
    Linear(LinearVerifier),
}

impl AnyVerifier {
    /// Loads a verifier model file, returning the model and the config hash
    /// it was trained under.
    pub fn load(path: &Path, stab: &StabilizationConfig) -> Result<(Self, String), CliError> {
        let (header, _) = load_model_file(path)?;
        let (h, w) = (stab.out_height, stab.out_width);
        match header.kind.as_str() {
            VerifierModel::KIND => {
                let mut model = VerifierModel::seeded(h, w, 0);
                let hash = load_verifier(&mut model, path)?;
                Ok((AnyVerifier::Cnn(model), hash))
            }
            LinearVerifier::KIND => {
                let mut model = LinearVerifier::seeded(h, w, 0);
                let hash = load_verifier(&mut model, path)?;
                Ok((AnyVerifier::Linear(model), hash))
            }
            other => Err(CliError::Neural(NeuralError::BadModelFile(format!(
                "{}: unknown verifier kind {other:?}",
                path.display()
            )))),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            AnyVerifier::Cnn(_) => VerifierModel::KIND,
            AnyVerifier::Linear(_) => LinearVerifier::KIND,
        }
    }

    pub fn score_planes(&self, imgs: &[&Plane]) -> Result<Vec<f64>, NeuralError> {
        match self {
            AnyVerifier::Cnn(m) => m.score_planes(imgs),
            AnyVerifier::Linear(m) => m.score_planes(imgs),
        }
    }
}

/// Loads the detector together with the config hash it was trained under.
pub fn load_detector_file(path: &Path) -> Result<(ToyDetector, String), CliError> {
    let mut det = ToyDetector::seeded(0);
    let hash = load_detector(&mut det, path)?;
    Ok((det, hash))
}

/// Scores planes in bounded batches to keep the forward tensors small.
pub fn score_in_chunks(verifier: &AnyVerifier, imgs: &[&Plane]) -> Result<Vec<f64>, CliError> {
    let mut out = Vec::with_capacity(imgs.len());
    for chunk in imgs.chunks(256) {
        out.extend(verifier.score_planes(chunk)?);
    }
    Ok(out)
}

pub fn ensure_parent_dir(path: &Path) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
    }
    Ok(())
}

/// Writes pretty JSON with a trailing newline.
pub fn write_json_pretty<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    ensure_parent_dir(path)?;
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| crate::error::json_err(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}
