//! Binary model files: a magic string, one JSON header line describing the
//! tensors, then raw little-endian f32 blocks in header order.
//!
//! Parameters are f64 in memory and f32 on disk; loading a saved model and
//! saving it again reproduces the file byte for byte.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::detector::ToyDetector;
use super::verifier::VerifierNet;
use super::{NeuralError, Tensor};

pub const MODEL_MAGIC: &[u8] = b"LSNT1\n";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset of this tensor's block, counted from the end of the
    /// header line.
    pub offset: usize,
    /// Block length in bytes (4 per element).
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub kind: String,
    pub dtype: String,
    pub config_hash: String,
    pub tensors: Vec<TensorMeta>,
}

fn io_err(path: &Path, source: std::io::Error) -> NeuralError {
    NeuralError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save_model_file(
    path: &Path,
    kind: &str,
    config_hash: &str,
    tensors: &[(&str, &Tensor)],
) -> Result<(), NeuralError> {
    let mut metas = Vec::with_capacity(tensors.len());
    let mut offset = 0usize;
    for (name, t) in tensors {
        let len = t.numel() * 4;
        metas.push(TensorMeta {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            len,
        });
        offset += len;
    }
    let header = ModelFile {
        kind: kind.to_string(),
        dtype: "f32le".to_string(),
        config_hash: config_hash.to_string(),
        tensors: metas,
    };
    let header_json = serde_json::to_string(&header)
        .map_err(|e| NeuralError::BadModelFile(format!("header encode: {e}")))?;

    let mut out = Vec::with_capacity(MODEL_MAGIC.len() + header_json.len() + 1 + offset);
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(header_json.as_bytes());
    out.push(b'\n');
    for (_, t) in tensors {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&out).map_err(|e| io_err(path, e))
}

pub fn load_model_file(path: &Path) -> Result<(ModelFile, Vec<(String, Tensor)>), NeuralError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if !bytes.starts_with(MODEL_MAGIC) {
        return Err(NeuralError::BadModelFile(format!(
            "{}: bad magic",
            path.display()
        )));
    }
    let rest = &bytes[MODEL_MAGIC.len()..];
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| NeuralError::BadModelFile(format!("{}: missing header", path.display())))?;
    let header: ModelFile = serde_json::from_slice(&rest[..nl])
        .map_err(|e| NeuralError::BadModelFile(format!("{}: header: {e}", path.display())))?;
    if header.dtype != "f32le" {
        return Err(NeuralError::BadModelFile(format!(
            "{}: unsupported dtype {}",
            path.display(),
            header.dtype
        )));
    }
    let blocks = &rest[nl + 1..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for meta in &header.tensors {
        let numel: usize = meta.shape.iter().product();
        if meta.len != numel * 4 || meta.offset + meta.len > blocks.len() {
            return Err(NeuralError::BadModelFile(format!(
                "{}: tensor {} out of bounds",
                path.display(),
                meta.name
            )));
        }
        let raw = &blocks[meta.offset..meta.offset + meta.len];
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        tensors.push((meta.name.clone(), Tensor::from_vec(&meta.shape, data)?));
    }
    Ok((header, tensors))
}

/// Copies loaded tensors into a model's state by name, requiring an exact
/// match of names and shapes.
fn apply_state(
    path: &Path,
    loaded: Vec<(String, Tensor)>,
    dest: &mut [(&str, &mut Tensor)],
) -> Result<(), NeuralError> {
    if loaded.len() != dest.len() {
        return Err(NeuralError::BadModelFile(format!(
            "{}: expected {} tensors, file has {}",
            path.display(),
            dest.len(),
            loaded.len()
        )));
    }
    let mut by_name: std::collections::HashMap<String, Tensor> = loaded.into_iter().collect();
    for (name, t) in dest.iter_mut() {
        let src = by_name.remove(*name).ok_or_else(|| {
            NeuralError::BadModelFile(format!("{}: missing tensor {}", path.display(), name))
        })?;
        if src.shape() != t.shape() {
            return Err(NeuralError::BadModelFile(format!(
                "{}: tensor {} shape {:?}, expected {:?}",
                path.display(),
                name,
                src.shape(),
                t.shape()
            )));
        }
        t.data_mut().copy_from_slice(src.data());
    }
    Ok(())
}

pub fn save_verifier<V: VerifierNet>(
    model: &V,
    config_hash: &str,
    path: &Path,
) -> Result<(), NeuralError> {
    let state = model.state();
    save_model_file(path, model.kind(), config_hash, &state)
}

/// Loads a verifier's tensors in place; returns the config hash recorded at
/// save time.
pub fn load_verifier<V: VerifierNet>(model: &mut V, path: &Path) -> Result<String, NeuralError> {
    let (header, tensors) = load_model_file(path)?;
    if header.kind != model.kind() {
        return Err(NeuralError::BadModelFile(format!(
            "{}: model kind {}, expected {}",
            path.display(),
            header.kind,
            model.kind()
        )));
    }
    let mut dest = model.state_mut();
    apply_state(path, tensors, &mut dest)?;
    Ok(header.config_hash)
}

pub fn save_detector(
    det: &ToyDetector,
    config_hash: &str,
    path: &Path,
) -> Result<(), NeuralError> {
    let state = det.state();
    let view: Vec<(&str, &Tensor)> = state.iter().map(|(n, t)| (n.as_str(), *t)).collect();
    save_model_file(path, ToyDetector::KIND, config_hash, &view)
}

pub fn load_detector(det: &mut ToyDetector, path: &Path) -> Result<String, NeuralError> {
    let (header, tensors) = load_model_file(path)?;
    if header.kind != ToyDetector::KIND {
        return Err(NeuralError::BadModelFile(format!(
            "{}: model kind {}, expected {}",
            path.display(),
            header.kind,
            ToyDetector::KIND
        )));
    }
    let mut state = det.state_mut();
    let mut dest: Vec<(&str, &mut Tensor)> = Vec::with_capacity(state.len());
    for (n, t) in state.iter_mut() {
        dest.push((n.as_str(), t));
    }
    apply_state(path, tensors, &mut dest)?;
    Ok(header.config_hash)
}
