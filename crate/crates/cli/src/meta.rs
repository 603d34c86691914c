use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, json_err, CliError};

/// Sidecar written next to every artifact: which command produced it, under
/// which resolved config, from which seed, and how long it took. Wall time
/// lives here and only here, so the artifacts themselves stay byte-identical
/// across reruns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub wall_ms: u64,
    /// Command-specific extras (counts, scores); nothing time-dependent.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub extra: serde_json::Value,
}

/// `<artifact>.meta.json` for files, `<dir>/<command>.meta.json` for
/// directory artifacts.
pub fn meta_path(artifact: &Path, command: &str) -> PathBuf {
    if artifact.is_dir() {
        artifact.join(format!("{command}.meta.json"))
    } else {
        let mut name = artifact
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| command.to_string());
        name.push_str(".meta.json");
        artifact.with_file_name(name)
    }
}

pub fn write_meta(artifact: &Path, meta: &RunMeta) -> Result<PathBuf, CliError> {
    let path = meta_path(artifact, &meta.command);
    let mut text = serde_json::to_string_pretty(meta).map_err(|e| json_err(&path, e))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    Ok(path)
}

/// Milliseconds since `start`, saturating to at least 0.
pub fn elapsed_ms(start: Instant) -> u64 {
    start.elapsed().as_millis() as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_artifacts_get_a_suffixed_sidecar() {
        let p = meta_path(Path::new("/tmp/out/results.jsonl"), "attack");
        assert_eq!(p, Path::new("/tmp/out/results.jsonl.meta.json"));
    }

    #[test]
    fn sidecars_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let artifact = dir.path().join("model.bin");
        std::fs::write(&artifact, b"x").unwrap();
        let meta = RunMeta {
            command: "train".into(),
            config_hash: "abc".into(),
            seed: 7,
            wall_ms: 12,
            extra: serde_json::json!({"role": "verifier"}),
        };
        let path = write_meta(&artifact, &meta).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        let back: RunMeta = serde_json::from_str(&text).unwrap();
        assert_eq!(back.config_hash, "abc");
        assert_eq!(back.extra["role"], "verifier");
    }
}
