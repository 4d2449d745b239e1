use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const GIT_DESCRIBE: &str = env!("CHRONICLE_GIT_DESCRIBE");

/// Record of one subcommand run, written next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub version: String,
    pub git_describe: String,
    pub seed: u64,
    pub threads: Option<usize>,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub started_at: String,
    pub wall_clock_secs: f64,
}

pub struct ManifestBuilder {
    manifest: RunManifest,
    start: Instant,
}

impl ManifestBuilder {
    pub fn new(subcommand: &str, seed: u64, threads: Option<usize>, config: serde_json::Value) -> Self {
        ManifestBuilder {
            manifest: RunManifest {
                subcommand: subcommand.to_string(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                git_describe: GIT_DESCRIBE.to_string(),
                seed,
                threads,
                config,
                inputs: BTreeMap::new(),
                outputs: Vec::new(),
                started_at: chrono::Utc::now().to_rfc3339(),
                wall_clock_secs: 0.0,
            },
            start: Instant::now(),
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) -> &mut Self {
        self.manifest.inputs.insert(name.to_string(), path.to_path_buf());
        self
    }

    pub fn output(&mut self, path: &Path) -> &mut Self {
        self.manifest.outputs.push(path.to_path_buf());
        self
    }

    /// Writes `manifest.json` into `dir` via a temporary file and rename.
    pub fn finish(mut self, dir: &Path) -> anyhow::Result<RunManifest> {
        self.manifest.wall_clock_secs = self.start.elapsed().as_secs_f64();
        let text = serde_json::to_string_pretty(&self.manifest)? + "\n";
        write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())?;
        Ok(self.manifest)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let name = path.file_name().context("output path has no file name")?.to_string_lossy();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_lands_atomically() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = ManifestBuilder::new("synth", 7, Some(1), serde_json::json!({"a": 1}));
        b.input("events", Path::new("in.jsonl")).output(Path::new("out.jsonl"));
        let m = b.finish(dir.path()).unwrap();
        let back: RunManifest =
            serde_json::from_str(&fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.seed, 7);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
