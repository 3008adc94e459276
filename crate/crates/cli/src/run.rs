//! Run manifests and content hashing of inputs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::CliConfig;
use crate::error::{CliError, CliResult};

/// Git-style blob hash: SHA-256 over `blob <len>\0<bytes>`.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

fn files_under(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for e in std::fs::read_dir(dir)? {
        let p = e?.path();
        if p.is_dir() {
            files_under(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

#[derive(Serialize)]
pub struct InputHash {
    pub path: String,
    pub hash: String,
}

/// Hashes `path` (every file below it, for a directory), plus the frame
/// sidecar directory when `path` is a manifest that has one.
pub fn hash_input(path: &Path) -> CliResult<Vec<InputHash>> {
    let mut files = Vec::new();
    if path.is_dir() {
        files_under(path, &mut files).map_err(|e| CliError::io(path, e))?;
    } else {
        files.push(path.to_path_buf());
        if let Some(stem) = path.file_stem() {
            let sidecar = path.with_file_name(format!("{}.frames", stem.to_string_lossy()));
            if sidecar.is_dir() {
                files_under(&sidecar, &mut files).map_err(|e| CliError::io(&sidecar, e))?;
            }
        }
    }
    files.sort();
    files
        .iter()
        .map(|f| {
            let bytes = std::fs::read(f).map_err(|e| CliError::io(f, e))?;
            Ok(InputHash {
                path: f.display().to_string(),
                hash: blob_hash(&bytes),
            })
        })
        .collect()
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config: &'a CliConfig,
    /// Tree-style hash over the per-file hashes below.
    input_hash: String,
    inputs: Vec<InputHash>,
    outputs: &'a [String],
    wall_time_secs: f64,
}

pub struct Run {
    pub command: &'static str,
    pub out_dir: PathBuf,
    start: Instant,
    inputs: Vec<InputHash>,
    outputs: Vec<String>,
}

impl Run {
    pub fn new(command: &'static str, out_dir: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
        Ok(Self {
            command,
            out_dir: out_dir.to_path_buf(),
            start: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        if !path.exists() {
            return Err(CliError::io(path, "no such file or directory"));
        }
        self.inputs.extend(hash_input(path)?);
        Ok(())
    }

    /// Path of an output inside the out dir, recorded in the manifest.
    pub fn output(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.out_dir.join(name)
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> CliResult<()> {
        let p = self.output(name);
        std::fs::write(&p, text).map_err(|e| CliError::io(&p, e))
    }

    pub fn finish(self, cfg: &CliConfig) -> CliResult<()> {
        let mut tree = Sha256::new();
        for i in &self.inputs {
            tree.update(format!("{}  {}\n", i.hash, i.path).as_bytes());
        }
        let m = RunManifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION"),
            seed: cfg.seed,
            config: cfg,
            input_hash: hex::encode(tree.finalize()),
            inputs: self.inputs,
            outputs: &self.outputs,
            wall_time_secs: self.start.elapsed().as_secs_f64(),
        };
        let p = self.out_dir.join(format!("run_{}.json", self.command));
        let text = serde_json::to_string_pretty(&m).expect("serializable");
        std::fs::write(&p, text + "\n").map_err(|e| CliError::io(&p, e))
    }
}
