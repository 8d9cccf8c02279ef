//! Run directories and their manifests. Every file a command writes lives
//! under one run directory and is hashed into that directory's manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use pharmakit::io::{sha256_file, write_file, write_json, write_jsonl};
use pharmakit::model::Checkpoint;

use crate::config::{Config, Loaded};

pub const MANIFEST: &str = "manifest.json";
pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputRecord {
    pub path: PathBuf,
    pub sha256: String,
}

/// No timestamps: two runs of the same config and seed produce the same
/// manifest apart from paths that point into their own run directories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub status: String,
    pub code_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, InputRecord>,
    /// Relative path inside the run directory → SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub warnings: Vec<String>,
    pub config: Config,
}

#[derive(Debug)]
pub struct Run {
    pub dir: PathBuf,
    inputs: BTreeMap<String, InputRecord>,
    outputs: Vec<String>,
    pub warnings: Vec<String>,
}

/// Error class for the machine-readable error record and the exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Config,
    MissingInput,
    Aborted,
}

#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub message: String,
}

impl Failure {
    pub fn new(kind: Kind, message: impl Into<String>) -> anyhow::Error {
        anyhow::Error::new(Self { kind, message: message.into() })
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

impl Run {
    /// Creates `<out_dir>/<UTC timestamp>-<config hash prefix>`, suffixed when taken.
    pub fn create(out_dir: &Path, config_hash: &str) -> Result<Self> {
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
        let base = format!("{stamp}-{}", &config_hash[..12]);
        std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
        let mut dir = out_dir.join(&base);
        let mut n = 1;
        loop {
            match std::fs::create_dir(&dir) {
                Ok(()) => break,
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    n += 1;
                    dir = out_dir.join(format!("{base}-{n}"));
                }
                Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
            }
        }
        Ok(Self { dir, inputs: BTreeMap::new(), outputs: Vec::new(), warnings: Vec::new() })
    }

    /// Records an input file; files inside this run are artifacts, not inputs.
    pub fn input(&mut self, label: &str, path: &Path) -> Result<()> {
        if path.starts_with(&self.dir) {
            return Ok(());
        }
        let sha256 = sha256_file(path)?;
        self.inputs.insert(label.to_string(), InputRecord { path: path.to_path_buf(), sha256 });
        Ok(())
    }

    /// Registers `rel` as an output, creates its parent and returns its absolute path.
    pub fn output(&mut self, rel: &str) -> Result<PathBuf> {
        if !self.outputs.iter().any(|o| o == rel) {
            self.outputs.push(rel.to_string());
        }
        let p = self.dir.join(rel);
        if let Some(d) = p.parent() {
            std::fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
        }
        Ok(p)
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<PathBuf> {
        let p = self.output(rel)?;
        write_json(&p, value)?;
        Ok(p)
    }

    pub fn write_jsonl<T: Serialize>(&mut self, rel: &str, records: &[T]) -> Result<PathBuf> {
        let p = self.output(rel)?;
        write_jsonl(&p, records)?;
        Ok(p)
    }

    pub fn write_text(&mut self, rel: &str, text: &str) -> Result<PathBuf> {
        let p = self.output(rel)?;
        write_file(&p, text.as_bytes())?;
        Ok(p)
    }

    pub fn save_checkpoint(&mut self, rel: &str, ck: &Checkpoint) -> Result<PathBuf> {
        let p = self.output(rel)?;
        ck.save(&p)?;
        Ok(p)
    }

    /// Hashes every registered output and writes the manifest.
    pub fn finish(&mut self, command: &str, status: &str, loaded: &Loaded) -> Result<Manifest> {
        let mut outputs = BTreeMap::new();
        for rel in &self.outputs {
            let p = self.dir.join(rel);
            if p.exists() {
                outputs.insert(rel.clone(), sha256_file(&p)?);
            }
        }
        let mut warnings = loaded.warnings.clone();
        warnings.extend(self.warnings.iter().cloned());
        let m = Manifest {
            command: command.to_string(),
            status: status.to_string(),
            code_version: CODE_VERSION.to_string(),
            config_hash: loaded.hash.clone(),
            seed: loaded.config.seed,
            inputs: self.inputs.clone(),
            outputs,
            warnings,
            config: loaded.config.clone(),
        };
        write_json(&self.dir.join(MANIFEST), &m)?;
        Ok(m)
    }
}
