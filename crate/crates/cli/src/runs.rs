//! Run specifications and content-addressed run directories.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ecgauth::data_io::{write_atomic, Split};
use ecgauth::experiment::{hash_json, ExperimentConfig};
use serde::{Deserialize, Serialize};

pub const RUN_FILE: &str = "run.json";
pub const TOOL: &str = "ecgauth";

/// Everything besides the configuration that a command reads.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Inputs {
    pub manifest: Option<PathBuf>,
    /// Image set file; `None` regenerates the synthetic set in process.
    pub data: Option<PathBuf>,
    /// Directory of a `train` or `fedsim` run.
    pub model: Option<PathBuf>,
    pub split: Option<Split>,
    pub png: usize,
    pub runs: Vec<PathBuf>,
}

/// Contents of `run.json`: enough to execute the command again.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub inputs: Inputs,
    pub config: ExperimentConfig,
}

impl RunSpec {
    pub fn new(command: &str, config: ExperimentConfig, inputs: Inputs) -> Self {
        Self {
            tool: TOOL.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed: config.seed,
            inputs,
            config,
        }
    }

    pub fn dir_name(&self) -> String {
        format!("{}-{}", self.command, hash_json(self))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| ecgauth::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let spec: RunSpec = serde_json::from_str(&text).map_err(|e| ecgauth::Error::Format {
            offset: 0,
            message: format!("{}: {e}", path.display()),
        })?;
        if spec.tool != TOOL {
            return Err(ecgauth::Error::Format {
                offset: 0,
                message: format!("{} was not written by {TOOL}", path.display()),
            }
            .into());
        }
        // Run files written by hand still go through validation.
        let config = spec.config.clone().resolve()?;
        ensure_same(&config, &spec.config, path)?;
        Ok(spec)
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        Self::read(&dir.join(RUN_FILE))
    }
}

fn ensure_same(resolved: &ExperimentConfig, stored: &ExperimentConfig, path: &Path) -> Result<()> {
    if resolved != stored {
        return Err(ecgauth::Error::Config(format!("{}: config is not in resolved form", path.display())).into());
    }
    Ok(())
}

/// A directory receiving one command's outputs.
pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path, spec: &RunSpec) -> Result<Self> {
        let path = root.join(spec.dir_name());
        fs::create_dir_all(&path).map_err(|e| ecgauth::Error::Io {
            path: path.clone(),
            source: e,
        })?;
        Ok(Self { path })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn subdir(&self, name: &str) -> Result<PathBuf> {
        let p = self.path.join(name);
        fs::create_dir_all(&p).map_err(|e| ecgauth::Error::Io {
            path: p.clone(),
            source: e,
        })?;
        Ok(p)
    }

    pub fn write_bytes(&self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.file(name), bytes)?;
        Ok(())
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).context("serializing json")?;
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    /// Header plus rows, each row already rendered to strings.
    pub fn write_table(&self, name: &str, header: &[String], rows: &[Vec<String>]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().context("flushing csv")?;
        self.write_bytes(name, &bytes)
    }

    pub fn write_rows<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().context("flushing csv")?;
        self.write_bytes(name, &bytes)
    }

    /// Written last, so a present `run.json` marks a finished run.
    pub fn finish(&self, spec: &RunSpec) -> Result<()> {
        self.write_json(RUN_FILE, spec)
    }
}

/// Absolute form of a user-supplied path that must exist.
pub fn existing(path: &Path) -> Result<PathBuf> {
    fs::canonicalize(path).map_err(|e| {
        ecgauth::Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}
