//! Run directories and their manifests.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::fmt_f64;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub crl_lab: String,
    pub config_schema: u32,
    pub manifest_schema: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// SHA-256 of the canonical JSON form of the materialized config.
    pub config_hash: String,
    pub seed: u64,
    /// Paths relative to the run directory, including this manifest.
    pub artifacts: Vec<String>,
    pub wall_clock_seconds: f64,
    pub threads: usize,
    pub deterministic: bool,
    pub versions: Versions,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Output directory of one run; every file written through it is recorded.
pub struct RunContext {
    pub out: PathBuf,
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub threads: usize,
    pub deterministic: bool,
    artifacts: Vec<String>,
    started: Instant,
}

impl RunContext {
    pub fn create(out: &Path, command: &str, seed: u64, config_hash: String, threads: usize, deterministic: bool) -> Result<Self> {
        fs::create_dir_all(out)?;
        Ok(Self {
            out: out.to_path_buf(),
            command: command.into(),
            seed,
            config_hash,
            threads,
            deterministic,
            artifacts: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Records a file written by other means; `path` must lie in the run
    /// directory.
    pub fn record(&mut self, path: &Path) {
        let rel = path.strip_prefix(&self.out).unwrap_or(path).to_string_lossy().replace('\\', "/");
        if !self.artifacts.contains(&rel) {
            self.artifacts.push(rel);
        }
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<PathBuf> {
        let p = self.path(name);
        fs::write(&p, text)?;
        self.record(&p);
        Ok(p)
    }

    pub fn write_csv(&mut self, name: &str, header: &[&str], rows: &[Vec<Cell>]) -> Result<PathBuf> {
        let p = self.path(name);
        let mut w = csv::Writer::from_path(&p)?;
        w.write_record(header)?;
        for row in rows {
            w.write_record(row.iter().map(Cell::render))?;
        }
        w.flush()?;
        self.record(&p);
        Ok(p)
    }

    /// Writes the manifest, which lists itself, and returns it.
    pub fn finish(mut self) -> Result<RunManifest> {
        let mp = self.path(MANIFEST_FILE);
        self.record(&mp);
        let manifest = RunManifest {
            command: self.command,
            config_hash: self.config_hash,
            seed: self.seed,
            artifacts: self.artifacts,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
            threads: self.threads,
            deterministic: self.deterministic,
            versions: Versions {
                crl_lab: env!("CARGO_PKG_VERSION").into(),
                config_schema: super::config::SCHEMA_VERSION,
                manifest_schema: 1,
            },
        };
        fs::write(&mp, serde_json::to_string_pretty(&manifest)?)?;
        Ok(manifest)
    }
}

/// One CSV field; floats are written with 17 significant digits.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Float(f64),
    Int(u64),
    Text(String),
    Bool(bool),
    Empty,
}

impl Cell {
    pub fn render(&self) -> String {
        match self {
            Cell::Float(v) => fmt_f64(*v),
            Cell::Int(v) => v.to_string(),
            Cell::Text(s) => s.clone(),
            Cell::Bool(b) => b.to_string(),
            Cell::Empty => String::new(),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as u64)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Bool(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.into())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

impl<T: Into<Cell>> From<Option<T>> for Cell {
    fn from(v: Option<T>) -> Self {
        v.map_or(Cell::Empty, Into::into)
    }
}

/// Builds a row of cells from heterogeneous values.
#[macro_export]
#[doc(hidden)]
macro_rules! row {
    ($($v:expr),* $(,)?) => {
        vec![$($crate::cli::manifest::Cell::from($v)),*]
    };
}
