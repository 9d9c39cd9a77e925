//! Multi-environment datasets and their CSV persistence.
//!
//! Observations live in `<path>` with header `env_id,x_0,...,x_{d-1}`.
//! Metadata (intervention specs, ground truth, seed) lives in the optional
//! sidecar `<path>.meta.json`; ground-truth latents, when known, in
//! `<path>.latents.csv` with header `env_id,v_0,...`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixing::MixingMap;
use crate::scm::{InterventionSpec, Scm};

#[derive(Debug, Clone, PartialEq)]
pub struct EnvData {
    pub id: String,
    /// `None` when the dataset came without metadata.
    pub spec: Option<InterventionSpec>,
    pub x: DMatrix<f64>,
    pub latents: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub scm: Scm,
    pub mixing: MixingMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiEnvDataset {
    pub envs: Vec<EnvData>,
    pub ground_truth: Option<GroundTruth>,
    pub seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    format_version: u32,
    seed: Option<u64>,
    envs: Vec<SidecarEnv>,
    ground_truth: Option<GroundTruth>,
    latents: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SidecarEnv {
    id: String,
    rows: usize,
    spec: InterventionSpec,
}

const FORMAT_VERSION: u32 = 1;

impl MultiEnvDataset {
    pub fn dim(&self) -> usize {
        self.envs.first().map_or(0, |e| e.x.ncols())
    }

    pub fn total_rows(&self) -> usize {
        self.envs.iter().map(|e| e.x.nrows()).sum()
    }

    pub fn env(&self, id: &str) -> Option<&EnvData> {
        self.envs.iter().find(|e| e.id == id)
    }

    /// Ground truth, or a configuration error naming the operation that
    /// needed it.
    pub fn require_ground_truth(&self, what: &str) -> Result<&GroundTruth> {
        self.ground_truth
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{what} needs ground truth, but the dataset has no metadata sidecar")))
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        for e in &self.envs {
            if e.x.ncols() != d {
                return Err(Error::Dimension(format!("environment {} has {} columns, expected {d}", e.id, e.x.ncols())));
            }
            if let Some(l) = &e.latents {
                if l.nrows() != e.x.nrows() {
                    return Err(Error::Dimension(format!("environment {} has mismatched latent rows", e.id)));
                }
            }
        }
        let mut ids: Vec<&str> = self.envs.iter().map(|e| e.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.envs.len() {
            return Err(Error::Config("duplicate environment ids".into()));
        }
        Ok(())
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    suffixed(path, ".meta.json")
}

pub fn latents_path(path: &Path) -> PathBuf {
    suffixed(path, ".latents.csv")
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Formats a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_table(path: &Path, prefix: &str, rows: impl Iterator<Item = (String, Vec<f64>)>, d: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["env_id".to_string()];
    header.extend((0..d).map(|j| format!("{prefix}_{j}")));
    w.write_record(&header)?;
    for (id, vals) in rows {
        let mut rec = vec![id];
        rec.extend(vals.into_iter().map(fmt_f64));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn env_rows<'a>(envs: &'a [EnvData], pick: impl Fn(&'a EnvData) -> &'a DMatrix<f64> + 'a) -> impl Iterator<Item = (String, Vec<f64>)> + 'a {
    envs.iter().flat_map(move |e| {
        let m = pick(e);
        (0..m.nrows()).map(move |r| (e.id.clone(), m.row(r).iter().copied().collect()))
    })
}

/// Writes the observation CSV plus, when metadata is present, the sidecar and
/// latent files. Returns every path written.
pub fn save_dataset(ds: &MultiEnvDataset, path: &Path) -> Result<Vec<PathBuf>> {
    ds.validate()?;
    let mut written = vec![path.to_path_buf()];
    write_table(path, "x", env_rows(&ds.envs, |e| &e.x), ds.dim())?;
    let has_meta = ds.envs.iter().all(|e| e.spec.is_some());
    if !has_meta {
        return Ok(written);
    }
    let has_latents = ds.envs.iter().all(|e| e.latents.is_some()) && !ds.envs.is_empty();
    let latents_name = if has_latents {
        let lp = latents_path(path);
        let n = ds.envs[0].latents.as_ref().map_or(0, |l| l.ncols());
        write_table(&lp, "v", env_rows(&ds.envs, |e| e.latents.as_ref().expect("checked")), n)?;
        let name = lp.file_name().map(|s| s.to_string_lossy().into_owned());
        written.push(lp);
        name
    } else {
        None
    };
    let sidecar = Sidecar {
        format_version: FORMAT_VERSION,
        seed: ds.seed,
        envs: ds
            .envs
            .iter()
            .map(|e| SidecarEnv { id: e.id.clone(), rows: e.x.nrows(), spec: e.spec.clone().expect("checked") })
            .collect(),
        ground_truth: ds.ground_truth.clone(),
        latents: latents_name,
    };
    let sp = sidecar_path(path);
    fs::write(&sp, serde_json::to_string_pretty(&sidecar)?)?;
    written.push(sp);
    Ok(written)
}

fn parse_err(path: &Path, row: usize, reason: impl Into<String>) -> Error {
    Error::Parse { path: path.display().to_string(), row, reason: reason.into() }
}

/// Reads an `env_id,<prefix>_0,...` table, grouping rows by environment in
/// order of first appearance. Rows are numbered from 1 at the header line.
fn read_table(path: &Path, prefix: &str, known: Option<&[String]>) -> Result<Vec<(String, DMatrix<f64>)>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_path(path)?;
    let header = rdr.headers()?.clone();
    if header.get(0) != Some("env_id") {
        return Err(parse_err(path, 1, "first column must be env_id"));
    }
    let d = header.len() - 1;
    if d == 0 {
        return Err(parse_err(path, 1, format!("no {prefix}_ columns")));
    }
    for j in 0..d {
        let want = format!("{prefix}_{j}");
        if header.get(j + 1) != Some(want.as_str()) {
            return Err(parse_err(path, 1, format!("expected column {want}, found {:?}", header.get(j + 1).unwrap_or(""))));
        }
    }
    let mut groups: BTreeMap<String, (usize, Vec<f64>)> = BTreeMap::new();
    let mut order = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 2;
        let rec = rec.map_err(|e| parse_err(path, row, e.to_string()))?;
        if rec.len() != d + 1 {
            return Err(parse_err(path, row, format!("{} fields, expected {}", rec.len(), d + 1)));
        }
        let id = rec[0].to_string();
        if let Some(ids) = known {
            if !ids.contains(&id) {
                return Err(parse_err(path, row, format!("unknown environment id {id:?}")));
            }
        }
        let entry = groups.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            (0, Vec::new())
        });
        for j in 0..d {
            let v: f64 = rec[j + 1]
                .trim()
                .parse()
                .map_err(|_| parse_err(path, row, format!("column {prefix}_{j}: cannot parse {:?}", &rec[j + 1])))?;
            entry.1.push(v);
        }
        entry.0 += 1;
    }
    Ok(order
        .into_iter()
        .map(|id| {
            let (rows, vals) = groups.remove(&id).expect("grouped");
            (id, DMatrix::from_row_slice(rows, d, &vals))
        })
        .collect())
}

/// Loads a dataset; without a sidecar the environment specs and ground truth
/// are absent and operations that need them refuse to run.
pub fn load_dataset(path: &Path) -> Result<MultiEnvDataset> {
    let sp = sidecar_path(path);
    let sidecar: Option<Sidecar> = if sp.exists() {
        let s: Sidecar = serde_json::from_str(&fs::read_to_string(&sp)?)?;
        if s.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!("unsupported sidecar format version {}", s.format_version)));
        }
        Some(s)
    } else {
        None
    };
    let known: Option<Vec<String>> = sidecar.as_ref().map(|s| s.envs.iter().map(|e| e.id.clone()).collect());
    let table = read_table(path, "x", known.as_deref())?;
    let Some(sc) = sidecar else {
        let envs = table.into_iter().map(|(id, x)| EnvData { id, spec: None, x, latents: None }).collect();
        return Ok(MultiEnvDataset { envs, ground_truth: None, seed: None });
    };
    let mut by_id: BTreeMap<String, DMatrix<f64>> = table.into_iter().collect();
    let mut latents: BTreeMap<String, DMatrix<f64>> = match &sc.latents {
        Some(name) => {
            let lp = path.parent().map_or_else(|| PathBuf::from(name), |p| p.join(name));
            read_table(&lp, "v", known.as_deref())?.into_iter().collect()
        }
        None => BTreeMap::new(),
    };
    let mut envs = Vec::with_capacity(sc.envs.len());
    for e in sc.envs {
        let x = by_id.remove(&e.id).unwrap_or_else(|| DMatrix::zeros(0, 0));
        if x.nrows() != e.rows {
            return Err(Error::Config(format!("environment {} has {} rows, sidecar says {}", e.id, x.nrows(), e.rows)));
        }
        let lat = latents.remove(&e.id);
        envs.push(EnvData { id: e.id, spec: Some(e.spec), x, latents: lat });
    }
    let ds = MultiEnvDataset { envs, ground_truth: sc.ground_truth, seed: sc.seed };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_digit_format_round_trips() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, f64::MIN_POSITIVE] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
    }
}
