//! Per-command TOML configuration. Every config carries `schema_version` and
//! `seed`, rejects unknown keys and is persisted with all defaults filled in.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bss::ImaBssConfig;
use crate::error::{Error, Result};
use crate::linalg::rotation2;
use crate::mixing::{InvertibleMlp, MixingMap, Moebius};
use crate::mss::{CiInvarianceTest, MssProblemConfig};
use crate::multienv::{CrlProblemConfig, CrlSweepConfig};
use crate::multiview::ContentExperimentConfig;
use crate::rng::{child_rng, child_seed};
use crate::scm::Scm;
use crate::source::SourceDistribution;

pub const SCHEMA_VERSION: u32 = 1;

/// Behaviour shared by all command configs.
pub trait CommandConfig: Serialize + DeserializeOwned + Default {
    fn schema_version(&self) -> u32;
    fn seed(&self) -> u64;
    fn set_seed(&mut self, seed: u64);
    fn validate(&self) -> Result<()> {
        Ok(())
    }
}

macro_rules! command_config {
    ($t:ty) => {
        impl CommandConfig for $t {
            fn schema_version(&self) -> u32 {
                self.schema_version
            }
            fn seed(&self) -> u64 {
                self.seed
            }
            fn set_seed(&mut self, seed: u64) {
                self.seed = seed;
            }
            fn validate(&self) -> Result<()> {
                self.check()
            }
        }
    };
}

/// Reads a config file, or the defaults when `path` is `None`, then applies
/// the seed override and validates.
pub fn load_config<C: CommandConfig>(path: Option<&Path>, seed: Option<u64>) -> Result<C> {
    let mut cfg: C = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => C::default(),
    };
    if cfg.schema_version() != SCHEMA_VERSION {
        return Err(Error::Config(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", cfg.schema_version())));
    }
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    if cfg.seed() > i64::MAX as u64 {
        return Err(Error::Config(format!("seed {} exceeds 2^63 - 1 and cannot be persisted in TOML", cfg.seed())));
    }
    cfg.validate()?;
    Ok(cfg)
}

/// TOML text of the fully materialized config.
pub fn to_toml<C: Serialize>(cfg: &C) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
}

/// SHA-256 of the canonical JSON form (object keys sorted, shortest
/// round-trip floats), so identical configs hash identically everywhere.
pub fn config_hash<C: Serialize>(cfg: &C) -> Result<String> {
    let value = serde_json::to_value(cfg)?;
    let canonical = serde_json::to_string(&value)?;
    Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
}

/// How a command obtains its mixing function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MixingSpec {
    PolarCartesian,
    Rotation { angle: f64 },
    Linear { matrix: Vec<Vec<f64>> },
    MoebiusRandom {
        n: usize,
        #[serde(default)]
        low: f64,
        #[serde(default = "one")]
        high: f64,
        #[serde(default = "default_margin")]
        margin: f64,
    },
    MlpRandom {
        n: usize,
        layers: usize,
        #[serde(default = "default_slope")]
        slope: f64,
    },
    Explicit { map: MixingMap },
}

fn one() -> f64 {
    1.0
}

fn default_margin() -> f64 {
    0.1
}

fn default_slope() -> f64 {
    crate::mixing::DEFAULT_LEAKY_SLOPE
}

impl MixingSpec {
    /// Random variants draw their parameters from a child of `seed`.
    pub fn build(&self, seed: u64) -> Result<MixingMap> {
        let mut rng = child_rng(seed, 1);
        Ok(match self {
            MixingSpec::PolarCartesian => MixingMap::PolarCartesian,
            MixingSpec::Rotation { angle } => MixingMap::linear(rotation2(*angle)),
            MixingSpec::Linear { matrix } => {
                let n = matrix.len();
                if n == 0 || matrix.iter().any(|r| r.len() != n) {
                    return Err(Error::Config("linear mixing needs a non-empty square matrix".into()));
                }
                let m = DMatrix::from_fn(n, n, |r, c| matrix[r][c]);
                if m.determinant().abs() < 1e-12 {
                    return Err(Error::Config("linear mixing matrix is singular".into()));
                }
                MixingMap::linear(m)
            }
            MixingSpec::MoebiusRandom { n, low, high, margin } => {
                if !(low < high) || !(*margin >= 0.0 && *margin < high - low) || *n < 2 {
                    return Err(Error::Config("moebius-random needs n ≥ 2, low < high and 0 ≤ margin < high − low".into()));
                }
                MixingMap::Moebius(Moebius::random(*n, *low, *high, *margin, &mut rng))
            }
            MixingSpec::MlpRandom { n, layers, slope } => {
                if *n == 0 || !(*slope > 0.0 && *slope <= 1.0) {
                    return Err(Error::Config("mlp-random needs n ≥ 1 and slope in (0, 1]".into()));
                }
                MixingMap::InvertibleMlp(InvertibleMlp::random(*n, *layers, *slope, &mut rng))
            }
            MixingSpec::Explicit { map } => map.clone(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataKind {
    Crl,
    Mss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenDataConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub kind: DataKind,
    pub file: String,
    pub crl: CrlProblemConfig,
    pub mss: MssProblemConfig,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            kind: DataKind::Crl,
            file: "data.csv".into(),
            crl: CrlProblemConfig::default(),
            mss: MssProblemConfig::default(),
        }
    }
}

impl GenDataConfig {
    fn check(&self) -> Result<()> {
        check_file_name(&self.file)
    }
}
command_config!(GenDataConfig);

fn check_file_name(name: &str) -> Result<()> {
    let p = PathBuf::from(name);
    if name.is_empty() || p.components().count() != 1 || p.is_absolute() {
        return Err(Error::Config(format!("file must be a plain file name, got {name:?}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContrastKind {
    Ima,
    Igci,
}

/// Fits an empirical Darmois construction on `n_fit` observations and
/// evaluates its contrast on `n_eval` fresh ones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DarmoisEval {
    pub n_fit: usize,
    pub n_eval: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImaEvalConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub mixing: MixingSpec,
    pub source: SourceDistribution,
    pub n_mc: usize,
    pub contrast: ContrastKind,
    /// IGCI reference box; defaults to the source support.
    pub igci_domain: Option<Vec<[f64; 2]>>,
    pub darmois: Option<DarmoisEval>,
}

impl Default for ImaEvalConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            mixing: MixingSpec::PolarCartesian,
            source: SourceDistribution::Polar { r_max: 3.0 },
            n_mc: crate::contrast::DEFAULT_N_MC,
            contrast: ContrastKind::Ima,
            igci_domain: None,
            darmois: None,
        }
    }
}

impl ImaEvalConfig {
    fn check(&self) -> Result<()> {
        self.source.validate()?;
        if self.n_mc == 0 {
            return Err(Error::Config("n_mc must be positive".into()));
        }
        Ok(())
    }
}
command_config!(ImaEvalConfig);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImaSweepConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub mixing: MixingSpec,
    pub source: SourceDistribution,
    pub n_mc: usize,
    /// Equally spaced angles `2πk/n_angles`, used unless `thetas` is given.
    pub n_angles: usize,
    pub thetas: Option<Vec<f64>>,
}

impl Default for ImaSweepConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            mixing: MixingSpec::MoebiusRandom { n: 2, low: 0.0, high: 1.0, margin: 0.1 },
            source: SourceDistribution::uniform_cube(2),
            n_mc: crate::contrast::DEFAULT_N_MC,
            n_angles: 16,
            thetas: None,
        }
    }
}

impl ImaSweepConfig {
    pub fn angles(&self) -> Vec<f64> {
        match &self.thetas {
            Some(t) => t.clone(),
            None => (0..self.n_angles).map(|k| std::f64::consts::TAU * k as f64 / self.n_angles as f64).collect(),
        }
    }

    fn check(&self) -> Result<()> {
        self.source.validate()?;
        if self.n_mc == 0 || self.angles().is_empty() {
            return Err(Error::Config("n_mc and the number of angles must be positive".into()));
        }
        Ok(())
    }
}
command_config!(ImaSweepConfig);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImaTrainConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub experiment: ImaBssConfig,
}

impl Default for ImaTrainConfig {
    fn default() -> Self {
        Self { schema_version: SCHEMA_VERSION, seed: 0, experiment: ImaBssConfig::default() }
    }
}

impl ImaTrainConfig {
    fn check(&self) -> Result<()> {
        self.experiment.train.validate()?;
        if self.experiment.lambdas.is_empty() || self.experiment.n_seeds == 0 {
            return Err(Error::Config("need at least one lambda and one seed".into()));
        }
        Ok(())
    }
}
command_config!(ImaTrainConfig);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MultiviewConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub n_c: usize,
    pub n_s: usize,
    /// Style depends on content through a random linear map.
    pub causal: bool,
    pub change_prob: f64,
    pub n_seeds: usize,
    pub experiment: ContentExperimentConfig,
}

impl Default for MultiviewConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            n_c: 3,
            n_s: 3,
            causal: false,
            change_prob: 1.0,
            n_seeds: 1,
            experiment: ContentExperimentConfig::default(),
        }
    }
}

impl MultiviewConfig {
    fn check(&self) -> Result<()> {
        self.experiment.train.validate()?;
        if self.n_c == 0 || self.n_seeds == 0 || !(0.0..=1.0).contains(&self.change_prob) {
            return Err(Error::Config("need n_c ≥ 1, n_seeds ≥ 1 and change_prob in [0, 1]".into()));
        }
        Ok(())
    }
}
command_config!(MultiviewConfig);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrlSweepCliConfig {
    pub schema_version: u32,
    pub seed: u64,
    /// Fit the candidates on an existing dataset instead of generating
    /// problems; relative paths resolve against the working directory.
    pub data: Option<PathBuf>,
    pub sweep: CrlSweepConfig,
}

impl Default for CrlSweepCliConfig {
    fn default() -> Self {
        Self { schema_version: SCHEMA_VERSION, seed: 0, data: None, sweep: CrlSweepConfig::default() }
    }
}

impl CrlSweepCliConfig {
    fn check(&self) -> Result<()> {
        self.sweep.fit.train.validate()?;
        if self.sweep.n_seeds == 0 {
            return Err(Error::Config("n_seeds must be positive".into()));
        }
        Ok(())
    }
}
command_config!(CrlSweepCliConfig);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MssConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub problem: MssProblemConfig,
    pub test: CiInvarianceTest,
    /// Generated problems, ignored when `data` is set.
    pub n_runs: usize,
}

impl Default for MssConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            data: None,
            problem: MssProblemConfig::default(),
            test: CiInvarianceTest::default(),
            n_runs: 1,
        }
    }
}

impl MssConfig {
    fn check(&self) -> Result<()> {
        if !(self.test.alpha > 0.0 && self.test.alpha < 1.0) || self.n_runs == 0 {
            return Err(Error::Config("alpha must lie in (0,1) and n_runs must be positive".into()));
        }
        Ok(())
    }
}
command_config!(MssConfig);

/// Element-wise reparametrization `W[perm[k]] = maps[k](V[k])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Reparametrization {
    pub maps: Vec<crate::mixing::ScalarMap>,
    pub perm: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InfluenceConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub scm: Scm,
    pub i: usize,
    pub j: usize,
    pub n_mc: usize,
    pub reparam: Option<Reparametrization>,
}

impl Default for InfluenceConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            scm: crate::multienv::reference_bivariate(),
            i: 0,
            j: 1,
            n_mc: 100_000,
            reparam: None,
        }
    }
}

impl InfluenceConfig {
    fn check(&self) -> Result<()> {
        let n = self.scm.n();
        if self.i >= n || self.j >= n || self.n_mc == 0 {
            return Err(Error::Config(format!("nodes must be < {n} and n_mc positive")));
        }
        Ok(())
    }
}
command_config!(InfluenceConfig);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyPropsConfig {
    pub schema_version: u32,
    pub seed: u64,
}

impl Default for VerifyPropsConfig {
    fn default() -> Self {
        Self { schema_version: SCHEMA_VERSION, seed: 0 }
    }
}

impl VerifyPropsConfig {
    fn check(&self) -> Result<()> {
        Ok(())
    }
}
command_config!(VerifyPropsConfig);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    pub schema_version: u32,
    pub seed: u64,
    /// An estimate counts as zero when `|estimate| ≤ zero_k · stderr`.
    pub zero_k: f64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { schema_version: SCHEMA_VERSION, seed: 0, zero_k: 3.0 }
    }
}

impl ReportConfig {
    fn check(&self) -> Result<()> {
        if !(self.zero_k > 0.0) {
            return Err(Error::Config("zero_k must be positive".into()));
        }
        Ok(())
    }
}
command_config!(ReportConfig);

/// Seed of the `k`-th replicate of a command.
pub fn replicate_seed(seed: u64, k: usize) -> u64 {
    child_seed(seed, k as u64)
}
