//! Blind source separation with a flow trained by maximum likelihood,
//! optionally regularized by the IMA contrast of the learned mixing.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contrast::sample_source;
use crate::error::{Error, Result};
use crate::flow::{train_mle, BaseDensity, FlowModel, TrainConfig};
use crate::metrics::{mcc, CorrelationMode};
use crate::mixing::{MixingMap, Moebius};
use crate::optim::AdamConfig;
use crate::rng::{child_seed, rng_from_seed};
use crate::source::SourceDistribution;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImaBssConfig {
    pub n: usize,
    pub samples: usize,
    /// Sources are uniform on `[low, high]^n`; the Möbius pole stays at least
    /// `margin` outside that box.
    pub low: f64,
    pub high: f64,
    pub margin: f64,
    pub blocks: usize,
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    pub lambdas: Vec<f64>,
    pub n_seeds: usize,
    /// Rows used to report the contrast of the learned mixing.
    pub cima_rows: usize,
}

impl Default for ImaBssConfig {
    fn default() -> Self {
        Self {
            n: 2,
            samples: 2000,
            low: 0.0,
            high: 1.0,
            margin: 0.1,
            blocks: 4,
            hidden: vec![10],
            train: TrainConfig {
                adam: AdamConfig { lr: 3e-3, ..AdamConfig::default() },
                batch_size: 128,
                epochs: 60,
                ima_subsample: 24,
                ..TrainConfig::default()
            },
            lambdas: vec![0.0, 1.0],
            n_seeds: 10,
            cima_rows: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImaBssRecord {
    pub seed: u64,
    pub lambda: f64,
    pub mcc: f64,
    pub cima: f64,
    pub val_nll: f64,
    pub epochs: usize,
}

/// One problem instance: uniform sources mixed by a random Möbius map,
/// returned as `(mixing, standardized observations, sources)`.
pub fn ima_bss_problem(cfg: &ImaBssConfig, seed: u64) -> Result<(MixingMap, DMatrix<f64>, DMatrix<f64>)> {
    if !(cfg.low < cfg.high) || cfg.n < 2 {
        return Err(Error::Config("need n ≥ 2 and low < high".into()));
    }
    let mixing = MixingMap::Moebius(Moebius::random(cfg.n, cfg.low, cfg.high, cfg.margin, &mut rng_from_seed(child_seed(seed, 0))));
    let src = SourceDistribution::iid(crate::source::Marginal::Uniform { low: cfg.low, high: cfg.high }, cfg.n);
    let s = sample_source(&src, cfg.samples, child_seed(seed, 1));
    let mut x = DMatrix::zeros(cfg.samples, cfg.n);
    for (r, row) in s.iter().enumerate() {
        for (c, v) in mixing.forward(row)?.into_iter().enumerate() {
            x[(r, c)] = v;
        }
    }
    // Centre and divide by one common scale; a scalar rescaling leaves the
    // IMA contrast unchanged.
    let mean = x.row_mean();
    for mut row in x.row_iter_mut() {
        row -= &mean;
    }
    let scale = (x.norm_squared() / x.len() as f64).sqrt();
    if !(scale > 0.0) {
        return Err(Error::DegenerateColumn { column: 0 });
    }
    x /= scale;
    let sm = DMatrix::from_fn(cfg.samples, cfg.n, |r, c| s[r][c]);
    Ok((mixing, x, sm))
}

/// Trains from the same initialization and data for a given `lambda`, so
/// runs at different `lambda` share an identical budget.
pub fn ima_bss_run(cfg: &ImaBssConfig, seed: u64, lambda: f64) -> Result<ImaBssRecord> {
    let (_, x, s) = ima_bss_problem(cfg, seed)?;
    let flow = FlowModel::coupling(cfg.n, cfg.blocks, &cfg.hidden, true, &mut rng_from_seed(child_seed(seed, 2)));
    let train = TrainConfig { lambda, seed: child_seed(seed, 3), ..cfg.train.clone() };
    let out = train_mle(flow, &x, BaseDensity::UnitUniform, &train)?;
    let z = out.model.encode_batch(&x).z;
    let score = mcc(&z, &s, CorrelationMode::Pearson)?.score;
    let rows = cfg.cima_rows.min(x.nrows());
    Ok(ImaBssRecord {
        seed,
        lambda,
        mcc: score,
        cima: out.model.ima_contrast(&x.rows(0, rows).into_owned()),
        val_nll: out.best_val,
        epochs: out.history.len(),
    })
}

/// Every `(seed, lambda)` pair; seeds are children of `master`.
pub fn ima_bss_sweep(cfg: &ImaBssConfig, master: u64) -> Result<Vec<ImaBssRecord>> {
    let jobs: Vec<(u64, f64)> =
        (0..cfg.n_seeds as u64).flat_map(|k| cfg.lambdas.iter().map(move |&l| (child_seed(master, k), l))).collect();
    jobs.par_iter().map(|&(seed, lambda)| ima_bss_run(cfg, seed, lambda)).collect()
}
