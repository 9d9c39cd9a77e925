//! Identifiability metrics: MCC, kernel ridge R², Amari distances.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixing::MixingMap;
use crate::rng::rng_from_seed;
use crate::stats::{pearson, ranks, variance};

/// Maximum-weight perfect matching on a square matrix (Kuhn-Munkres with
/// potentials). Returns `assignment[row] = column`.
pub fn max_weight_assignment(weights: &DMatrix<f64>) -> Vec<usize> {
    let n = weights.nrows();
    assert_eq!(n, weights.ncols(), "assignment needs a square matrix");
    if n == 0 {
        return Vec::new();
    }
    // Minimize negated weights; 1-based arrays with a virtual column 0.
    let cost = |i: usize, j: usize| -weights[(i - 1, j - 1)];
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    assignment
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CorrelationMode {
    #[default]
    Pearson,
    Rank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MccResult {
    pub score: f64,
    /// `matching[i]` is the column of `z_hat` matched to true column `i`.
    pub matching: Vec<usize>,
    pub matched_correlations: Vec<f64>,
}

fn column(m: &DMatrix<f64>, c: usize) -> Vec<f64> {
    m.column(c).iter().copied().collect()
}

/// Mean correlation coefficient under the best one-to-one column matching.
pub fn mcc(z_hat: &DMatrix<f64>, z: &DMatrix<f64>, mode: CorrelationMode) -> Result<MccResult> {
    if z_hat.shape() != z.shape() {
        return Err(Error::Dimension(format!("z_hat is {:?} but z is {:?}", z_hat.shape(), z.shape())));
    }
    let n = z.ncols();
    let prep = |m: &DMatrix<f64>| -> Result<Vec<Vec<f64>>> {
        (0..n)
            .map(|c| {
                let col = column(m, c);
                if variance(&col) == 0.0 || col.iter().any(|v| !v.is_finite()) {
                    return Err(Error::DegenerateColumn { column: c });
                }
                Ok(match mode {
                    CorrelationMode::Pearson => col,
                    CorrelationMode::Rank => ranks(&col),
                })
            })
            .collect()
    };
    let truth = prep(z)?;
    let est = prep(z_hat)?;
    let corr = DMatrix::from_fn(n, n, |i, j| pearson(&truth[i], &est[j]).abs());
    let matching = max_weight_assignment(&corr);
    let matched: Vec<f64> = matching.iter().enumerate().map(|(i, &j)| corr[(i, j)]).collect();
    let score = matched.iter().sum::<f64>() / n as f64;
    Ok(MccResult { score: score.clamp(0.0, 1.0), matching, matched_correlations: matched })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KrrConfig {
    /// RBF bandwidth; `None` uses the median heuristic.
    pub bandwidth: Option<f64>,
    pub median_pairs: usize,
    pub ridge_grid: Vec<f64>,
    pub train_fraction: f64,
    /// Rows are subsampled to at most this many before fitting.
    pub max_rows: usize,
}

impl Default for KrrConfig {
    fn default() -> Self {
        Self { bandwidth: None, median_pairs: 1000, ridge_grid: vec![1e-3, 1e-2, 1e-1, 1.0], train_fraction: 0.8, max_rows: 1500 }
    }
}

pub const KRR_MIN_ROWS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KrrFit {
    pub r2_per_column: Vec<f64>,
    pub r2_mean: f64,
    pub ridge: f64,
    pub bandwidth: f64,
    /// A larger ridge than requested had to be used to factorize the kernel.
    pub ridge_floor_applied: bool,
}

fn standardize(x: &DMatrix<f64>, rows: &[usize]) -> (DVector<f64>, DVector<f64>) {
    let d = x.ncols();
    let mut mu = DVector::zeros(d);
    let mut sd = DVector::zeros(d);
    for c in 0..d {
        let col: Vec<f64> = rows.iter().map(|&r| x[(r, c)]).collect();
        mu[c] = crate::stats::mean(&col);
        let s = variance(&col).sqrt();
        sd[c] = if s > 0.0 { s } else { 1.0 };
    }
    (mu, sd)
}

fn rbf(a: &DMatrix<f64>, b: &DMatrix<f64>, h: f64) -> DMatrix<f64> {
    let g = 1.0 / (2.0 * h * h);
    DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
        let mut d2 = 0.0;
        for c in 0..a.ncols() {
            let t = a[(i, c)] - b[(j, c)];
            d2 += t * t;
        }
        (-g * d2).exp()
    })
}

/// Solves `(K + λI) α = Y`, raising λ tenfold until the Cholesky succeeds.
fn ridge_solve(k: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> (DMatrix<f64>, bool) {
    let mut lam = lambda;
    let mut floored = false;
    loop {
        let mut a = k.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += lam;
        }
        if let Some(ch) = a.cholesky() {
            return (ch.solve(y), floored);
        }
        floored = true;
        lam = if lam == 0.0 { 1e-10 } else { lam * 10.0 };
    }
}

fn r2_columns(pred: &DMatrix<f64>, truth: &DMatrix<f64>) -> Vec<f64> {
    (0..truth.ncols())
        .map(|c| {
            let t = column(truth, c);
            let m = crate::stats::mean(&t);
            let sst: f64 = t.iter().map(|v| (v - m).powi(2)).sum();
            let sse: f64 = t.iter().zip(pred.column(c).iter()).map(|(a, b)| (a - b).powi(2)).sum();
            if sst == 0.0 {
                0.0
            } else {
                1.0 - sse / sst
            }
        })
        .collect()
}

/// Held-out R² of RBF kernel ridge regression from `features` to each column
/// of `targets`.
pub fn krr_r2(features: &DMatrix<f64>, targets: &DMatrix<f64>, cfg: &KrrConfig, seed: u64) -> Result<KrrFit> {
    let rows = features.nrows();
    if rows != targets.nrows() {
        return Err(Error::Dimension("features and targets have different row counts".into()));
    }
    if rows < KRR_MIN_ROWS {
        return Err(Error::InsufficientSamples { needed: KRR_MIN_ROWS, got: rows });
    }
    if cfg.ridge_grid.is_empty() || !(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0) {
        return Err(Error::Config("KRR needs a non-empty ridge grid and train fraction in (0,1)".into()));
    }
    let mut rng = rng_from_seed(seed);
    let mut idx: Vec<usize> = (0..rows).collect();
    idx.shuffle(&mut rng);
    idx.truncate(cfg.max_rows.max(KRR_MIN_ROWS).min(rows));
    let n_train = ((idx.len() as f64) * cfg.train_fraction).round() as usize;
    let (train, test) = idx.split_at(n_train);

    let (mu, sd) = standardize(features, train);
    let take = |rs: &[usize]| DMatrix::from_fn(rs.len(), features.ncols(), |i, c| (features[(rs[i], c)] - mu[c]) / sd[c]);
    let xtr = take(train);
    let xte = take(test);
    let ymean: Vec<f64> = (0..targets.ncols())
        .map(|c| crate::stats::mean(&train.iter().map(|&r| targets[(r, c)]).collect::<Vec<_>>()))
        .collect();
    let ytake = |rs: &[usize]| DMatrix::from_fn(rs.len(), targets.ncols(), |i, c| targets[(rs[i], c)] - ymean[c]);
    let ytr = ytake(train);
    let yte = ytake(test);

    let bandwidth = match cfg.bandwidth {
        Some(h) if h > 0.0 => h,
        Some(h) => return Err(Error::Config(format!("bandwidth must be positive, got {h}"))),
        None => {
            let mut d: Vec<f64> = (0..cfg.median_pairs.max(1))
                .map(|_| {
                    let a = rng.random_range(0..xtr.nrows());
                    let b = rng.random_range(0..xtr.nrows());
                    (xtr.row(a) - xtr.row(b)).norm()
                })
                .filter(|&v| v > 0.0)
                .collect();
            d.sort_by(f64::total_cmp);
            if d.is_empty() {
                1.0
            } else {
                d[d.len() / 2]
            }
        }
    };

    // Inner validation split of the training rows selects the ridge.
    let n_inner = ((xtr.nrows() as f64) * cfg.train_fraction).round() as usize;
    let inner_fit = xtr.rows(0, n_inner).into_owned();
    let inner_val = xtr.rows(n_inner, xtr.nrows() - n_inner).into_owned();
    let k_inner = rbf(&inner_fit, &inner_fit, bandwidth);
    let k_cross = rbf(&inner_val, &inner_fit, bandwidth);
    let y_inner = ytr.rows(0, n_inner).into_owned();
    let y_val = ytr.rows(n_inner, ytr.nrows() - n_inner).into_owned();
    let mut best = (f64::NEG_INFINITY, cfg.ridge_grid[0]);
    for &lam in &cfg.ridge_grid {
        let (alpha, _) = ridge_solve(&k_inner, &y_inner, lam);
        let score: f64 = r2_columns(&(&k_cross * alpha), &y_val).iter().sum();
        if score > best.0 {
            best = (score, lam);
        }
    }
    let ridge = best.1;
    let k = rbf(&xtr, &xtr, bandwidth);
    let (alpha, floored) = ridge_solve(&k, &ytr, ridge);
    if floored {
        log::warn!("kernel system singular at ridge {ridge}; ridge floor applied");
    }
    let pred = rbf(&xte, &xtr, bandwidth) * alpha;
    let r2 = r2_columns(&pred, &yte);
    let r2_mean = r2.iter().sum::<f64>() / r2.len() as f64;
    Ok(KrrFit { r2_per_column: r2, r2_mean, ridge, bandwidth, ridge_floor_applied: floored })
}

/// Classical Amari index of a square matrix, normalized to `[0, 1]`.
pub fn amari_index(p: &DMatrix<f64>) -> f64 {
    let n = p.nrows();
    if n < 2 {
        return 0.0;
    }
    let a = p.abs();
    let mut total = 0.0;
    for r in a.row_iter() {
        total += r.sum() / r.max() - 1.0;
    }
    for c in a.column_iter() {
        total += c.sum() / c.max() - 1.0;
    }
    total / (2.0 * n as f64 * (n as f64 - 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmariResult {
    /// Mean over samples of the Amari index of `P(s)`.
    pub per_sample: f64,
    /// Amari index of the sample mean of `|P(s)|`.
    pub global: f64,
    pub evaluated: usize,
    pub excluded: usize,
}

/// Nonlinear Amari distance between a true mixing `f` and an unmixing map,
/// using `P(s) = J_unmix(f(s)) · J_f(s)`.
pub fn nonlinear_amari(map_true: &MixingMap, unmix: &MixingMap, samples: &[Vec<f64>]) -> Result<AmariResult> {
    let n = map_true.dim();
    let mut indices = Vec::with_capacity(samples.len());
    let mut mean_abs = DMatrix::zeros(n, n);
    let mut excluded = 0;
    for s in samples {
        let p = map_true
            .forward_with_jacobian(s)
            .and_then(|(x, jf)| Ok(unmix.jacobian(&x)? * jf))
            .ok()
            .filter(|p| p.iter().all(|v| v.is_finite()) && p.determinant() != 0.0);
        match p {
            Some(p) => {
                indices.push(amari_index(&p));
                mean_abs += p.abs();
            }
            None => excluded += 1,
        }
    }
    if indices.is_empty() {
        return Err(Error::Singular(format!("P(s) singular at all {excluded} samples")));
    }
    if excluded > 0 {
        log::warn!("{excluded} samples excluded from the Amari distance");
    }
    Ok(AmariResult {
        per_sample: crate::stats::mean(&indices),
        global: amari_index(&(mean_abs / indices.len() as f64)),
        evaluated: indices.len(),
        excluded,
    })
}

/// Metric summary with provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricReport {
    pub mcc: Option<f64>,
    pub mcc_matching: Option<Vec<usize>>,
    pub r2_per_block: BTreeMap<String, f64>,
    pub amari: Option<f64>,
    pub config_hash: String,
    pub seed: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assignment_finds_optimum() {
        let w = DMatrix::from_row_slice(3, 3, &[0.1, 0.9, 0.2, 0.8, 0.85, 0.1, 0.3, 0.2, 0.7]);
        assert_eq!(max_weight_assignment(&w), vec![1, 0, 2]);
    }

    #[test]
    fn amari_examples() {
        let perm = DMatrix::from_row_slice(2, 2, &[0.0, -3.0, 0.5, 0.0]);
        assert_eq!(amari_index(&perm), 0.0);
        let c = std::f64::consts::FRAC_1_SQRT_2;
        let rot = DMatrix::from_row_slice(2, 2, &[c, -c, c, c]);
        assert!((amari_index(&rot) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_column_is_reported() {
        let z = DMatrix::from_fn(50, 2, |r, c| (r * (c + 1)) as f64);
        let mut zh = z.clone();
        zh.column_mut(1).fill(2.0);
        assert!(matches!(mcc(&zh, &z, CorrelationMode::Pearson), Err(Error::DegenerateColumn { column: 1 })));
    }
}
