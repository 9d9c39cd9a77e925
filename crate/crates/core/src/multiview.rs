//! Content/style latent process with paired views, and the contrastive
//! block-identification experiment.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{train_align_maxent, PairData, TrainConfig};
use crate::linalg::serde_rows;
use crate::metrics::{krr_r2, KrrConfig, MetricReport};
use crate::mixing::{InvertibleMlp, MixingMap, DEFAULT_LEAKY_SLOPE};
use crate::nn::{Activation, Mlp};
use crate::rng::{child_rng, child_seed, rng_from_seed};

/// `c ~ N(0, Σ_c)`, `s | c ~ N(a + B c, Σ_s)`; the augmented view resamples
/// each style coordinate independently with probability `change_prob` from
/// `N(s_l, Σ_A[l])`. Content occupies the first `n_c` latent coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiViewProcess {
    pub n_c: usize,
    pub n_s: usize,
    #[serde(with = "serde_rows")]
    pub sigma_c: DMatrix<f64>,
    pub a: Vec<f64>,
    #[serde(with = "serde_rows")]
    pub b: DMatrix<f64>,
    #[serde(with = "serde_rows")]
    pub sigma_s: DMatrix<f64>,
    pub change_prob: f64,
    /// Diagonal of the style perturbation covariance.
    pub sigma_a: Vec<f64>,
    pub mixing: MixingMap,
}

/// Latent and observed pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub x: DMatrix<f64>,
    pub x_tilde: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub z_tilde: DMatrix<f64>,
    /// `changed[(row, l)]` marks style coordinate `l` as resampled.
    pub changed: DMatrix<bool>,
}

impl MultiViewProcess {
    /// Independent unit-variance blocks, no causal link, invertible MLP mixing.
    pub fn independent(n_c: usize, n_s: usize, change_prob: f64, mixing_seed: u64) -> Self {
        let n = n_c + n_s;
        let mut rng = rng_from_seed(mixing_seed);
        let mlp = InvertibleMlp::random(n, 3, DEFAULT_LEAKY_SLOPE, &mut rng);
        Self {
            n_c,
            n_s,
            sigma_c: DMatrix::identity(n_c, n_c),
            a: vec![0.0; n_s],
            b: DMatrix::zeros(n_s, n_c),
            sigma_s: DMatrix::identity(n_s, n_s),
            change_prob,
            sigma_a: vec![1.0; n_s],
            mixing: MixingMap::InvertibleMlp(mlp),
        }
    }

    /// As [`MultiViewProcess::independent`] with style causally dependent on
    /// content through standard-normal entries of `B` and offsets `a`.
    pub fn causal(n_c: usize, n_s: usize, change_prob: f64, mixing_seed: u64) -> Self {
        let mut p = Self::independent(n_c, n_s, change_prob, mixing_seed);
        let mut rng = child_rng(mixing_seed, 1);
        p.b = DMatrix::from_fn(n_s, n_c, |_, _| rng.sample::<f64, _>(StandardNormal));
        p.a = (0..n_s).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        p
    }

    pub fn dim(&self) -> usize {
        self.n_c + self.n_s
    }

    pub fn validate(&self) -> Result<()> {
        let (nc, ns) = (self.n_c, self.n_s);
        if nc == 0 || self.mixing.dim() != nc + ns {
            return Err(Error::Config(format!("mixing dimension {} does not equal n_c + n_s = {}", self.mixing.dim(), nc + ns)));
        }
        if self.sigma_c.shape() != (nc, nc) || self.sigma_s.shape() != (ns, ns) || self.b.shape() != (ns, nc) {
            return Err(Error::Config("block parameter shapes do not match n_c, n_s".into()));
        }
        if self.a.len() != ns || self.sigma_a.len() != ns {
            return Err(Error::Config("a and sigma_a need n_s entries".into()));
        }
        if !(self.change_prob > 0.0 && self.change_prob <= 1.0) {
            return Err(Error::Config(format!("change_prob must lie in (0,1], got {}", self.change_prob)));
        }
        if self.sigma_a.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Config("sigma_a entries must be positive".into()));
        }
        if self.sigma_c.clone().cholesky().is_none() || (ns > 0 && self.sigma_s.clone().cholesky().is_none()) {
            return Err(Error::Config("covariances must be positive definite".into()));
        }
        Ok(())
    }

    /// Draws `count` latent vectors `z = (c, s)`.
    pub fn sample_latents<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> DMatrix<f64> {
        let lc = self.sigma_c.clone().cholesky().expect("validated covariance").l();
        let ls = if self.n_s > 0 { self.sigma_s.clone().cholesky().expect("validated covariance").l() } else { DMatrix::zeros(0, 0) };
        let mut z = DMatrix::zeros(count, self.dim());
        for r in 0..count {
            let ec = DVector::from_fn(self.n_c, |_, _| rng.sample::<f64, _>(StandardNormal));
            let c = &lc * ec;
            let es = DVector::from_fn(self.n_s, |_, _| rng.sample::<f64, _>(StandardNormal));
            let s = DVector::from_column_slice(&self.a) + &self.b * &c + &ls * es;
            for j in 0..self.n_c {
                z[(r, j)] = c[j];
            }
            for j in 0..self.n_s {
                z[(r, self.n_c + j)] = s[j];
            }
        }
        z
    }

    fn perturb<R: Rng + ?Sized>(&self, z: &DMatrix<f64>, rng: &mut R) -> (DMatrix<f64>, DMatrix<bool>) {
        let mut zt = z.clone();
        let mut changed = DMatrix::from_element(z.nrows(), self.n_s, false);
        for r in 0..z.nrows() {
            for l in 0..self.n_s {
                if rng.random::<f64>() < self.change_prob {
                    changed[(r, l)] = true;
                    zt[(r, self.n_c + l)] += self.sigma_a[l].sqrt() * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        (zt, changed)
    }

    fn mix(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut x = DMatrix::zeros(z.nrows(), self.dim());
        for r in 0..z.nrows() {
            let row: Vec<f64> = z.row(r).iter().copied().collect();
            let out = self.mixing.forward(&row)?;
            for (c, v) in out.into_iter().enumerate() {
                x[(r, c)] = v;
            }
        }
        Ok(x)
    }

    /// Pairs `(x, x̃)` sharing content. With `two_views`, both elements are
    /// independent augmentations `(x̃, x̃′)` of the same latent draw.
    pub fn sample_pairs(&self, count: usize, seed: u64, two_views: bool) -> Result<PairSample> {
        self.validate()?;
        let mut rng = rng_from_seed(seed);
        let z0 = self.sample_latents(count, &mut rng);
        let (z, first_changed) = if two_views { self.perturb(&z0, &mut rng) } else { (z0.clone(), DMatrix::from_element(count, self.n_s, false)) };
        let (z_tilde, mut changed) = self.perturb(&z0, &mut rng);
        if two_views {
            // Coordinates that differ between the two augmented views.
            for (c, f) in changed.iter_mut().zip(first_changed.iter()) {
                *c = *c || *f;
            }
        }
        Ok(PairSample { x: self.mix(&z)?, x_tilde: self.mix(&z_tilde)?, z, z_tilde, changed })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContentExperimentConfig {
    pub pairs: usize,
    /// Encoder output size; defaults to `n_c`.
    pub dim_c: Option<usize>,
    pub hidden: Vec<usize>,
    pub leaky_slope: f64,
    /// Fresh observations used for the R² evaluation.
    pub eval_rows: usize,
    pub train: TrainConfig,
    pub krr: KrrConfig,
    pub two_views: bool,
}

impl Default for ContentExperimentConfig {
    fn default() -> Self {
        Self {
            pairs: 20_000,
            dim_c: None,
            hidden: vec![64, 64],
            leaky_slope: 0.01,
            eval_rows: 2000,
            train: TrainConfig { epochs: 40, patience: 10, tau: 0.005, ..TrainConfig::default() },
            krr: KrrConfig::default(),
            two_views: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContentExperimentResult {
    pub report: MetricReport,
    /// Fraction of encoder outputs within 1e-3 of 0 or 1.
    pub saturation: f64,
    pub collapsed: bool,
    pub epochs: usize,
}

/// Trains a contrastive encoder on pairs and scores how well its output
/// predicts the content and style blocks.
pub fn content_experiment(proc_: &MultiViewProcess, cfg: &ContentExperimentConfig, seed: u64) -> Result<ContentExperimentResult> {
    proc_.validate()?;
    let dim_c = cfg.dim_c.unwrap_or(proc_.n_c);
    if dim_c == 0 {
        return Err(Error::Config("dim_c must be positive".into()));
    }
    let data = proc_.sample_pairs(cfg.pairs, child_seed(seed, 0), cfg.two_views)?;
    let pairs = PairData::new(data.x, data.x_tilde)?;
    let mut widths = vec![proc_.dim()];
    widths.extend_from_slice(&cfg.hidden);
    widths.push(dim_c);
    let encoder = Mlp::new(
        &widths,
        Activation::LeakyRelu { slope: cfg.leaky_slope },
        Activation::Sigmoid,
        1.0,
        &mut child_rng(seed, 1),
    );
    let train_cfg = TrainConfig { seed: child_seed(seed, 2), ..cfg.train.clone() };
    let outcome = train_align_maxent(encoder, &pairs, &train_cfg)?;

    let mut rng = child_rng(seed, 3);
    let z = proc_.sample_latents(cfg.eval_rows, &mut rng);
    let x = proc_.mix(&z)?;
    let c_hat = outcome.model.eval(&x);
    let saturation = c_hat.iter().filter(|&&v| !(1e-3..=1.0 - 1e-3).contains(&v)).count() as f64 / c_hat.len() as f64;
    let content = z.columns(0, proc_.n_c).into_owned();
    let krr_cfg = KrrConfig { max_rows: cfg.krr.max_rows.min(cfg.eval_rows), ..cfg.krr.clone() };
    let mut report = MetricReport { seed, ..Default::default() };
    report.r2_per_block.insert("content".into(), krr_r2(&c_hat, &content, &krr_cfg, child_seed(seed, 4))?.r2_mean);
    if proc_.n_s > 0 {
        let style = z.columns(proc_.n_c, proc_.n_s).into_owned();
        report.r2_per_block.insert("style".into(), krr_r2(&c_hat, &style, &krr_cfg, child_seed(seed, 5))?.r2_mean);
    }
    Ok(ContentExperimentResult { report, saturation, collapsed: outcome.collapsed, epochs: outcome.history.len() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn content_is_shared_exactly() {
        let p = MultiViewProcess::causal(2, 2, 0.5, 3);
        let s = p.sample_pairs(500, 1, false).unwrap();
        for r in 0..500 {
            for j in 0..2 {
                assert_eq!(s.z[(r, j)].to_bits(), s.z_tilde[(r, j)].to_bits());
            }
        }
    }

    #[test]
    fn unchanged_style_is_unchanged() {
        let p = MultiViewProcess::independent(1, 3, 0.3, 2);
        let s = p.sample_pairs(300, 4, false).unwrap();
        for r in 0..300 {
            for l in 0..3 {
                let same = s.z[(r, 1 + l)] == s.z_tilde[(r, 1 + l)];
                assert_eq!(same, !s.changed[(r, l)]);
            }
        }
    }

    #[test]
    fn invalid_change_probability() {
        let mut p = MultiViewProcess::independent(2, 2, 0.5, 0);
        p.change_prob = 0.0;
        assert!(p.validate().is_err());
    }
}
