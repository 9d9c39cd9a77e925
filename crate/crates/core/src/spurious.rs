//! Spurious nonlinear-ICA solutions: the Darmois construction and
//! rotated-Gaussian measure-preserving automorphisms (MPAs).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::serde_rows;
use crate::source::Marginal;
use crate::stats::{std_normal_cdf, std_normal_pdf, std_normal_quantile};

pub const MIN_EMPIRICAL_SAMPLES: usize = 1000;
pub const MAX_EMPIRICAL_DIM: usize = 3;
pub const DEFAULT_TAIL_CLAMP: f64 = 1e-12;
/// Kernel weights beyond this many bandwidths are treated as zero.
const WINDOW: f64 = 6.0;
const MEDIAN_PAIRS: usize = 2000;

/// Per-stage conditional-CDF estimator built from samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalDarmois {
    /// Samples sorted by the first coordinate.
    #[serde(with = "serde_rows")]
    samples: DMatrix<f64>,
    /// Smoothing bandwidth in each stage's own coordinate.
    own_bandwidth: Vec<f64>,
    /// Kernel bandwidth over the conditioning coordinates of stage `i ≥ 1`
    /// (entry 0 unused).
    cond_bandwidth: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum DarmoisMap {
    /// Gaussian `N(mean, L Lᵀ)`: stage `i` is `Φ(ε_i)` with `ε = L⁻¹(x − mean)`.
    AnalyticGaussian {
        mean: Vec<f64>,
        #[serde(with = "serde_rows")]
        chol: DMatrix<f64>,
    },
    Empirical(EmpiricalDarmois),
}

impl DarmoisMap {
    pub fn gaussian(mean: Vec<f64>, covariance: &DMatrix<f64>) -> Result<Self> {
        if covariance.nrows() != mean.len() || !covariance.is_square() {
            return Err(Error::Dimension("covariance does not match mean".into()));
        }
        let chol = covariance
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Singular("covariance is not positive definite".into()))?
            .l();
        Ok(DarmoisMap::AnalyticGaussian { mean, chol })
    }

    /// Builds the empirical construction from samples (rows = observations).
    pub fn empirical(samples: &DMatrix<f64>) -> Result<Self> {
        let (count, n) = samples.shape();
        if count < MIN_EMPIRICAL_SAMPLES {
            return Err(Error::InsufficientSamples { needed: MIN_EMPIRICAL_SAMPLES, got: count });
        }
        if n == 0 || n > MAX_EMPIRICAL_DIM {
            return Err(Error::Capacity(format!("empirical Darmois supports 1..={MAX_EMPIRICAL_DIM} dimensions, got {n}")));
        }
        let mut order: Vec<usize> = (0..count).collect();
        order.sort_by(|&a, &b| samples[(a, 0)].total_cmp(&samples[(b, 0)]));
        let sorted = DMatrix::from_fn(count, n, |r, c| samples[(order[r], c)]);

        let nf = count as f64;
        let mut own_bandwidth = Vec::with_capacity(n);
        for c in 0..n {
            let col: Vec<f64> = sorted.column(c).iter().copied().collect();
            let sd = crate::stats::variance(&col).sqrt();
            if sd == 0.0 {
                return Err(Error::DegenerateColumn { column: c });
            }
            // Smoothing of the CDF itself needs less than density smoothing.
            own_bandwidth.push(sd * nf.powf(-1.0 / 3.0) * 0.5);
        }
        let mut cond_bandwidth = vec![0.0; n];
        for (i, bw) in cond_bandwidth.iter_mut().enumerate().skip(1) {
            let med = median_pairwise_distance(&sorted, i);
            *bw = med * nf.powf(-1.0 / (4.0 + i as f64));
        }
        Ok(DarmoisMap::Empirical(EmpiricalDarmois { samples: sorted, own_bandwidth, cond_bandwidth }))
    }

    pub fn dim(&self) -> usize {
        match self {
            DarmoisMap::AnalyticGaussian { mean, .. } => mean.len(),
            DarmoisMap::Empirical(e) => e.samples.ncols(),
        }
    }

    fn check(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::Dimension(format!("expected length {}, got {}", self.dim(), v.len())));
        }
        Ok(())
    }

    /// `g^D(x)`, the vector of conditional CDF values.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        match self {
            DarmoisMap::AnalyticGaussian { mean, chol } => {
                let eps = whiten(mean, chol, x)?;
                Ok(eps.iter().map(|&e| std_normal_cdf(e)).collect())
            }
            DarmoisMap::Empirical(e) => Ok((0..x.len()).map(|i| e.stage(i, x).0).collect()),
        }
    }

    /// Lower-triangular Jacobian of `g^D` at `x`.
    pub fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check(x)?;
        let n = x.len();
        match self {
            DarmoisMap::AnalyticGaussian { mean, chol } => {
                let eps = whiten(mean, chol, x)?;
                let linv = chol
                    .clone()
                    .solve_lower_triangular(&DMatrix::identity(n, n))
                    .ok_or_else(|| Error::Singular("Cholesky factor".into()))?;
                let d = DVector::from_iterator(n, eps.iter().map(|&e| std_normal_pdf(e)));
                Ok(DMatrix::from_diagonal(&d) * linv)
            }
            DarmoisMap::Empirical(e) => {
                let mut j = DMatrix::zeros(n, n);
                for i in 0..n {
                    let (_, grad) = e.stage(i, x);
                    for (c, g) in grad.into_iter().enumerate() {
                        j[(i, c)] = g;
                    }
                }
                Ok(j)
            }
        }
    }

    /// `f^D(u) = (g^D)⁻¹(u)` for `u ∈ (0,1)ⁿ`.
    pub fn inverse(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.check(u)?;
        if u.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
            return Err(Error::Domain(format!("{u:?} is outside the open unit cube")));
        }
        match self {
            DarmoisMap::AnalyticGaussian { mean, chol } => {
                let eps = DVector::from_iterator(u.len(), u.iter().map(|&p| std_normal_quantile(p)));
                let x = chol * eps;
                Ok(x.iter().zip(mean).map(|(a, m)| a + m).collect())
            }
            DarmoisMap::Empirical(e) => {
                let mut x = vec![0.0; u.len()];
                for i in 0..u.len() {
                    x[i] = e.invert_stage(i, &x, u[i])?;
                }
                Ok(x)
            }
        }
    }

    /// Packages `f^D` as a mixing map.
    pub fn into_mixing(self) -> crate::mixing::MixingMap {
        crate::mixing::MixingMap::Darmois(Box::new(self))
    }
}

fn whiten(mean: &[f64], chol: &DMatrix<f64>, x: &[f64]) -> Result<DVector<f64>> {
    let d = DVector::from_iterator(x.len(), x.iter().zip(mean).map(|(a, m)| a - m));
    chol.solve_lower_triangular(&d).ok_or_else(|| Error::Singular("Cholesky factor".into()))
}

fn median_pairwise_distance(samples: &DMatrix<f64>, dims: usize) -> f64 {
    let count = samples.nrows();
    // Deterministic stride over pairs; samples are sorted, so pair far-apart indices.
    let mut d: Vec<f64> = (0..MEDIAN_PAIRS.min(count / 2))
        .map(|k| {
            let a = (k * 7919) % count;
            let b = (a + count / 2 + k) % count;
            (0..dims).map(|c| (samples[(a, c)] - samples[(b, c)]).powi(2)).sum::<f64>().sqrt()
        })
        .collect();
    d.sort_by(f64::total_cmp);
    d[d.len() / 2]
}

impl EmpiricalDarmois {
    /// Value and gradient (length `n`, zero beyond `i`) of stage `i` at `x`.
    fn stage(&self, i: usize, x: &[f64]) -> (f64, Vec<f64>) {
        let n = self.samples.ncols();
        let count = self.samples.nrows();
        let hi = self.own_bandwidth[i];
        let mut grad = vec![0.0; n];
        if i == 0 {
            let (lo, up) = self.window(x[0], WINDOW * hi);
            let mut f = lo as f64;
            let mut dens = 0.0;
            for r in lo..up {
                let z = (x[0] - self.samples[(r, 0)]) / hi;
                f += std_normal_cdf(z);
                dens += std_normal_pdf(z);
            }
            grad[0] = dens / (hi * count as f64);
            return ((f / count as f64).clamp(0.0, 1.0), grad);
        }
        let hc = self.cond_bandwidth[i];
        let (lo, up) = self.window(x[0], WINDOW * hc);
        let (mut w_sum, mut wf, mut wd) = (0.0, 0.0, 0.0);
        let mut dw = vec![0.0; i];
        let mut dwf = vec![0.0; i];
        for r in lo..up {
            let mut d2 = 0.0;
            for c in 0..i {
                d2 += (x[c] - self.samples[(r, c)]).powi(2);
            }
            let w = (-0.5 * d2 / (hc * hc)).exp();
            if w == 0.0 {
                continue;
            }
            let z = (x[i] - self.samples[(r, i)]) / hi;
            let phi_cdf = std_normal_cdf(z);
            w_sum += w;
            wf += w * phi_cdf;
            wd += w * std_normal_pdf(z) / hi;
            for c in 0..i {
                let dwc = -w * (x[c] - self.samples[(r, c)]) / (hc * hc);
                dw[c] += dwc;
                dwf[c] += dwc * phi_cdf;
            }
        }
        if w_sum == 0.0 {
            // Far outside the data: fall back to the marginal of this coordinate.
            let col = self.samples.column(i);
            let f = col.iter().filter(|&&v| v <= x[i]).count() as f64 / count as f64;
            return (f, grad);
        }
        let f = wf / w_sum;
        grad[i] = wd / w_sum;
        for c in 0..i {
            grad[c] = (dwf[c] * w_sum - wf * dw[c]) / (w_sum * w_sum);
        }
        (f.clamp(0.0, 1.0), grad)
    }

    /// Index range of samples with first coordinate within `radius` of `x0`.
    fn window(&self, x0: f64, radius: f64) -> (usize, usize) {
        let col = self.samples.column(0);
        let slice = col.as_slice();
        let lo = slice.partition_point(|&v| v < x0 - radius);
        let up = slice.partition_point(|&v| v <= x0 + radius);
        (lo, up)
    }

    fn invert_stage(&self, i: usize, prefix: &[f64], target: f64) -> Result<f64> {
        let col = self.samples.column(i);
        let (min, max) = col.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let pad = 40.0 * self.own_bandwidth[i];
        let mut lo = min - pad;
        let mut hi = max + pad;
        let mut x = prefix.to_vec();
        let eval = |x: &mut Vec<f64>, v: f64| {
            x[i] = v;
            self.stage(i, x)
        };
        let (flo, _) = eval(&mut x, lo);
        let (fhi, _) = eval(&mut x, hi);
        if target <= flo || target >= fhi {
            return Err(Error::Domain(format!("stage {i} CDF value {target} is outside the estimated range")));
        }
        let mut v = 0.5 * (lo + hi);
        for _ in 0..200 {
            let (f, g) = eval(&mut x, v);
            let r = f - target;
            if r.abs() < 1e-13 {
                return Ok(v);
            }
            if r > 0.0 {
                hi = v;
            } else {
                lo = v;
            }
            let step = v - r / g[i];
            v = if g[i] > 0.0 && step > lo && step < hi { step } else { 0.5 * (lo + hi) };
            if hi - lo < 1e-14 * (1.0 + v.abs()) {
                return Ok(v);
            }
        }
        Ok(v)
    }
}

/// `a^R = F⁻¹ ∘ Φ ∘ R ∘ Φ⁻¹ ∘ F` with per-coordinate source CDFs `F`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpaMap {
    #[serde(with = "serde_rows")]
    pub rotation: DMatrix<f64>,
    pub marginals: Vec<Marginal>,
    #[serde(default = "default_clamp")]
    pub clamp: f64,
}

fn default_clamp() -> f64 {
    DEFAULT_TAIL_CLAMP
}

impl MpaMap {
    pub fn new(rotation: DMatrix<f64>, marginals: Vec<Marginal>) -> Result<Self> {
        let n = marginals.len();
        if rotation.shape() != (n, n) {
            return Err(Error::Dimension(format!("{}x{} rotation for {n} marginals", rotation.nrows(), rotation.ncols())));
        }
        let err = (rotation.transpose() * &rotation - DMatrix::identity(n, n)).abs().max();
        if err > 1e-10 {
            return Err(Error::Config(format!("rotation is not orthogonal (RᵀR − I max {err:e})")));
        }
        marginals.iter().try_for_each(Marginal::validate)?;
        Ok(Self { rotation, marginals, clamp: DEFAULT_TAIL_CLAMP })
    }

    pub fn dim(&self) -> usize {
        self.marginals.len()
    }

    /// Source coordinate to standard Gaussian, with its derivative.
    fn gaussianize(&self, m: &Marginal, s: f64) -> (f64, f64) {
        if let Marginal::Normal { mean, sd } = *m {
            return ((s - mean) / sd, 1.0 / sd);
        }
        let p = m.cdf(s);
        let pc = p.clamp(self.clamp, 1.0 - self.clamp);
        if pc != p {
            log::warn!("MPA tail clamp active at s = {s}");
        }
        let z = std_normal_quantile(pc);
        (z, m.pdf(s) / std_normal_pdf(z))
    }

    /// Standard Gaussian to source coordinate, with its derivative.
    fn degaussianize(&self, m: &Marginal, y: f64) -> (f64, f64) {
        if let Marginal::Normal { mean, sd } = *m {
            return (mean + sd * y, sd);
        }
        let p = std_normal_cdf(y).clamp(self.clamp, 1.0 - self.clamp);
        let out = m.quantile(p);
        (out, std_normal_pdf(y) / m.pdf(out))
    }

    fn check(&self, s: &[f64]) -> Result<()> {
        if s.len() != self.dim() {
            return Err(Error::Dimension(format!("expected length {}, got {}", self.dim(), s.len())));
        }
        for (m, &v) in self.marginals.iter().zip(s) {
            if let Some((lo, hi)) = m.support() {
                if !(v >= lo && v <= hi) {
                    return Err(Error::Domain(format!("{v} outside source support [{lo}, {hi}]")));
                }
            }
        }
        Ok(())
    }

    fn run(&self, s: &[f64], rot: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
        self.check(s)?;
        let n = self.dim();
        let (z, dz): (Vec<f64>, Vec<f64>) =
            self.marginals.iter().zip(s).map(|(m, &v)| self.gaussianize(m, v)).unzip();
        let y = rot * DVector::from_vec(z);
        let (out, dout): (Vec<f64>, Vec<f64>) =
            self.marginals.iter().zip(y.iter()).map(|(m, &v)| self.degaussianize(m, v)).unzip();
        let jac = DMatrix::from_fn(n, n, |i, j| dout[i] * rot[(i, j)] * dz[j]);
        Ok((out, jac))
    }

    pub fn apply(&self, s: &[f64]) -> Result<Vec<f64>> {
        Ok(self.run(s, &self.rotation)?.0)
    }

    pub fn apply_with_jacobian(&self, s: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        self.run(s, &self.rotation)
    }

    pub fn apply_inverse(&self, s: &[f64]) -> Result<Vec<f64>> {
        Ok(self.run(s, &self.rotation.transpose())?.0)
    }

    pub fn into_mixing(self) -> crate::mixing::MixingMap {
        crate::mixing::MixingMap::Mpa(Box::new(self))
    }
}
