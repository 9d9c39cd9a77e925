//! IMA and IGCI contrasts.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{log_abs_det, rotation2};
use crate::mixing::MixingMap;
use crate::rng::child_rng;
use crate::source::SourceDistribution;
use crate::spurious::{DarmoisMap, MpaMap};
use crate::stats::{mean, pairwise_sum, variance};

pub const DEFAULT_N_MC: usize = 100_000;
const CHUNK: usize = 4096;
/// Relative rounding error budget of one local contrast evaluation, in ulps.
const ROUNDING_ULPS: f64 = 16.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastEstimate {
    pub value: f64,
    pub stderr: f64,
    pub n_mc: usize,
    pub seed: u64,
    /// Draws dropped because the Jacobian was singular or out of domain.
    pub excluded: usize,
}

impl ContrastEstimate {
    /// Mean and standard error of per-sample terms. `scales` are the magnitudes
    /// of the quantities that were subtracted to form each term; the reported
    /// stderr never falls below the floating-point rounding of that
    /// subtraction, which matters when the true contrast is exactly zero.
    pub fn from_terms(terms: &[f64], scales: &[f64], seed: u64, excluded: usize) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::Singular(format!("all {excluded} Monte Carlo draws were singular")));
        }
        let n = terms.len();
        let value = mean(terms);
        let mc = if n > 1 { (variance(terms) / n as f64).sqrt() } else { 0.0 };
        let floor = ROUNDING_ULPS * f64::EPSILON * (mean(scales) + 1.0);
        Ok(Self { value, stderr: mc.max(floor), n_mc: n, seed, excluded })
    }

    /// `|value| ≤ k·stderr`.
    pub fn is_zero_within(&self, k: f64) -> bool {
        self.value.abs() <= k * self.stderr
    }
}

/// `(c_IMA, scale)` for a Jacobian; `scale` is the sum of magnitudes of the
/// log terms.
pub fn local_ima_of_jacobian(j: &DMatrix<f64>) -> Result<(f64, f64)> {
    let (logdet, _) = log_abs_det(j)?;
    let mut cols = 0.0;
    let mut scale = logdet.abs();
    for c in j.column_iter() {
        let l = c.norm().ln();
        cols += l;
        scale += l.abs();
    }
    Ok((cols - logdet, scale))
}

/// `Σᵢ log‖∂f/∂sᵢ‖ − log|det J_f(s)|`.
pub fn local_ima(map: &MixingMap, s: &[f64]) -> Result<f64> {
    Ok(local_ima_of_jacobian(&map.jacobian(s)?)?.0)
}

/// Draws `count` points from `source`, chunked over child seeds so the result
/// does not depend on the number of threads.
pub fn sample_source(source: &SourceDistribution, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let chunks = count.div_ceil(CHUNK);
    (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = child_rng(seed, c as u64);
            let len = CHUNK.min(count - c * CHUNK);
            (0..len).map(|_| source.sample(&mut rng)).collect::<Vec<_>>()
        })
        .collect::<Vec<_>>()
        .concat()
}

/// `C_IMA` over a fixed set of source points.
pub fn global_ima_on(map: &MixingMap, points: &[Vec<f64>], seed: u64) -> Result<ContrastEstimate> {
    let evals: Vec<Option<(f64, f64)>> =
        points.par_iter().map(|s| map.jacobian(s).and_then(|j| local_ima_of_jacobian(&j)).ok()).collect();
    collect_terms(evals, seed)
}

fn collect_terms(evals: Vec<Option<(f64, f64)>>, seed: u64) -> Result<ContrastEstimate> {
    let excluded = evals.iter().filter(|e| e.is_none()).count();
    if excluded > 0 {
        log::warn!("{excluded} draws excluded from contrast estimate (singular or out of domain)");
    }
    let (terms, scales): (Vec<f64>, Vec<f64>) = evals.into_iter().flatten().unzip();
    ContrastEstimate::from_terms(&terms, &scales, seed, excluded)
}

/// Monte Carlo estimate of `C_IMA(f, p_s) = E_s[c_IMA(f, s)]`.
pub fn global_ima(map: &MixingMap, source: &SourceDistribution, n_mc: usize, seed: u64) -> Result<ContrastEstimate> {
    source.validate()?;
    if source.dim() != map.dim() {
        return Err(Error::Dimension(format!("{}-dimensional source for a {}-dimensional map", source.dim(), map.dim())));
    }
    global_ima_on(map, &sample_source(source, n_mc, seed), seed)
}

/// `C_IMA(f^D, p_u)` where `f^D` is the inverse of a Darmois map, evaluated at
/// `u = g^D(x)` for the given observations `x` (so `u ~ p_u`). Uses
/// `J_{f^D}(u) = J_{g^D}(x)⁻¹` and avoids inverting `g^D`.
pub fn darmois_global_ima(darmois: &DarmoisMap, x: &DMatrix<f64>, seed: u64) -> Result<ContrastEstimate> {
    let rows: Vec<Vec<f64>> = x.row_iter().map(|r| r.iter().copied().collect()).collect();
    let evals: Vec<Option<(f64, f64)>> = rows
        .par_iter()
        .map(|row| {
            let jg = darmois.jacobian(row).ok()?;
            let jf = jg.try_inverse()?;
            local_ima_of_jacobian(&jf).ok()
        })
        .collect();
    collect_terms(evals, seed)
}

/// `E_p[log|det J|] − E_unif[log|det J|]` over a bounded domain. Both
/// expectations use `n_mc` draws, so a constant `log|det J|` gives exactly 0.
pub fn igci_contrast(
    map: &MixingMap,
    source: &SourceDistribution,
    domain: Option<&[(f64, f64)]>,
    n_mc: usize,
    seed: u64,
) -> Result<ContrastEstimate> {
    source.validate()?;
    let bbox = match domain {
        Some(d) => d.to_vec(),
        None => source
            .bounding_box()
            .ok_or_else(|| Error::Config("IGCI needs a bounded domain for the uniform reference".into()))?,
    };
    if bbox.len() != map.dim() || bbox.iter().any(|&(lo, hi)| !(lo < hi) || !lo.is_finite() || !hi.is_finite()) {
        return Err(Error::Config(format!("invalid IGCI domain {bbox:?}")));
    }
    let from_p = sample_source(source, n_mc, crate::rng::child_seed(seed, 0));
    let mut rng = child_rng(seed, 1);
    let from_u: Vec<Vec<f64>> = (0..n_mc)
        .map(|_| bbox.iter().map(|&(lo, hi)| lo + (hi - lo) * (1.0 - rng.random::<f64>())).collect())
        .collect();
    let logdets = |pts: &[Vec<f64>]| -> Vec<f64> {
        pts.par_iter().filter_map(|s| map.jacobian(s).ok().and_then(|j| log_abs_det(&j).ok()).map(|r| r.0)).collect()
    };
    let lp = logdets(&from_p);
    let lu = logdets(&from_u);
    let excluded = 2 * n_mc - lp.len() - lu.len();
    if lp.is_empty() || lu.is_empty() {
        return Err(Error::Singular(format!("{excluded} IGCI draws were singular")));
    }
    let value = mean(&lp) - mean(&lu);
    let se = (variance(&lp) / lp.len() as f64 + variance(&lu) / lu.len() as f64).sqrt();
    let scale = 0.5 * (pairwise_sum(&lp.iter().map(|v| v.abs()).collect::<Vec<_>>()) / lp.len() as f64
        + pairwise_sum(&lu.iter().map(|v| v.abs()).collect::<Vec<_>>()) / lu.len() as f64);
    let floor = ROUNDING_ULPS * f64::EPSILON * (scale + 1.0);
    Ok(ContrastEstimate { value, stderr: se.max(floor), n_mc, seed, excluded })
}

/// One row of a contrast-vs-angle sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub theta: f64,
    pub estimate: f64,
    pub stderr: f64,
    pub n_mc: usize,
    pub seed: u64,
}

/// `C_IMA(f ∘ a^{R(θ)}, p_s)` for each angle, with the same source draws at
/// every angle.
pub fn mpa_angle_sweep(
    mixing: &MixingMap,
    source: &SourceDistribution,
    thetas: &[f64],
    n_mc: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let SourceDistribution::Factorized { marginals } = source else {
        return Err(Error::Config("MPA sweep needs a factorized source".into()));
    };
    if marginals.len() != 2 {
        return Err(Error::Config("MPA angle sweep is defined for two sources".into()));
    }
    let points = sample_source(source, n_mc, seed);
    thetas
        .iter()
        .map(|&theta| {
            let mpa = MpaMap::new(rotation2(theta), marginals.clone())?;
            let map = mpa.into_mixing().then(mixing.clone());
            let est = global_ima_on(&map, &points, seed)?;
            Ok(SweepRow { theta, estimate: est.value, stderr: est.stderr, n_mc: est.n_mc, seed })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shear_has_half_log_two() {
        let m = MixingMap::linear(DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]));
        assert!((local_ima(&m, &[0.3, 0.1]).unwrap() - 0.5 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn polar_is_zero_everywhere() {
        for s in [[0.5, 0.1], [2.0, 3.0], [1e-3, 6.0]] {
            assert!(local_ima(&MixingMap::PolarCartesian, &s).unwrap().abs() < 1e-10);
        }
    }

    #[test]
    fn singular_jacobian_is_an_error() {
        let m = MixingMap::linear(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]));
        assert!(matches!(local_ima(&m, &[0.0, 0.0]), Err(Error::Singular(_))));
    }

    #[test]
    fn linear_igci_is_exactly_zero() {
        let m = MixingMap::linear(DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.5, 3.0]));
        let src = SourceDistribution::iid(crate::source::Marginal::Beta { a: 2.0, b: 5.0 }, 2);
        let est = igci_contrast(&m, &src, None, 2000, 3).unwrap();
        assert_eq!(est.value, 0.0);
    }

    #[test]
    fn igci_needs_bounded_domain() {
        let src = SourceDistribution::iid(crate::source::Marginal::standard_normal(), 2);
        let m = MixingMap::linear(DMatrix::identity(2, 2));
        assert!(matches!(igci_contrast(&m, &src, None, 10, 0), Err(Error::Config(_))));
    }

    #[test]
    fn sampling_is_thread_independent() {
        let src = SourceDistribution::uniform_cube(2);
        let a = sample_source(&src, 10_000, 9);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| sample_source(&src, 10_000, 9));
        assert_eq!(a, b);
    }
}
