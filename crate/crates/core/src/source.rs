//! Source (latent) distributions used to drive Monte Carlo estimates.

use rand::Rng;
use rand_distr::{Beta as BetaSampler, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, Continuous, ContinuousCDF};

use crate::error::{Error, Result};
use crate::stats::{normal_log_pdf, std_normal_cdf, std_normal_quantile};

/// A univariate continuous distribution with analytic CDF.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Marginal {
    Uniform { low: f64, high: f64 },
    Normal { mean: f64, sd: f64 },
    Beta { a: f64, b: f64 },
    Laplace { loc: f64, scale: f64 },
}

impl Marginal {
    pub fn unit_uniform() -> Self {
        Marginal::Uniform { low: 0.0, high: 1.0 }
    }

    pub fn standard_normal() -> Self {
        Marginal::Normal { mean: 0.0, sd: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Marginal::Uniform { low, high } => low < high && low.is_finite() && high.is_finite(),
            Marginal::Normal { sd, .. } => sd > 0.0,
            Marginal::Beta { a, b } => a > 0.0 && b > 0.0,
            Marginal::Laplace { scale, .. } => scale > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid marginal parameters {self:?}")))
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Marginal::Uniform { low, high } => low + (high - low) * rng.random::<f64>(),
            Marginal::Normal { mean, sd } => mean + sd * rng.sample::<f64, _>(StandardNormal),
            Marginal::Beta { a, b } => BetaSampler::new(a, b).expect("validated beta").sample(rng),
            Marginal::Laplace { loc, scale } => {
                let u: f64 = rng.random::<f64>() - 0.5;
                loc - scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
            }
        }
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        match *self {
            Marginal::Uniform { low, high } => {
                if (low..=high).contains(&x) {
                    -(high - low).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
            Marginal::Normal { mean, sd } => normal_log_pdf(x, mean, sd),
            Marginal::Beta { a, b } => Beta::new(a, b).expect("validated beta").ln_pdf(x),
            Marginal::Laplace { loc, scale } => -(x - loc).abs() / scale - (2.0 * scale).ln(),
        }
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.log_pdf(x).exp()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match *self {
            Marginal::Uniform { low, high } => ((x - low) / (high - low)).clamp(0.0, 1.0),
            Marginal::Normal { mean, sd } => std_normal_cdf((x - mean) / sd),
            Marginal::Beta { a, b } => Beta::new(a, b).expect("validated beta").cdf(x),
            Marginal::Laplace { loc, scale } => {
                let z = (x - loc) / scale;
                if z < 0.0 {
                    0.5 * z.exp()
                } else {
                    1.0 - 0.5 * (-z).exp()
                }
            }
        }
    }

    pub fn quantile(&self, p: f64) -> f64 {
        match *self {
            Marginal::Uniform { low, high } => low + (high - low) * p,
            Marginal::Normal { mean, sd } => mean + sd * std_normal_quantile(p),
            Marginal::Beta { a, b } => Beta::new(a, b).expect("validated beta").inverse_cdf(p),
            Marginal::Laplace { loc, scale } => {
                if p < 0.5 {
                    loc + scale * (2.0 * p).ln()
                } else {
                    loc - scale * (2.0 - 2.0 * p).ln()
                }
            }
        }
    }

    /// Bounded support, if any.
    pub fn support(&self) -> Option<(f64, f64)> {
        match *self {
            Marginal::Uniform { low, high } => Some((low, high)),
            Marginal::Beta { .. } => Some((0.0, 1.0)),
            _ => None,
        }
    }

    pub fn is_gaussian(&self) -> bool {
        matches!(self, Marginal::Normal { .. })
    }
}

/// Multivariate source distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SourceDistribution {
    /// Independent coordinates.
    Factorized { marginals: Vec<Marginal> },
    /// Polar coordinates `(r, θ)` with `r ~ U(0, r_max)`, `θ ~ U(0, 2π)`.
    Polar { r_max: f64 },
}

impl SourceDistribution {
    pub fn iid(marginal: Marginal, n: usize) -> Self {
        SourceDistribution::Factorized { marginals: vec![marginal; n] }
    }

    pub fn uniform_cube(n: usize) -> Self {
        Self::iid(Marginal::unit_uniform(), n)
    }

    pub fn dim(&self) -> usize {
        match self {
            SourceDistribution::Factorized { marginals } => marginals.len(),
            SourceDistribution::Polar { .. } => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            SourceDistribution::Factorized { marginals } => marginals.iter().try_for_each(Marginal::validate),
            SourceDistribution::Polar { r_max } if *r_max > 0.0 => Ok(()),
            SourceDistribution::Polar { .. } => Err(Error::Config("polar source needs r_max > 0".into())),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            SourceDistribution::Factorized { marginals } => marginals.iter().map(|m| m.sample(rng)).collect(),
            SourceDistribution::Polar { r_max } => {
                let r = r_max * (1.0 - rng.random::<f64>());
                let theta = std::f64::consts::TAU * rng.random::<f64>();
                vec![r, theta]
            }
        }
    }

    pub fn log_pdf(&self, s: &[f64]) -> f64 {
        match self {
            SourceDistribution::Factorized { marginals } => marginals.iter().zip(s).map(|(m, &x)| m.log_pdf(x)).sum(),
            SourceDistribution::Polar { r_max } => {
                if s[0] > 0.0 && s[0] <= *r_max && (0.0..std::f64::consts::TAU).contains(&s[1]) {
                    -(r_max * std::f64::consts::TAU).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    /// Axis-aligned bounding box of the support, if bounded.
    pub fn bounding_box(&self) -> Option<Vec<(f64, f64)>> {
        match self {
            SourceDistribution::Factorized { marginals } => marginals.iter().map(Marginal::support).collect(),
            SourceDistribution::Polar { r_max } => Some(vec![(0.0, *r_max), (0.0, std::f64::consts::TAU)]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn quantile_inverts_cdf() {
        let ms = [
            Marginal::unit_uniform(),
            Marginal::Normal { mean: 1.0, sd: 2.0 },
            Marginal::Beta { a: 2.0, b: 1.0 },
            Marginal::Laplace { loc: -0.5, scale: 0.7 },
        ];
        for m in ms {
            for p in [0.01, 0.2, 0.5, 0.77, 0.99] {
                assert!((m.cdf(m.quantile(p)) - p).abs() < 1e-8, "{m:?} at {p}");
            }
        }
    }

    #[test]
    fn laplace_samples_match_cdf() {
        let m = Marginal::Laplace { loc: 0.0, scale: 1.0 };
        let mut rng = rng_from_seed(5);
        let xs: Vec<f64> = (0..20_000).map(|_| m.sample(&mut rng)).collect();
        let d = crate::stats::ks_statistic(&xs, |x| m.cdf(x));
        assert!(d < crate::stats::ks_one_sample_critical(0.01, xs.len()));
    }

    #[test]
    fn polar_samples_stay_in_domain() {
        let src = SourceDistribution::Polar { r_max: 3.0 };
        let mut rng = rng_from_seed(1);
        for _ in 0..1000 {
            let s = src.sample(&mut rng);
            assert!(s[0] > 0.0 && s[0] <= 3.0);
            assert!(src.log_pdf(&s).is_finite());
        }
    }
}
