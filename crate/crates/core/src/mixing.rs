//! Invertible differentiable maps from latent space to observation space.
//!
//! Every [`MixingMap`] provides `forward`, `inverse` and an analytic
//! `jacobian` (`J[i][j] = ∂f_i/∂s_j`). Compositions apply their parts in
//! list order, so `Composition([g, f])` is `f ∘ g`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{invert_permutation, is_permutation, permutation_matrix, random_orthogonal, serde_rows};
use crate::spurious::{DarmoisMap, MpaMap};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;
const MLP_INVERSE_TOL: f64 = 1e-10;
const MLP_INVERSE_MAX_ITER: usize = 100;

/// Strictly monotone scalar reparametrization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScalarMap {
    /// `v ↦ scale·v + shift`, `scale ≠ 0`.
    Affine { scale: f64, shift: f64 },
    /// `v ↦ a·v³ + b·v`, `a ≥ 0`, `b > 0`.
    Cubic { a: f64, b: f64 },
    /// `v ↦ v^exponent` on `v > 0`, `exponent > 0`.
    Power { exponent: f64 },
}

impl ScalarMap {
    /// `v ↦ v³ + v`.
    pub fn cubic() -> Self {
        ScalarMap::Cubic { a: 1.0, b: 1.0 }
    }

    pub fn identity() -> Self {
        ScalarMap::Affine { scale: 1.0, shift: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ScalarMap::Affine { scale, .. } if scale != 0.0 && scale.is_finite() => Ok(()),
            ScalarMap::Cubic { a, b } if a >= 0.0 && b > 0.0 => Ok(()),
            ScalarMap::Power { exponent } if exponent > 0.0 => Ok(()),
            _ => Err(Error::Config(format!("scalar map {self:?} is not a diffeomorphism"))),
        }
    }

    pub fn in_domain(&self, v: f64) -> bool {
        match self {
            ScalarMap::Power { .. } => v > 0.0,
            _ => v.is_finite(),
        }
    }

    pub fn eval(&self, v: f64) -> f64 {
        match *self {
            ScalarMap::Affine { scale, shift } => scale * v + shift,
            ScalarMap::Cubic { a, b } => a * v * v * v + b * v,
            ScalarMap::Power { exponent } => v.powf(exponent),
        }
    }

    pub fn derivative(&self, v: f64) -> f64 {
        match *self {
            ScalarMap::Affine { scale, .. } => scale,
            ScalarMap::Cubic { a, b } => 3.0 * a * v * v + b,
            ScalarMap::Power { exponent } => exponent * v.powf(exponent - 1.0),
        }
    }

    pub fn inverse(&self, y: f64) -> f64 {
        match *self {
            ScalarMap::Affine { scale, shift } => (y - shift) / scale,
            ScalarMap::Power { exponent } => y.powf(1.0 / exponent),
            ScalarMap::Cubic { a, b } => {
                if a == 0.0 {
                    return y / b;
                }
                // Cardano for the depressed cubic v³ + p v - q = 0, then Newton polish.
                let p = b / a;
                let q = y / a;
                let disc = (q / 2.0).powi(2) + (p / 3.0).powi(3);
                let sq = disc.sqrt();
                let mut v = (q / 2.0 + sq).cbrt() + (q / 2.0 - sq).cbrt();
                for _ in 0..3 {
                    let f = self.eval(v) - y;
                    v -= f / self.derivative(v);
                }
                v
            }
        }
    }
}

/// `x = shift + scale·R·φ(s - center)` with `φ(d) = d/‖d‖²` (inversion in the
/// unit sphere) when `inversion` is set and `φ(d) = d` otherwise. Both are
/// conformal: `Jᵀ J` is a multiple of the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moebius {
    pub center: Vec<f64>,
    pub shift: Vec<f64>,
    pub scale: f64,
    #[serde(with = "serde_rows")]
    pub rotation: DMatrix<f64>,
    pub inversion: bool,
}

impl Moebius {
    pub fn identity(n: usize) -> Self {
        Self { center: vec![0.0; n], shift: vec![0.0; n], scale: 1.0, rotation: DMatrix::identity(n, n), inversion: false }
    }

    /// Random inversion-type Möbius map. The singular point is drawn from a box
    /// around `[low, high]^n` and rejected while it lies within `margin` of the
    /// source domain, so the map is smooth on the whole domain.
    pub fn random<R: Rng + ?Sized>(n: usize, low: f64, high: f64, margin: f64, rng: &mut R) -> Self {
        let width = high - low;
        let center = loop {
            let c: Vec<f64> = (0..n).map(|_| low - width + 3.0 * width * rng.random::<f64>()).collect();
            let inside = c.iter().all(|&x| x > low - margin && x < high + margin);
            if !inside {
                break c;
            }
        };
        let shift = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Self { center, shift, scale: 1.0, rotation: random_orthogonal(n, rng), inversion: true }
    }

    fn dim(&self) -> usize {
        self.center.len()
    }

    fn forward(&self, s: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let n = self.dim();
        let d = DVector::from_iterator(n, s.iter().zip(&self.center).map(|(a, c)| a - c));
        let (phi, jphi) = if self.inversion {
            let r2 = d.norm_squared();
            if r2 == 0.0 || !r2.is_finite() {
                return Err(Error::Domain("Möbius map evaluated at its singular point".into()));
            }
            let u = &d / r2.sqrt();
            let j = (DMatrix::identity(n, n) - 2.0 * &u * u.transpose()) / r2;
            (&d / r2, j)
        } else {
            (d, DMatrix::identity(n, n))
        };
        let rot = &self.rotation * self.scale;
        let x = &rot * phi;
        let out = x.iter().zip(&self.shift).map(|(a, b)| a + b).collect();
        Ok((out, rot * jphi))
    }

    fn inverse(&self, x: &[f64]) -> Result<Vec<f64>> {
        let n = self.dim();
        let y = DVector::from_iterator(n, x.iter().zip(&self.shift).map(|(a, b)| a - b));
        let w = self.rotation.transpose() * y / self.scale;
        let d = if self.inversion {
            let r2 = w.norm_squared();
            if r2 == 0.0 {
                return Err(Error::Domain("point at the image of infinity".into()));
            }
            w / r2
        } else {
            w
        };
        Ok(d.iter().zip(&self.center).map(|(a, c)| a + c).collect())
    }
}

/// `tanh(x) + slope·x`: smooth, strictly increasing, derivative in `[slope, 1 + slope]`.
pub fn leaky_tanh(x: f64, slope: f64) -> f64 {
    x.tanh() + slope * x
}

pub fn leaky_tanh_derivative(x: f64, slope: f64) -> f64 {
    let t = x.tanh();
    1.0 - t * t + slope
}

/// Inverse of [`leaky_tanh`] by safeguarded Newton iteration.
pub fn leaky_tanh_inverse(y: f64, slope: f64) -> Result<f64> {
    let (mut lo, mut hi) = ((y - 1.0) / slope, (y + 1.0) / slope);
    let mut x = y / (1.0 + slope);
    for _ in 0..MLP_INVERSE_MAX_ITER {
        let f = leaky_tanh(x, slope) - y;
        if f.abs() <= 1e-15 * (1.0 + y.abs()) {
            return Ok(x);
        }
        if f > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let step = x - f / leaky_tanh_derivative(x, slope);
        x = if step > lo && step < hi { step } else { 0.5 * (lo + hi) };
        if hi - lo <= 1e-15 * (1.0 + x.abs()) {
            return Ok(x);
        }
    }
    let residual = (leaky_tanh(x, slope) - y).abs();
    if residual < 1e-12 * (1.0 + y.abs()) {
        Ok(x)
    } else {
        Err(Error::Convergence { iterations: MLP_INVERSE_MAX_ITER, residual })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpLayer {
    #[serde(with = "serde_rows")]
    pub weight: DMatrix<f64>,
    pub bias: Vec<f64>,
}

/// Square MLP `W_L ∘ σ ∘ ... ∘ σ ∘ W_1` with leaky-tanh `σ` between layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvertibleMlp {
    pub layers: Vec<MlpLayer>,
    pub slope: f64,
}

impl InvertibleMlp {
    /// Orthogonal weight initialization, zero biases.
    pub fn random<R: Rng + ?Sized>(n: usize, layers: usize, slope: f64, rng: &mut R) -> Self {
        let layers =
            (0..layers.max(1)).map(|_| MlpLayer { weight: random_orthogonal(n, rng), bias: vec![0.0; n] }).collect();
        Self { layers, slope }
    }

    fn dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    fn forward(&self, s: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
        let n = self.dim();
        let mut h = DVector::from_column_slice(s);
        let mut jac = DMatrix::identity(n, n);
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let pre = &layer.weight * &h + DVector::from_column_slice(&layer.bias);
            jac = &layer.weight * jac;
            if l < last {
                for i in 0..n {
                    let d = leaky_tanh_derivative(pre[i], self.slope);
                    jac.row_mut(i).scale_mut(d);
                }
                h = pre.map(|x| leaky_tanh(x, self.slope));
            } else {
                h = pre;
            }
        }
        (h.iter().copied().collect(), jac)
    }

    /// Layer-wise inversion (LU solves and scalar Newton for the activation),
    /// then Newton polishing on the full map.
    fn inverse(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut h = DVector::from_column_slice(x);
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let rhs = &h - DVector::from_column_slice(&layer.bias);
            h = layer
                .weight
                .clone()
                .lu()
                .solve(&rhs)
                .ok_or_else(|| Error::Singular(format!("MLP layer {l} weight matrix")))?;
            if l > 0 {
                for v in h.iter_mut() {
                    *v = leaky_tanh_inverse(*v, self.slope)?;
                }
            }
        }
        let target = DVector::from_column_slice(x);
        let mut s: Vec<f64> = h.iter().copied().collect();
        let scale = 1.0 + target.amax();
        let mut residual = f64::INFINITY;
        for _ in 0..MLP_INVERSE_MAX_ITER {
            let (fx, jac) = self.forward(&s);
            let r = DVector::from_vec(fx) - &target;
            residual = r.amax();
            if residual <= MLP_INVERSE_TOL * scale {
                return Ok(s);
            }
            let step = jac.lu().solve(&r).ok_or_else(|| Error::Singular("MLP Jacobian".into()))?;
            let mut damping = 1.0;
            loop {
                let cand: Vec<f64> = s.iter().zip(step.iter()).map(|(a, d)| a - damping * d).collect();
                let (fc, _) = self.forward(&cand);
                let rc = (DVector::from_vec(fc) - &target).amax();
                if rc < residual || damping < 1e-6 {
                    s = cand;
                    break;
                }
                damping *= 0.5;
            }
        }
        Err(Error::Convergence { iterations: MLP_INVERSE_MAX_ITER, residual })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "kebab-case")]
pub enum MixingMap {
    Linear {
        #[serde(with = "serde_rows")]
        matrix: DMatrix<f64>,
    },
    Moebius(Moebius),
    InvertibleMlp(InvertibleMlp),
    /// `(r, θ) ↦ (r cos θ, r sin θ)` on `r > 0`.
    PolarCartesian,
    Elementwise {
        maps: Vec<ScalarMap>,
    },
    /// `out[i] = in[perm[i]]`.
    Permutation {
        perm: Vec<usize>,
    },
    Composition {
        parts: Vec<MixingMap>,
    },
    Inverse {
        inner: Box<MixingMap>,
    },
    /// The mixing `f^D = (g^D)^{-1}` of a Darmois construction.
    Darmois(Box<DarmoisMap>),
    /// A rotated-Gaussian measure-preserving automorphism.
    Mpa(Box<MpaMap>),
}

impl MixingMap {
    pub fn linear(matrix: DMatrix<f64>) -> Self {
        MixingMap::Linear { matrix }
    }

    pub fn permutation(perm: Vec<usize>) -> Result<Self> {
        if !is_permutation(&perm) {
            return Err(Error::Config(format!("{perm:?} is not a permutation")));
        }
        Ok(MixingMap::Permutation { perm })
    }

    pub fn elementwise(maps: Vec<ScalarMap>) -> Result<Self> {
        maps.iter().try_for_each(ScalarMap::validate)?;
        Ok(MixingMap::Elementwise { maps })
    }

    /// `outer ∘ inner`.
    pub fn then(self, outer: MixingMap) -> Self {
        match self {
            MixingMap::Composition { mut parts } => {
                parts.push(outer);
                MixingMap::Composition { parts }
            }
            first => MixingMap::Composition { parts: vec![first, outer] },
        }
    }

    pub fn inverted(self) -> Self {
        MixingMap::Inverse { inner: Box::new(self) }
    }

    pub fn dim(&self) -> usize {
        match self {
            MixingMap::Linear { matrix } => matrix.nrows(),
            MixingMap::Moebius(m) => m.dim(),
            MixingMap::InvertibleMlp(m) => m.dim(),
            MixingMap::PolarCartesian => 2,
            MixingMap::Elementwise { maps } => maps.len(),
            MixingMap::Permutation { perm } => perm.len(),
            MixingMap::Composition { parts } => parts.first().map_or(0, MixingMap::dim),
            MixingMap::Inverse { inner } => inner.dim(),
            MixingMap::Darmois(d) => d.dim(),
            MixingMap::Mpa(m) => m.dim(),
        }
    }

    fn check_dim(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::Dimension(format!("point of length {} for a {}-dimensional map", v.len(), self.dim())));
        }
        Ok(())
    }

    pub fn forward(&self, s: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(s)?;
        match self {
            MixingMap::Linear { matrix } => Ok((matrix * DVector::from_column_slice(s)).iter().copied().collect()),
            MixingMap::Moebius(m) => Ok(m.forward(s)?.0),
            MixingMap::InvertibleMlp(m) => Ok(m.forward(s).0),
            MixingMap::PolarCartesian => {
                polar_domain(s)?;
                Ok(vec![s[0] * s[1].cos(), s[0] * s[1].sin()])
            }
            MixingMap::Elementwise { maps } => {
                elementwise_domain(maps, s)?;
                Ok(maps.iter().zip(s).map(|(m, &v)| m.eval(v)).collect())
            }
            MixingMap::Permutation { perm } => Ok(perm.iter().map(|&p| s[p]).collect()),
            MixingMap::Composition { parts } => parts.iter().try_fold(s.to_vec(), |h, p| p.forward(&h)),
            MixingMap::Inverse { inner } => inner.inverse(s),
            MixingMap::Darmois(d) => d.inverse(s),
            MixingMap::Mpa(m) => m.apply(s),
        }
    }

    pub fn inverse(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        match self {
            MixingMap::Linear { matrix } => {
                let sol = matrix
                    .clone()
                    .lu()
                    .solve(&DVector::from_column_slice(x))
                    .ok_or_else(|| Error::Singular("linear mixing matrix".into()))?;
                Ok(sol.iter().copied().collect())
            }
            MixingMap::Moebius(m) => m.inverse(x),
            MixingMap::InvertibleMlp(m) => m.inverse(x),
            MixingMap::PolarCartesian => {
                let r = x[0].hypot(x[1]);
                if r == 0.0 {
                    return Err(Error::Domain("origin has no polar pre-image".into()));
                }
                Ok(vec![r, x[1].atan2(x[0]).rem_euclid(std::f64::consts::TAU)])
            }
            MixingMap::Elementwise { maps } => {
                if maps.iter().zip(x).any(|(m, &v)| matches!(m, ScalarMap::Power { .. }) && v <= 0.0) {
                    return Err(Error::Domain("power map image is the positive half-line".into()));
                }
                Ok(maps.iter().zip(x).map(|(m, &v)| m.inverse(v)).collect())
            }
            MixingMap::Permutation { perm } => {
                let mut out = vec![0.0; x.len()];
                for (i, &p) in perm.iter().enumerate() {
                    out[p] = x[i];
                }
                Ok(out)
            }
            MixingMap::Composition { parts } => parts.iter().rev().try_fold(x.to_vec(), |h, p| p.inverse(&h)),
            MixingMap::Inverse { inner } => inner.forward(x),
            MixingMap::Darmois(d) => d.apply(x),
            MixingMap::Mpa(m) => m.apply_inverse(x),
        }
    }

    pub fn jacobian(&self, s: &[f64]) -> Result<DMatrix<f64>> {
        Ok(self.forward_with_jacobian(s)?.1)
    }

    /// `(f(s), J_f(s))` in one pass.
    pub fn forward_with_jacobian(&self, s: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        self.check_dim(s)?;
        match self {
            MixingMap::Linear { matrix } => Ok((self.forward(s)?, matrix.clone())),
            MixingMap::Moebius(m) => m.forward(s),
            MixingMap::InvertibleMlp(m) => Ok(m.forward(s)),
            MixingMap::PolarCartesian => {
                polar_domain(s)?;
                let (r, (sn, cs)) = (s[0], s[1].sin_cos());
                Ok((vec![r * cs, r * sn], DMatrix::from_row_slice(2, 2, &[cs, -r * sn, sn, r * cs])))
            }
            MixingMap::Elementwise { maps } => {
                let d = DVector::from_iterator(s.len(), maps.iter().zip(s).map(|(m, &v)| m.derivative(v)));
                Ok((self.forward(s)?, DMatrix::from_diagonal(&d)))
            }
            MixingMap::Permutation { perm } => Ok((self.forward(s)?, permutation_matrix(perm))),
            MixingMap::Composition { parts } => {
                let n = s.len();
                let mut h = s.to_vec();
                let mut jac = DMatrix::identity(n, n);
                for p in parts {
                    let (next, j) = p.forward_with_jacobian(&h)?;
                    jac = j * jac;
                    h = next;
                }
                Ok((h, jac))
            }
            MixingMap::Inverse { inner } => {
                let pre = inner.inverse(s)?;
                let j = inner.jacobian(&pre)?;
                let inv = j.try_inverse().ok_or_else(|| Error::Singular("Jacobian of inverted map".into()))?;
                Ok((pre, inv))
            }
            MixingMap::Darmois(d) => {
                let x = d.inverse(s)?;
                let jg = d.jacobian(&x)?;
                let inv = jg.try_inverse().ok_or_else(|| Error::Singular("Darmois Jacobian".into()))?;
                Ok((x, inv))
            }
            MixingMap::Mpa(m) => m.apply_with_jacobian(s),
        }
    }

    /// Inverse permutation of a permutation map.
    pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
        invert_permutation(perm)
    }
}

fn elementwise_domain(maps: &[ScalarMap], s: &[f64]) -> Result<()> {
    match maps.iter().zip(s).position(|(m, &v)| !m.in_domain(v)) {
        None => Ok(()),
        Some(i) => Err(Error::Domain(format!("coordinate {i} = {} outside the domain of {:?}", s[i], maps[i]))),
    }
}

fn polar_domain(s: &[f64]) -> Result<()> {
    if s[0] > 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("polar radius must be positive, got {}", s[0])))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn mlp(seed: u64) -> MixingMap {
        let mut rng = rng_from_seed(seed);
        let mut m = InvertibleMlp::random(3, 3, DEFAULT_LEAKY_SLOPE, &mut rng);
        for layer in &mut m.layers {
            for b in &mut layer.bias {
                *b = 0.3 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        MixingMap::InvertibleMlp(m)
    }

    #[test]
    fn polar_examples() {
        let p = MixingMap::PolarCartesian;
        assert_eq!(p.forward(&[1.0, 0.0]).unwrap(), vec![1.0, 0.0]);
        assert_eq!(p.jacobian(&[1.0, 0.0]).unwrap(), DMatrix::identity(2, 2));
        assert_eq!(p.inverse(&[1.0, 0.0]).unwrap(), vec![1.0, 0.0]);
        assert!(matches!(p.forward(&[-1.0, 0.0]), Err(Error::Domain(_))));
        assert!(matches!(p.jacobian(&[0.0, 1.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn cubic_elementwise() {
        let m = MixingMap::elementwise(vec![ScalarMap::cubic(); 2]).unwrap();
        assert_eq!(m.forward(&[1.0, -1.0]).unwrap(), vec![2.0, -2.0]);
        for y in [-40.0, -2.0, 0.0, 1e-3, 7.5, 1e4] {
            let v = ScalarMap::cubic().inverse(y);
            assert!((ScalarMap::cubic().eval(v) - y).abs() < 1e-10 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn permutation_inverse_and_jacobian() {
        let m = MixingMap::permutation(vec![2, 0, 1]).unwrap();
        let x = m.forward(&[10.0, 20.0, 30.0]).unwrap();
        assert_eq!(x, vec![30.0, 10.0, 20.0]);
        assert_eq!(m.inverse(&x).unwrap(), vec![10.0, 20.0, 30.0]);
        assert_eq!(m.jacobian(&[0.3, -1.0, 2.0]).unwrap(), permutation_matrix(&[2, 0, 1]));
        assert!(MixingMap::permutation(vec![0, 0]).is_err());
    }

    #[test]
    fn identity_moebius() {
        let m = MixingMap::Moebius(Moebius::identity(3));
        for s in [[0.1, 0.2, 0.3], [-1.0, 4.0, 0.5]] {
            assert_eq!(m.forward(&s).unwrap(), s.to_vec());
            assert_eq!(m.inverse(&s).unwrap(), s.to_vec());
        }
    }

    #[test]
    fn moebius_is_conformal_and_invertible() {
        let mut rng = rng_from_seed(11);
        let m = Moebius::random(3, 0.0, 1.0, 0.1, &mut rng);
        let map = MixingMap::Moebius(m);
        for _ in 0..50 {
            let s: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
            let j = map.jacobian(&s).unwrap();
            let g = j.transpose() * &j;
            let lambda = g[(0, 0)];
            assert!(lambda > 0.0);
            assert!((g - DMatrix::identity(3, 3) * lambda).abs().max() < 1e-8 * lambda);
            let back = map.inverse(&map.forward(&s).unwrap()).unwrap();
            assert!(back.iter().zip(&s).all(|(a, b)| (a - b).abs() < 1e-10));
        }
    }

    #[test]
    fn mlp_round_trip() {
        let map = mlp(4);
        let mut rng = rng_from_seed(5);
        for _ in 0..100 {
            let s: Vec<f64> = (0..3).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
            let back = map.inverse(&map.forward(&s).unwrap()).unwrap();
            let err = back.iter().zip(&s).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-8, "round trip error {err}");
        }
    }

    #[test]
    fn leaky_tanh_inverse_is_accurate() {
        for y in [-50.0, -1.3, 0.0, 0.2, 3.0, 100.0] {
            let x = leaky_tanh_inverse(y, 0.2).unwrap();
            assert!((leaky_tanh(x, 0.2) - y).abs() < 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        assert!(matches!(MixingMap::PolarCartesian.forward(&[1.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn descriptor_roundtrip() {
        let map = mlp(1).then(MixingMap::permutation(vec![1, 2, 0]).unwrap());
        let json = serde_json::to_string(&map).unwrap();
        let back: MixingMap = serde_json::from_str(&json).unwrap();
        assert_eq!(back, map);
    }
}
