//! Dense linear-algebra helpers on top of nalgebra.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// `log|det A|` and the sign of the determinant, from an LU factorization
/// with partial pivoting. The log is accumulated as a sum over pivots.
pub fn log_abs_det(a: &DMatrix<f64>) -> Result<(f64, f64)> {
    if !a.is_square() {
        return Err(Error::Dimension(format!("{}x{} matrix has no determinant", a.nrows(), a.ncols())));
    }
    let n = a.nrows();
    let mut m = a.clone();
    let mut sign = 1.0;
    let mut logdet = 0.0;
    for k in 0..n {
        let mut p = k;
        let mut best = m[(k, k)].abs();
        for r in k + 1..n {
            if m[(r, k)].abs() > best {
                best = m[(r, k)].abs();
                p = r;
            }
        }
        if best == 0.0 || !best.is_finite() {
            return Err(Error::Singular(format!("zero pivot in column {k}")));
        }
        if p != k {
            m.swap_rows(p, k);
            sign = -sign;
        }
        let pivot = m[(k, k)];
        if pivot < 0.0 {
            sign = -sign;
        }
        logdet += pivot.abs().ln();
        for r in k + 1..n {
            let factor = m[(r, k)] / pivot;
            if factor != 0.0 {
                for c in k + 1..n {
                    let v = m[(k, c)];
                    m[(r, c)] -= factor * v;
                }
            }
        }
    }
    Ok((logdet, sign))
}

/// 2-D rotation by `theta`. Entries within rounding of 0 or ±1 are snapped so
/// that multiples of π/2 yield exact signed permutation matrices.
pub fn rotation2(theta: f64) -> DMatrix<f64> {
    let snap = |v: f64| {
        if v.abs() < 1e-15 {
            0.0
        } else if (v.abs() - 1.0).abs() < 1e-15 {
            v.signum()
        } else {
            v
        }
    };
    let (s, c) = theta.sin_cos();
    let (s, c) = (snap(s), snap(c));
    DMatrix::from_row_slice(2, 2, &[c, -s, s, c])
}

/// Haar-distributed random orthogonal matrix (QR of a Gaussian matrix with
/// the sign convention fixed by the diagonal of R).
pub fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            for i in 0..n {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    q
}

pub fn permutation_matrix(perm: &[usize]) -> DMatrix<f64> {
    let n = perm.len();
    let mut m = DMatrix::zeros(n, n);
    for (i, &p) in perm.iter().enumerate() {
        m[(i, p)] = 1.0;
    }
    m
}

pub fn is_permutation(perm: &[usize]) -> bool {
    let mut seen = vec![false; perm.len()];
    perm.iter().all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true))
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Serde adapter storing a `DMatrix` as a list of rows.
pub mod serde_rows {
    use nalgebra::DMatrix;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(D::Error::custom("ragged matrix rows"));
        }
        Ok(DMatrix::from_row_iterator(nrows, ncols, rows.into_iter().flatten()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn log_abs_det_matches_nalgebra() {
        let a = DMatrix::from_row_slice(3, 3, &[2.0, -1.0, 0.5, 1.0, 3.0, -2.0, 0.0, 4.0, 1.0]);
        let (ld, sign) = log_abs_det(&a).unwrap();
        let det = a.determinant();
        assert!((ld - det.abs().ln()).abs() < 1e-12);
        assert_eq!(sign, det.signum());
    }

    #[test]
    fn singular_matrix_is_reported() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(matches!(log_abs_det(&a), Err(Error::Singular(_))));
    }

    #[test]
    fn quarter_turns_are_exact_permutations() {
        let r = rotation2(std::f64::consts::FRAC_PI_2);
        assert_eq!(r, DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]));
        let r = rotation2(std::f64::consts::PI);
        assert_eq!(r, DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -1.0]));
    }

    #[test]
    fn random_orthogonal_is_orthogonal() {
        let q = random_orthogonal(5, &mut rng_from_seed(3));
        let err = (q.transpose() * &q - DMatrix::identity(5, 5)).abs().max();
        assert!(err < 1e-12);
    }
}
