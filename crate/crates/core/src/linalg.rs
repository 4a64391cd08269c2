//! Small dense SPD helpers on top of `nalgebra`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::LinalgError;
use crate::scalar::Real;

pub type Mat<T> = DMatrix<T>;
pub type Vector<T> = DVector<T>;

/// Cholesky factorization of an SPD matrix together with its log-determinant.
#[derive(Debug, Clone)]
pub struct SpdFactor<T: Real> {
    chol: Cholesky<T, Dyn>,
    log_det: T,
}

impl<T: Real> SpdFactor<T> {
    /// Factor `m`, escalating a relative diagonal jitter from 1e-10 to 1e-6
    /// when the plain factorization fails. `what` names the matrix in errors.
    pub fn new(m: &Mat<T>, what: &str) -> Result<Self, LinalgError> {
        if !m.is_square() {
            return Err(LinalgError::Dimension {
                what: what.to_string(),
                expected: "square matrix".into(),
                got: format!("{}x{}", m.nrows(), m.ncols()),
            });
        }
        if m.iter().any(|v| !v.finite()) {
            return Err(LinalgError::NotPositiveDefinite {
                what: what.to_string(),
            });
        }
        let sym = symmetrize(m);
        if let Some(f) = Self::try_factor(sym.clone()) {
            return Ok(f);
        }
        let k = sym.nrows();
        let scale = (0..k).map(|i| sym[(i, i)].abs()).fold(T::zero(), |a, b| a + b)
            / T::count(k.max(1));
        let scale = if scale > T::zero() { scale } else { T::one() };
        for exp in [-10, -9, -8, -7, -6] {
            let jitter = scale * T::lit(10f64.powi(exp));
            let mut jittered = sym.clone();
            for i in 0..k {
                jittered[(i, i)] += jitter;
            }
            if let Some(f) = Self::try_factor(jittered) {
                log::debug!("{what}: Cholesky needed relative jitter 1e{exp}");
                return Ok(f);
            }
        }
        Err(LinalgError::NotPositiveDefinite {
            what: what.to_string(),
        })
    }

    /// Factor without any jitter; `None` unless `m` is numerically SPD.
    pub fn strict(m: &Mat<T>) -> Option<Self> {
        if !m.is_square() || m.iter().any(|v| !v.finite()) {
            return None;
        }
        Self::try_factor(symmetrize(m))
    }

    fn try_factor(m: Mat<T>) -> Option<Self> {
        let chol = Cholesky::new(m)?;
        let l = chol.l_dirty();
        let mut log_det = T::zero();
        for i in 0..l.nrows() {
            let d = l[(i, i)];
            if !(d > T::zero()) || !d.finite() {
                return None;
            }
            log_det += d.ln();
        }
        Some(Self {
            chol,
            log_det: log_det + log_det,
        })
    }

    /// Smallest squared pivot relative to the corresponding diagonal entry of
    /// `m`; near zero means `m` is numerically rank deficient.
    pub fn min_pivot_ratio(&self, m: &Mat<T>) -> T {
        let l = self.chol.l_dirty();
        (0..l.nrows())
            .map(|i| l[(i, i)] * l[(i, i)] / m[(i, i)])
            .fold(T::inf(), |a, b| a.min(b))
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    /// Lower-triangular factor `L` with `L Lᵀ = M`.
    pub fn lower(&self) -> Mat<T> {
        self.chol.l()
    }

    pub fn log_det(&self) -> T {
        self.log_det
    }

    pub fn inverse(&self) -> Mat<T> {
        symmetrize(&self.chol.inverse())
    }

    pub fn solve(&self, b: &Vector<T>) -> Vector<T> {
        self.chol.solve(b)
    }

    /// `vᵀ M⁻¹ v`.
    pub fn quad_form(&self, v: &Vector<T>) -> T {
        let l = self.chol.l_dirty();
        let n = v.len();
        // forward substitution on the lower triangle only
        let mut y = v.clone();
        for i in 0..n {
            let mut s = y[i];
            for j in 0..i {
                s -= l[(i, j)] * y[j];
            }
            y[i] = s / l[(i, i)];
        }
        y.dot(&y)
    }

    /// `L z`, used to colour standard normal draws.
    pub fn mul_lower(&self, z: &Vector<T>) -> Vector<T> {
        let l = self.chol.l_dirty();
        let n = z.len();
        let mut out = Vector::zeros(n);
        for i in 0..n {
            let mut s = T::zero();
            for j in 0..=i {
                s += l[(i, j)] * z[j];
            }
            out[i] = s;
        }
        out
    }
}

/// `(M + Mᵀ) / 2`.
pub fn symmetrize<T: Real>(m: &Mat<T>) -> Mat<T> {
    let half = T::lit(0.5);
    let mut out = m.clone();
    for i in 0..m.nrows() {
        for j in 0..i {
            let v = (m[(i, j)] + m[(j, i)]) * half;
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

pub fn is_symmetric<T: Real>(m: &Mat<T>) -> bool {
    if !m.is_square() {
        return false;
    }
    let tol = T::lit(1e-12);
    for i in 0..m.nrows() {
        for j in 0..i {
            let a = m[(i, j)];
            let b = m[(j, i)];
            if (a - b).abs() > tol * (T::one() + a.abs().max(b.abs())) {
                return false;
            }
        }
    }
    true
}

/// Symmetric and strictly positive definite (no jitter).
pub fn is_spd<T: Real>(m: &Mat<T>) -> bool {
    is_symmetric(m) && SpdFactor::strict(m).is_some()
}

/// Numerically full rank Gram matrix (relative pivot tolerance 1e-10).
pub fn is_full_rank_gram<T: Real>(m: &Mat<T>) -> bool {
    SpdFactor::strict(m).is_some_and(|f| f.min_pivot_ratio(m) > T::lit(1e-10))
}

/// Inverse of an SPD matrix.
pub fn spd_inverse<T: Real>(m: &Mat<T>, what: &str) -> Result<Mat<T>, LinalgError> {
    Ok(SpdFactor::new(m, what)?.inverse())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_reconstructs_matrix() {
        let m: Mat<f64> = Mat::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let f = SpdFactor::new(&m, "m").unwrap();
        let l = f.lower();
        let back = &l * l.transpose();
        assert!((back - &m).norm() / m.norm() < 1e-12);
        assert!((f.log_det() - m.determinant().ln()).abs() < 1e-12);
    }

    #[test]
    fn quad_form_matches_inverse() {
        let m: Mat<f64> = Mat::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 1.0]);
        let v = Vector::from_vec(vec![1.0, -2.0]);
        let f = SpdFactor::new(&m, "m").unwrap();
        let direct = (v.transpose() * f.inverse() * &v)[(0, 0)];
        assert!((f.quad_form(&v) - direct).abs() < 1e-12);
    }

    #[test]
    fn semidefinite_matrix_rescued_by_jitter() {
        // rank one
        let m = Mat::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(SpdFactor::strict(&m).is_none());
        assert!(SpdFactor::new(&m, "rank-one").is_ok());
    }

    #[test]
    fn indefinite_matrix_is_hard_error() {
        let m = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let err = SpdFactor::new(&m, "S2").unwrap_err();
        assert!(err.to_string().contains("S2"));
        assert!(!is_spd(&m));
    }
}
