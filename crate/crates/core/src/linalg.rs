//! Thin wrappers over `faer` used throughout the crate.
//!
//! Every SVD returned from here follows one sign convention: the
//! largest-magnitude coordinate of each left singular vector is nonnegative
//! (ties go to the lowest index) and the matching right singular vector is
//! flipped with it. That makes factor outputs reproducible across platforms.

use faer::{Mat, MatRef, Side};

use crate::error::{Error, Result};

/// Thin singular value decomposition `a = u * diag(s) * v^T`.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Mat<f64>,
    pub s: Vec<f64>,
    pub v: Mat<f64>,
}

impl Svd {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// Keep the leading `k` triplets.
    pub fn truncate(mut self, k: usize) -> Svd {
        let k = k.min(self.s.len());
        self.u = self.u.as_ref().subcols(0, k).to_owned();
        self.v = self.v.as_ref().subcols(0, k).to_owned();
        self.s.truncate(k);
        self
    }

    /// `u[:, ..k] * diag(s[..k]) * v[:, ..k]^T`
    pub fn reconstruct(&self, k: usize) -> Mat<f64> {
        reconstruct(self.u.as_ref(), &self.s, self.v.as_ref(), k)
    }
}

pub fn thin_svd(a: MatRef<'_, f64>) -> Result<Svd> {
    ensure_finite(a)?;
    let (n, m) = (a.nrows(), a.ncols());
    if n == 0 || m == 0 {
        return Ok(Svd {
            u: Mat::zeros(n, 0),
            s: Vec::new(),
            v: Mat::zeros(m, 0),
        });
    }
    let svd = a
        .thin_svd()
        .map_err(|e| Error::Decomposition(format!("svd: {e:?}")))?;
    let s: Vec<f64> = svd.S().column_vector().iter().copied().collect();
    let mut u = svd.U().to_owned();
    let mut v = svd.V().to_owned();
    fix_signs(&mut u, &mut v);
    Ok(Svd { u, s, v })
}

pub fn singular_values(a: MatRef<'_, f64>) -> Result<Vec<f64>> {
    ensure_finite(a)?;
    if a.nrows() == 0 || a.ncols() == 0 {
        return Ok(Vec::new());
    }
    a.singular_values()
        .map_err(|e| Error::Decomposition(format!("svd: {e:?}")))
}

fn fix_signs(u: &mut Mat<f64>, v: &mut Mat<f64>) {
    for k in 0..u.ncols() {
        let col = u.col_as_slice(k);
        let mut best = 0usize;
        let mut best_abs = -1.0f64;
        for (i, x) in col.iter().enumerate() {
            if x.abs() > best_abs {
                best_abs = x.abs();
                best = i;
            }
        }
        if col[best] < 0.0 {
            u.col_as_slice_mut(k).iter_mut().for_each(|x| *x = -*x);
            v.col_as_slice_mut(k).iter_mut().for_each(|x| *x = -*x);
        }
    }
}

pub fn reconstruct(u: MatRef<'_, f64>, s: &[f64], v: MatRef<'_, f64>, k: usize) -> Mat<f64> {
    let k = k.min(s.len());
    let (n, m) = (u.nrows(), v.nrows());
    if k == 0 {
        return Mat::zeros(n, m);
    }
    let us = Mat::from_fn(n, k, |i, j| u[(i, j)] * s[j]);
    us.as_ref() * v.subcols(0, k).transpose()
}

pub fn ensure_finite(a: MatRef<'_, f64>) -> Result<()> {
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            if !a[(i, j)].is_finite() {
                return Err(Error::NonFinite);
            }
        }
    }
    Ok(())
}

pub fn frobenius(a: MatRef<'_, f64>) -> f64 {
    let mut acc = 0.0;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            acc += a[(i, j)] * a[(i, j)];
        }
    }
    acc.sqrt()
}

pub fn frobenius_diff(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> f64 {
    debug_assert_eq!((a.nrows(), a.ncols()), (b.nrows(), b.ncols()));
    let mut acc = 0.0;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            let d = a[(i, j)] - b[(i, j)];
            acc += d * d;
        }
    }
    acc.sqrt()
}

pub fn max_abs_diff(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> f64 {
    let mut acc = 0.0f64;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            acc = acc.max((a[(i, j)] - b[(i, j)]).abs());
        }
    }
    acc
}

/// `a^T a` for a tall matrix.
pub fn gram(a: MatRef<'_, f64>) -> Mat<f64> {
    a.transpose() * a
}

/// Symmetric eigendecomposition with eigenvalues in nondecreasing order.
pub(crate) fn sym_eigen(a: MatRef<'_, f64>) -> Result<(Vec<f64>, Mat<f64>)> {
    ensure_finite(a)?;
    let evd = a
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Decomposition(format!("eigen: {e:?}")))?;
    let vals = evd.S().column_vector().iter().copied().collect();
    Ok((vals, evd.U().to_owned()))
}

/// `f(a)` for symmetric `a`, applied through its eigenvalues.
pub(crate) fn sym_apply(a: MatRef<'_, f64>, f: impl Fn(f64) -> f64) -> Result<Mat<f64>> {
    let (vals, vecs) = sym_eigen(a)?;
    let r = vals.len();
    let scaled = Mat::from_fn(r, r, |i, j| vecs[(i, j)] * f(vals[j]));
    Ok(scaled.as_ref() * vecs.transpose())
}

/// Inverse of a symmetric positive definite matrix, rejecting it when the
/// eigenvalue ratio exceeds `max_condition`.
pub fn sym_inverse_guarded(a: MatRef<'_, f64>, max_condition: f64) -> Result<Mat<f64>> {
    let (vals, vecs) = sym_eigen(a)?;
    let lo = vals.first().copied().unwrap_or(0.0);
    let hi = vals.last().copied().unwrap_or(0.0);
    if !(lo > 0.0) || hi / lo > max_condition {
        let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        return Err(Error::SingularGram(cond));
    }
    let r = vals.len();
    let scaled = Mat::from_fn(r, r, |i, j| vecs[(i, j)] / vals[j]);
    Ok(scaled.as_ref() * vecs.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(n: usize, m: usize) -> Mat<f64> {
        Mat::from_fn(n, m, |i, j| ((i * 31 + j * 17) % 11) as f64 - 5.0 + 0.1 * (i as f64))
    }

    #[test]
    fn svd_reconstructs_and_follows_sign_convention() {
        let a = sample(7, 5);
        let svd = thin_svd(a.as_ref()).unwrap();
        let back = svd.reconstruct(svd.rank());
        assert!(frobenius_diff(a.as_ref(), back.as_ref()) < 1e-10);
        for k in 0..svd.rank() {
            let col = svd.u.col_as_slice(k);
            let (idx, _) = col
                .iter()
                .enumerate()
                .fold((0, -1.0), |(bi, bv), (i, x)| if x.abs() > bv { (i, x.abs()) } else { (bi, bv) });
            assert!(col[idx] >= 0.0);
        }
        assert!(svd.s.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn guarded_inverse_rejects_singular() {
        let a = Mat::from_fn(2, 2, |i, j| if i == j { 1.0 } else { 1.0 });
        assert!(matches!(
            sym_inverse_guarded(a.as_ref(), 1e12),
            Err(Error::SingularGram(_))
        ));
        let b = Mat::from_fn(2, 2, |i, j| if i == j { 2.0 } else { 0.5 });
        let inv = sym_inverse_guarded(b.as_ref(), 1e12).unwrap();
        let id = b.as_ref() * inv.as_ref();
        assert!((id[(0, 0)] - 1.0).abs() < 1e-12 && id[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut a = sample(3, 3);
        a[(1, 1)] = f64::NAN;
        assert!(matches!(thin_svd(a.as_ref()), Err(Error::NonFinite)));
    }
}
