//! Rank-r debiasing projection and de-shrunken factors.

use faer::{Mat, MatRef};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, Svd};
use crate::panel::Mask;

/// Singular values below this fraction of `σ_1` count as a collapsed fit.
pub const RANK_COLLAPSE_RATIO: f64 = 1e-12;

/// De-shrunken row and column factors of a penalized fit.
#[derive(Debug, Clone, Serialize)]
pub struct FactorPair {
    #[serde(skip)]
    pub x_hat: Mat<f64>,
    #[serde(skip)]
    pub z_hat: Mat<f64>,
    pub lambda: f64,
    pub rank: usize,
}

pub fn rank_r_project(b: MatRef<'_, f64>, r: usize) -> Result<Mat<f64>> {
    let dim = b.nrows().min(b.ncols());
    if r == 0 || r > dim {
        return Err(Error::invalid(format!("rank {r} outside 1..={dim}")));
    }
    Ok(linalg::thin_svd(b)?.reconstruct(r))
}

/// `Ω^c∘m_tilde + Ω∘y`
pub fn splice_observed(m_tilde: MatRef<'_, f64>, y: MatRef<'_, f64>, mask: &Mask) -> Result<Mat<f64>> {
    let shape = (y.nrows(), y.ncols());
    for got in [(m_tilde.nrows(), m_tilde.ncols()), (mask.nrows(), mask.ncols())] {
        if got != shape {
            return Err(Error::ShapeMismatch {
                expected: shape,
                got,
            });
        }
    }
    Ok(Mat::from_fn(shape.0, shape.1, |i, j| {
        if mask.get(i, j) {
            y[(i, j)]
        } else {
            m_tilde[(i, j)]
        }
    }))
}

/// `P_r(Ω^c∘M̃ + Ω∘Y)`: observed entries come from the data, missing ones
/// from the penalized fit, and the result is projected to rank `r`.
pub fn debias_project(
    m_tilde: MatRef<'_, f64>,
    y: MatRef<'_, f64>,
    mask: &Mask,
    r: usize,
) -> Result<Mat<f64>> {
    let spliced = splice_observed(m_tilde, y, mask)?;
    rank_r_project(spliced.as_ref(), r)
}

/// `X̃ (I + λ (X̃ᵀX̃)^{-1})^{1/2}`, so that `X̂ᵀX̂ = X̃ᵀX̃ + λI`.
pub fn deshrink(x_tilde: MatRef<'_, f64>, lam: f64) -> Result<Mat<f64>> {
    if !(lam >= 0.0) {
        return Err(Error::invalid("lambda must be nonnegative"));
    }
    if lam == 0.0 {
        return Ok(x_tilde.to_owned());
    }
    let g = linalg::gram(x_tilde);
    let (vals, _) = linalg::sym_eigen(g.as_ref())?;
    if vals.first().is_none_or(|&v| v <= 0.0) {
        return Err(Error::SingularGram(f64::INFINITY));
    }
    let core = linalg::sym_apply(g.as_ref(), |e| (1.0 + lam / e).sqrt())?;
    Ok(x_tilde * core.as_ref())
}

/// De-shrunken factors from an SVD of the penalized fit `M̃`.
pub fn deshrink_from_svd(svd: &Svd, lam: f64, r: usize) -> Result<FactorPair> {
    if r == 0 {
        return Err(Error::invalid("rank must be positive"));
    }
    let sigma_1 = svd.s.first().copied().unwrap_or(0.0);
    let sigma_r = svd.s.get(r - 1).copied().unwrap_or(0.0);
    if !(sigma_r > RANK_COLLAPSE_RATIO * sigma_1) || sigma_1 <= 0.0 {
        return Err(Error::RankCollapse {
            rank: r,
            sigma_r,
            sigma_1,
        });
    }
    let root: Vec<f64> = svd.s[..r].iter().map(|s| s.sqrt()).collect();
    let x_tilde = Mat::from_fn(svd.u.nrows(), r, |i, k| svd.u[(i, k)] * root[k]);
    let z_tilde = Mat::from_fn(svd.v.nrows(), r, |i, k| svd.v[(i, k)] * root[k]);
    Ok(FactorPair {
        x_hat: deshrink(x_tilde.as_ref(), lam)?,
        z_hat: deshrink(z_tilde.as_ref(), lam)?,
        lambda: lam,
        rank: r,
    })
}

/// `X̃ = Ũ D̃^{1/2}`, `Z̃ = Ṽ D̃^{1/2}` from `P_r(M̃)`, then de-shrunk by `λ`.
pub fn deshrink_factors(m_tilde: MatRef<'_, f64>, lam: f64, r: usize) -> Result<FactorPair> {
    let dim = m_tilde.nrows().min(m_tilde.ncols());
    if r == 0 || r > dim {
        return Err(Error::invalid(format!("rank {r} outside 1..={dim}")));
    }
    deshrink_from_svd(&linalg::thin_svd(m_tilde)?, lam, r)
}
