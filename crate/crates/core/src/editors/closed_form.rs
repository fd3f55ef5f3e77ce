//! Constrained least-squares updates of a linear associative memory.

use crate::linalg::{Cholesky, Matrix};
use crate::math;
use crate::{Error, Result};

use super::CovarianceStats;

/// Gram matrices with a larger condition estimate are refused.
pub const MAX_CONDITION: f64 = 1e12;

/// Relative tolerance of the key-rank test.
pub const RANK_TOL: f64 = 1e-9;

fn check_shapes(w: &Matrix, stats: &CovarianceStats, key_rows: usize, value_rows: usize) -> Result<()> {
    if w.cols() != stats.dim() {
        return Err(Error::ShapeMismatch { expected: stats.dim(), got: w.cols() });
    }
    if key_rows != w.cols() {
        return Err(Error::ShapeMismatch { expected: w.cols(), got: key_rows });
    }
    if value_rows != w.rows() {
        return Err(Error::ShapeMismatch { expected: w.rows(), got: value_rows });
    }
    Ok(())
}

/// `Ŵ = W + Λ (C̃⁻¹k)ᵀ` with `Λ = (v − Wk) / (kᵀC̃⁻¹k)` and `C̃ = C + λI`:
/// the smallest change in the `C̃` metric that stores `k ↦ v` exactly.
pub fn rank_one_edit(w: &Matrix, stats: &CovarianceStats, k: &[f64], v: &[f64]) -> Result<Matrix> {
    check_shapes(w, stats, k.len(), v.len())?;
    if k.iter().chain(v).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("edit key or value".into()));
    }
    let chol = stats.factor()?;
    let u = chol.solve(k);
    let denom = math::dot(&u, k);
    if !(denom > f64::MIN_POSITIVE) || !denom.is_finite() {
        return Err(Error::ZeroDenominator(denom));
    }
    let wk = w.matvec(k);
    let mut out = w.clone();
    for (i, (vi, wki)) in v.iter().zip(&wk).enumerate() {
        let lam = (vi - wki) / denom;
        if lam == 0.0 {
            continue;
        }
        let row = &mut out.as_mut_slice()[i * w.cols()..(i + 1) * w.cols()];
        math::axpy(row, lam, &u);
    }
    Ok(out)
}

/// Multi-key generalization: `Δ = R (KᵀC̃⁻¹K)⁻¹ KᵀC̃⁻¹` with
/// `R = V − WK`. Keys and values are columns of `keys` and `values`.
pub fn batched_edit(w: &Matrix, stats: &CovarianceStats, keys: &Matrix, values: &Matrix) -> Result<Matrix> {
    check_shapes(w, stats, keys.rows(), values.rows())?;
    let b = keys.cols();
    if b == 0 || values.cols() != b {
        return Err(Error::ShapeMismatch { expected: b, got: values.cols() });
    }
    if !keys.is_finite() || !values.is_finite() {
        return Err(Error::NonFinite("edit keys or values".into()));
    }
    let rank = keys.column_rank(RANK_TOL);
    if rank < b {
        return Err(Error::RankDeficient { rank, cols: b });
    }
    let chol = stats.factor()?;
    // U = C̃⁻¹K, G = KᵀU.
    let u = chol.solve_matrix(keys);
    let mut gram = keys.transpose().matmul(&u);
    // Symmetrize away rounding so the factorization sees an exact mirror.
    for i in 0..b {
        for j in i + 1..b {
            let m = 0.5 * (gram[(i, j)] + gram[(j, i)]);
            gram[(i, j)] = m;
            gram[(j, i)] = m;
        }
    }
    let gchol = Cholesky::new(&gram).map_err(|_| Error::NearSingular { condition: f64::INFINITY })?;
    let condition = gchol.condition_estimate();
    if !(condition <= MAX_CONDITION) {
        return Err(Error::NearSingular { condition });
    }
    let resid = values.sub(&w.matmul(keys));
    // Δ = R G⁻¹ Uᵀ = (U G⁻¹ Rᵀ)ᵀ.
    let x = gchol.solve_matrix(&resid.transpose());
    let delta = u.matmul(&x).transpose();
    Ok(w.add(&delta))
}
