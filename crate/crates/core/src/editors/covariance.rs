use alloc::vec::Vec;

use crate::linalg::{Cholesky, Matrix};
use crate::model::{Hooks, ModelState, Token};
use crate::{Error, Result};

/// Second moment of the keys entering `mlp_proj` at one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceStats {
    pub layer: usize,
    /// `(1/N) Σ k kᵀ`, without the ridge.
    pub c: Matrix,
    pub sample_count: usize,
    /// Added to the diagonal at solve time.
    pub ridge: f64,
}

impl CovarianceStats {
    pub fn new(layer: usize, c: Matrix, sample_count: usize, ridge: f64) -> Result<Self> {
        if c.rows() != c.cols() {
            return Err(Error::ShapeMismatch { expected: c.rows(), got: c.cols() });
        }
        if !c.is_finite() {
            return Err(Error::NonFinite("covariance".into()));
        }
        if !c.is_symmetric(1e-6) {
            return Err(Error::Precondition("covariance is not symmetric".into()));
        }
        if !(ridge >= 0.0) || !ridge.is_finite() {
            return Err(Error::Precondition(alloc::format!("ridge must be finite and >= 0, got {ridge}")));
        }
        Ok(Self { layer, c, sample_count, ridge })
    }

    pub fn dim(&self) -> usize {
        self.c.rows()
    }

    /// `1e-2 · trace(C) / d`.
    pub fn default_ridge(c: &Matrix) -> f64 {
        1e-2 * c.trace() / c.rows() as f64
    }

    /// `C + λI`.
    pub fn regularized(&self) -> Matrix {
        self.c.add_diagonal(self.ridge)
    }

    pub fn factor(&self) -> Result<Cholesky> {
        Cholesky::new(&self.regularized())
    }
}

/// Estimates `C` from every position of `prompts`. A `ridge` of `None`
/// selects [`CovarianceStats::default_ridge`].
pub fn estimate_covariance(
    model: &ModelState,
    layer: usize,
    prompts: &[Vec<Token>],
    ridge: Option<f64>,
) -> Result<CovarianceStats> {
    model.check_layer(layer)?;
    if prompts.is_empty() {
        return Err(Error::NoSamples);
    }
    let dff = model.arch().d_ff;
    let mut c = Matrix::zeros(dff, dff);
    let mut n = 0usize;
    for p in prompts {
        let (_, trace) = model.forward_traced(p, &Hooks::none())?;
        let lt = &trace.layers[layer];
        for t in 0..lt.len {
            let k = lt.key_at(t, dff);
            if k.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("key activations".into()));
            }
            // Upper triangle only; mirrored below.
            for i in 0..dff {
                let ki = k[i];
                if ki == 0.0 {
                    continue;
                }
                let row = &mut c.as_mut_slice()[i * dff..(i + 1) * dff];
                crate::math::axpy(&mut row[i..], ki, &k[i..]);
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::NoSamples);
    }
    let inv = 1.0 / n as f64;
    for i in 0..dff {
        for j in i..dff {
            let v = c[(i, j)] * inv;
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    let ridge = ridge.unwrap_or_else(|| CovarianceStats::default_ridge(&c));
    CovarianceStats::new(layer, c, n, ridge)
}
