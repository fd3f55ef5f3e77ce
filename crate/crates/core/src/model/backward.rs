//! Reverse-mode gradients of the sequence loss.
//!
//! One backward sweep serves three consumers: the trainer (parameter
//! gradients), attention saliency (gradients with respect to post-softmax
//! attention entries) and the value solvers (gradient with respect to a
//! substituted hidden state).

use alloc::vec;
use alloc::vec::Vec;

use super::forward::{check_targets, cross_entropy, gelu_grad, Cache, Hooks, Substitution};
use super::{Layout, ModelState, Param, Token};
use crate::math;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default)]
pub struct GradRequest {
    pub params: bool,
    pub attention: bool,
    pub hidden: bool,
}

#[derive(Clone, Debug)]
pub struct Gradients {
    pub loss: f64,
    /// Flat, in parameter storage order; empty unless requested.
    pub params: Vec<f64>,
    /// Per layer, `[n_heads × len × len]`; empty unless requested.
    pub attention: Vec<Vec<f64>>,
    /// Gradient at the substituted hidden state, if requested.
    pub hidden: Option<Vec<f64>>,
    /// Logits of the forward pass, `[len × vocab]`.
    pub logits: Vec<f64>,
}

fn rms_backward(x: &[f64], rms: &[f64], scale: &[f32], dy: &[f64], d: usize, dx: &mut [f64], dscale: Option<&mut [f64]>) {
    let rows = x.len() / d;
    let mut dscale = dscale;
    for t in 0..rows {
        let xr = &x[t * d..(t + 1) * d];
        let dyr = &dy[t * d..(t + 1) * d];
        let r = rms[t];
        let mut s = 0.0;
        for i in 0..d {
            s += scale[i] as f64 * dyr[i] * xr[i];
        }
        let coef = s / (d as f64 * r * r * r);
        let dxr = &mut dx[t * d..(t + 1) * d];
        for i in 0..d {
            dxr[i] += scale[i] as f64 * dyr[i] / r - xr[i] * coef;
        }
        if let Some(ds) = dscale.as_deref_mut() {
            for i in 0..d {
                ds[i] += dyr[i] * xr[i] / r;
            }
        }
    }
}

/// Accumulates `dW += dyᵀ x` and returns `dx = dy W` for `W: [out × in]`.
fn linear_backward(
    w: &[f32],
    x: &[f64],
    dy: &[f64],
    in_dim: usize,
    out_dim: usize,
    dw: Option<&mut [f64]>,
) -> Vec<f64> {
    let rows = x.len() / in_dim;
    let mut dx = vec![0.0; rows * in_dim];
    for t in 0..rows {
        let dxr = &mut dx[t * in_dim..(t + 1) * in_dim];
        for i in 0..out_dim {
            let g = dy[t * out_dim + i];
            if g != 0.0 {
                math::axpy_f32(dxr, g, &w[i * in_dim..(i + 1) * in_dim]);
            }
        }
    }
    if let Some(dw) = dw {
        for i in 0..out_dim {
            let dwr = &mut dw[i * in_dim..(i + 1) * in_dim];
            for t in 0..rows {
                let g = dy[t * out_dim + i];
                if g != 0.0 {
                    math::axpy(dwr, g, &x[t * in_dim..(t + 1) * in_dim]);
                }
            }
        }
    }
    dx
}

impl ModelState {
    /// Loss and the requested gradients for `sequence_loss(tokens, targets)`.
    pub fn gradients(
        &self,
        tokens: &[Token],
        targets: &[usize],
        hooks: &Hooks<'_>,
        req: GradRequest,
    ) -> Result<Gradients> {
        check_targets(targets, tokens.len())?;
        if req.hidden && hooks.substitution.is_none() {
            return Err(Error::Precondition("hidden gradient requires a substitution".into()));
        }
        let cache = self.run(tokens, hooks)?;
        let (loss, dlogits) = cross_entropy(&cache.logits, tokens, targets, self.arch.vocab_size);
        let mut pg = if req.params { vec![0.0; Layout::new(&self.arch).total()] } else { Vec::new() };
        let (attention, hidden) = self.backward(tokens, &cache, dlogits, hooks, req, &mut pg);
        Ok(Gradients { loss, params: pg, attention, hidden, logits: cache.logits })
    }

    /// Adds the parameter gradient of `sequence_loss(tokens, targets)` into
    /// `acc` (storage order) and returns the loss.
    pub fn accumulate_param_grad(&self, tokens: &[Token], targets: &[usize], acc: &mut [f64]) -> Result<f64> {
        check_targets(targets, tokens.len())?;
        if acc.len() != self.params().len() {
            return Err(Error::ShapeMismatch { expected: self.params().len(), got: acc.len() });
        }
        let cache = self.run(tokens, &Hooks::none())?;
        let (loss, dlogits) = cross_entropy(&cache.logits, tokens, targets, self.arch.vocab_size);
        let req = GradRequest { params: true, ..GradRequest::default() };
        self.backward(tokens, &cache, dlogits, &Hooks::none(), req, acc);
        Ok(loss)
    }

    /// `∂L/∂A_{h,l}` for every layer and head, with respect to the
    /// post-softmax attention values. Masked (future) entries are zero.
    pub fn attention_saliency(&self, tokens: &[Token], targets: &[usize]) -> Result<Vec<Vec<f64>>> {
        let req = GradRequest { attention: true, ..GradRequest::default() };
        Ok(self.gradients(tokens, targets, &Hooks::none(), req)?.attention)
    }

    /// Gradient of the loss with respect to a vector substituted as the
    /// output hidden state of `layer` at `position`.
    pub fn hidden_grad(
        &self,
        tokens: &[Token],
        layer: usize,
        position: usize,
        injected: &[f64],
        targets: &[usize],
    ) -> Result<Vec<f64>> {
        self.hidden_grad_with(tokens, layer, position, injected, targets, None)
    }

    /// As [`Self::hidden_grad`], also applying an MLP override.
    pub fn hidden_grad_with(
        &self,
        tokens: &[Token],
        layer: usize,
        position: usize,
        injected: &[f64],
        targets: &[usize],
        mlp_override: Option<&dyn super::MlpOverride>,
    ) -> Result<Vec<f64>> {
        self.check_layer(layer)?;
        if injected.len() != self.arch.d_model {
            return Err(Error::ShapeMismatch { expected: self.arch.d_model, got: injected.len() });
        }
        let hooks = Hooks {
            substitution: Some(Substitution { layer, position, hidden: injected }),
            mlp_override,
            attention_delta: None,
        };
        let req = GradRequest { hidden: true, ..GradRequest::default() };
        Ok(self.gradients(tokens, targets, &hooks, req)?.hidden.unwrap_or_default())
    }

    fn backward(
        &self,
        tokens: &[Token],
        cache: &Cache,
        dlogits: Vec<f64>,
        hooks: &Hooks<'_>,
        req: GradRequest,
        pg: &mut [f64],
    ) -> (Vec<Vec<f64>>, Option<Vec<f64>>) {
        let a = self.arch;
        let (d, dff, nh, hd, v) = (a.d_model, a.d_ff, a.n_heads, a.head_dim(), a.vocab_size);
        let t_len = cache.len;
        let layout = Layout::new(&a);
        let mut att_grads: Vec<Vec<f64>> = if req.attention { vec![Vec::new(); a.n_layers] } else { Vec::new() };
        let mut hidden = None;

        macro_rules! grad_slot {
            ($p:expr) => {
                if req.params {
                    let r = layout.range($p);
                    Some(&mut pg[r])
                } else {
                    None
                }
            };
        }

        // Unembedding and final norm.
        let u = self.tensor(Param::Unembedding);
        let mut dnf = vec![0.0; t_len * d];
        for t in 0..t_len {
            let row = &dlogits[t * v..(t + 1) * v];
            if row.iter().all(|&g| g == 0.0) {
                continue;
            }
            let nf = &cache.nf[t * d..(t + 1) * d];
            for (k, &g) in row.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                math::axpy_f32(&mut dnf[t * d..(t + 1) * d], g, &u[k * d..(k + 1) * d]);
                if req.params {
                    let r = layout.range(Param::Unembedding);
                    math::axpy(&mut pg[r][k * d..(k + 1) * d], g, nf);
                }
            }
        }
        let last = &cache.layers[a.n_layers - 1].x_out;
        let mut dx = vec![0.0; t_len * d];
        rms_backward(last, &cache.rmsf, self.tensor(Param::FinalNorm), &dnf, d, &mut dx, grad_slot!(Param::FinalNorm));

        let inv_sqrt = 1.0 / math::sqrt(hd as f64);
        for l in (0..a.n_layers).rev() {
            let c = &cache.layers[l];
            if let Some(s) = hooks.substitution.filter(|s| s.layer == l) {
                let p = s.position;
                if req.hidden {
                    hidden = Some(dx[p * d..(p + 1) * d].to_vec());
                }
                dx[p * d..(p + 1) * d].iter_mut().for_each(|g| *g = 0.0);
                if !req.params && !req.attention {
                    break;
                }
            }

            // MLP.
            let mut dmlp = dx.clone();
            for (t, &o) in c.overridden.iter().enumerate() {
                if o {
                    dmlp[t * d..(t + 1) * d].iter_mut().for_each(|g| *g = 0.0);
                }
            }
            let dkey = linear_backward(self.tensor(Param::MlpProj(l)), &c.key, &dmlp, dff, d, grad_slot!(Param::MlpProj(l)));
            let dpre: Vec<f64> = dkey.iter().zip(&c.pre).map(|(g, &p)| g * gelu_grad(p)).collect();
            let dn2 = linear_backward(self.tensor(Param::MlpFc(l)), &c.n2, &dpre, d, dff, grad_slot!(Param::MlpFc(l)));
            let mut dx_mid = dx;
            rms_backward(&c.x_mid, &c.rms2, self.tensor(Param::MlpNorm(l)), &dn2, d, &mut dx_mid, grad_slot!(Param::MlpNorm(l)));

            // Attention.
            let d_o = linear_backward(self.tensor(Param::Output(l)), &c.o, &dx_mid, d, d, grad_slot!(Param::Output(l)));
            let mut dq = vec![0.0; t_len * d];
            let mut dk = vec![0.0; t_len * d];
            let mut dv = vec![0.0; t_len * d];
            let mut da_layer = if req.attention { vec![0.0; nh * t_len * t_len] } else { Vec::new() };
            let mut da = vec![0.0; t_len];
            for h in 0..nh {
                let off = h * hd;
                for i in 0..t_len {
                    let doi = &d_o[i * d + off..i * d + off + hd];
                    let arow = &c.att[(h * t_len + i) * t_len..(h * t_len + i + 1) * t_len];
                    let mut s = 0.0;
                    for j in 0..=i {
                        da[j] = math::dot(doi, &c.v[j * d + off..j * d + off + hd]);
                        s += arow[j] * da[j];
                        math::axpy(&mut dv[j * d + off..j * d + off + hd], arow[j], doi);
                    }
                    if req.attention {
                        da_layer[(h * t_len + i) * t_len..(h * t_len + i) * t_len + i + 1].copy_from_slice(&da[..=i]);
                    }
                    let qi = &c.q[i * d + off..i * d + off + hd];
                    for j in 0..=i {
                        let ds = arow[j] * (da[j] - s) * inv_sqrt;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &c.k[j * d + off..j * d + off + hd];
                        math::axpy(&mut dq[i * d + off..i * d + off + hd], ds, kj);
                        math::axpy(&mut dk[j * d + off..j * d + off + hd], ds, qi);
                    }
                }
            }
            if req.attention {
                att_grads[l] = da_layer;
            }
            let dn1_q = linear_backward(self.tensor(Param::Query(l)), &c.n1, &dq, d, d, grad_slot!(Param::Query(l)));
            let dn1_k = linear_backward(self.tensor(Param::Key(l)), &c.n1, &dk, d, d, grad_slot!(Param::Key(l)));
            let dn1_v = linear_backward(self.tensor(Param::Value(l)), &c.n1, &dv, d, d, grad_slot!(Param::Value(l)));
            let dn1: Vec<f64> = dn1_q.iter().zip(&dn1_k).zip(&dn1_v).map(|((a, b), c)| a + b + c).collect();
            let mut dx_in = dx_mid;
            rms_backward(&c.x_in, &c.rms1, self.tensor(Param::AttnNorm(l)), &dn1, d, &mut dx_in, grad_slot!(Param::AttnNorm(l)));
            dx = dx_in;
        }

        if req.params {
            let er = layout.range(Param::TokenEmbedding);
            let pr = layout.range(Param::PositionEmbedding);
            for (t, &tok) in tokens.iter().enumerate() {
                let g = &dx[t * d..(t + 1) * d];
                math::axpy(&mut pg[er.clone()][tok as usize * d..(tok as usize + 1) * d], 1.0, g);
                math::axpy(&mut pg[pr.clone()][t * d..(t + 1) * d], 1.0, g);
            }
        }

        (att_grads, hidden)
    }
}
