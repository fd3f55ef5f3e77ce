use alloc::vec;
use alloc::vec::Vec;

use super::{ModelState, Param, Token, NORM_EPS};
use crate::math;
use crate::{Error, Result};

/// Replaces the output of `mlp_proj` at a layer, position by position.
///
/// Implemented by the codebook adapter; `lookup` receives the key (the
/// activation entering `mlp_proj`) at the last position of the sequence and
/// returns a replacement value or `None` for pass-through.
pub trait MlpOverride {
    fn layer(&self) -> usize;
    fn lookup(&self, key: &[f64]) -> Option<&[f64]>;
}

/// Overwrites a layer's output hidden state at one position.
#[derive(Clone, Copy, Debug)]
pub struct Substitution<'a> {
    pub layer: usize,
    pub position: usize,
    pub hidden: &'a [f64],
}

/// Adds `delta` to one post-softmax attention entry.
#[derive(Clone, Copy, Debug)]
pub struct AttentionDelta {
    pub layer: usize,
    pub head: usize,
    pub row: usize,
    pub col: usize,
    pub delta: f64,
}

/// Optional interventions applied during a forward pass.
#[derive(Clone, Copy, Default)]
pub struct Hooks<'a> {
    pub substitution: Option<Substitution<'a>>,
    pub mlp_override: Option<&'a dyn MlpOverride>,
    pub attention_delta: Option<AttentionDelta>,
}

impl<'a> Hooks<'a> {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn with_override(o: &'a dyn MlpOverride) -> Self {
        Self { mlp_override: Some(o), ..Self::default() }
    }
}

/// Cached activations of one block.
#[derive(Clone, Debug, Default)]
pub(crate) struct LayerCache {
    pub x_in: Vec<f64>,
    pub rms1: Vec<f64>,
    pub n1: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// `[head][row][col]`, zero above the diagonal.
    pub att: Vec<f64>,
    pub o: Vec<f64>,
    pub x_mid: Vec<f64>,
    pub rms2: Vec<f64>,
    pub n2: Vec<f64>,
    pub pre: Vec<f64>,
    pub key: Vec<f64>,
    pub mlp_out: Vec<f64>,
    pub overridden: Vec<bool>,
    pub x_out: Vec<f64>,
}

#[derive(Clone, Debug)]
pub(crate) struct Cache {
    pub len: usize,
    pub layers: Vec<LayerCache>,
    pub rmsf: Vec<f64>,
    pub nf: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Per-layer activations exposed to analyses.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub len: usize,
    pub layers: Vec<LayerTrace>,
}

#[derive(Clone, Debug)]
pub struct LayerTrace {
    pub len: usize,
    /// `h^{l-1}`, `[len × d_model]`.
    pub hidden_in: Vec<f64>,
    /// `h^l`, `[len × d_model]`.
    pub hidden_out: Vec<f64>,
    /// Residual stream after attention, before the MLP.
    pub hidden_mid: Vec<f64>,
    /// Activations entering `mlp_proj`, `[len × d_ff]`.
    pub keys: Vec<f64>,
    /// Output of `mlp_proj` (after any override), `[len × d_model]`.
    pub mlp_out: Vec<f64>,
    /// `[n_heads × len × len]`, causal.
    pub attention: Vec<f64>,
}

impl LayerTrace {
    pub fn key_at(&self, pos: usize, d_ff: usize) -> &[f64] {
        &self.keys[pos * d_ff..(pos + 1) * d_ff]
    }

    pub fn attention_row(&self, head: usize, row: usize) -> &[f64] {
        let t = self.len;
        &self.attention[(head * t + row) * t..(head * t + row + 1) * t]
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + math::tanh(C * (x + 0.044715 * x * x * x)))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = math::tanh(u);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// `out[t] = scale ⊙ x[t] / rms(x[t])`; returns the per-row rms.
fn rms_norm(x: &[f64], scale: &[f32], d: usize, out: &mut [f64]) -> Vec<f64> {
    let rows = x.len() / d;
    let mut rms = vec![0.0; rows];
    for t in 0..rows {
        let row = &x[t * d..(t + 1) * d];
        let r = math::sqrt(math::dot(row, row) / d as f64 + NORM_EPS);
        rms[t] = r;
        for i in 0..d {
            out[t * d + i] = scale[i] as f64 * row[i] / r;
        }
    }
    rms
}

/// `out[t] = W x[t]` for row-major `W: [out_dim × in_dim]`.
/// `x · Wᵀ` for row-major `x`, given `W` already transposed to `[in × out]`.
fn linear(wt: &[f64], x: &[f64], in_dim: usize, out_dim: usize) -> Vec<f64> {
    let rows = x.len() / in_dim;
    let mut out = vec![0.0; rows * out_dim];
    for t in 0..rows {
        let or = &mut out[t * out_dim..(t + 1) * out_dim];
        for (j, &xj) in x[t * in_dim..(t + 1) * in_dim].iter().enumerate() {
            math::axpy(or, xj, &wt[j * out_dim..(j + 1) * out_dim]);
        }
    }
    out
}

impl ModelState {
    /// Logits for every position, `[len × vocab]`.
    pub fn forward(&self, tokens: &[Token]) -> Result<Vec<f64>> {
        Ok(self.run(tokens, &Hooks::none())?.logits)
    }

    /// Logits plus the per-layer trace.
    pub fn forward_traced(&self, tokens: &[Token], hooks: &Hooks<'_>) -> Result<(Vec<f64>, ForwardTrace)> {
        let cache = self.run(tokens, hooks)?;
        let trace = ForwardTrace {
            len: cache.len,
            layers: cache
                .layers
                .iter()
                .map(|c| LayerTrace {
                    len: cache.len,
                    hidden_in: c.x_in.clone(),
                    hidden_out: c.x_out.clone(),
                    hidden_mid: c.x_mid.clone(),
                    keys: c.key.clone(),
                    mlp_out: c.mlp_out.clone(),
                    attention: c.att.clone(),
                })
                .collect(),
        };
        Ok((cache.logits, trace))
    }

    /// Logits under the given interventions.
    pub fn forward_with(&self, tokens: &[Token], hooks: &Hooks<'_>) -> Result<Vec<f64>> {
        Ok(self.run(tokens, hooks)?.logits)
    }

    /// Logits at the last position only.
    pub fn next_logits(&self, tokens: &[Token], hooks: &Hooks<'_>) -> Result<Vec<f64>> {
        let v = self.arch.vocab_size;
        let logits = self.run(tokens, hooks)?.logits;
        Ok(logits[logits.len() - v..].to_vec())
    }

    pub(crate) fn run(&self, tokens: &[Token], hooks: &Hooks<'_>) -> Result<Cache> {
        self.validate_tokens(tokens)?;
        let a = self.arch;
        let (d, dff, nh, hd) = (a.d_model, a.d_ff, a.n_heads, a.head_dim());
        let t_len = tokens.len();
        if let Some(s) = hooks.substitution {
            self.check_layer(s.layer)?;
            if s.hidden.len() != d {
                return Err(Error::ShapeMismatch { expected: d, got: s.hidden.len() });
            }
            if s.position >= t_len {
                return Err(Error::PositionOutOfRange { position: s.position, len: t_len });
            }
        }
        if let Some(o) = hooks.mlp_override {
            self.check_layer(o.layer())?;
        }

        let emb = self.tensor(Param::TokenEmbedding);
        let pos = self.tensor(Param::PositionEmbedding);
        let mut x = vec![0.0; t_len * d];
        for (t, &tok) in tokens.iter().enumerate() {
            let e = &emb[tok as usize * d..(tok as usize + 1) * d];
            let p = &pos[t * d..(t + 1) * d];
            for i in 0..d {
                x[t * d + i] = e[i] as f64 + p[i] as f64;
            }
        }

        let inv_sqrt = 1.0 / math::sqrt(hd as f64);
        let mut layers = Vec::with_capacity(a.n_layers);
        for l in 0..a.n_layers {
            let mut c = LayerCache { x_in: x.clone(), ..LayerCache::default() };
            c.n1 = vec![0.0; t_len * d];
            c.rms1 = rms_norm(&x, self.tensor(Param::AttnNorm(l)), d, &mut c.n1);
            c.q = linear(self.transposed(Param::Query(l)), &c.n1, d, d);
            c.k = linear(self.transposed(Param::Key(l)), &c.n1, d, d);
            c.v = linear(self.transposed(Param::Value(l)), &c.n1, d, d);

            c.att = vec![0.0; nh * t_len * t_len];
            c.o = vec![0.0; t_len * d];
            for h in 0..nh {
                let off = h * hd;
                for i in 0..t_len {
                    let qi = &c.q[i * d + off..i * d + off + hd];
                    let row = &mut c.att[(h * t_len + i) * t_len..(h * t_len + i + 1) * t_len];
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let s = math::dot(qi, &c.k[j * d + off..j * d + off + hd]) * inv_sqrt;
                        row[j] = s;
                        mx = mx.max(s);
                    }
                    let mut z = 0.0;
                    for r in row.iter_mut().take(i + 1) {
                        *r = math::exp(*r - mx);
                        z += *r;
                    }
                    for r in row.iter_mut().take(i + 1) {
                        *r /= z;
                    }
                    if let Some(ad) = hooks.attention_delta {
                        if ad.layer == l && ad.head == h && ad.row == i && ad.col <= i {
                            row[ad.col] += ad.delta;
                        }
                    }
                    let oi = &mut c.o[i * d + off..i * d + off + hd];
                    for j in 0..=i {
                        let w = row[j];
                        math::axpy(oi, w, &c.v[j * d + off..j * d + off + hd]);
                    }
                }
            }
            let attn_out = linear(self.transposed(Param::Output(l)), &c.o, d, d);
            c.x_mid = x.iter().zip(&attn_out).map(|(a, b)| a + b).collect();

            c.n2 = vec![0.0; t_len * d];
            c.rms2 = rms_norm(&c.x_mid, self.tensor(Param::MlpNorm(l)), d, &mut c.n2);
            c.pre = linear(self.transposed(Param::MlpFc(l)), &c.n2, d, dff);
            c.key = c.pre.iter().map(|&v| gelu(v)).collect();
            c.mlp_out = linear(self.transposed(Param::MlpProj(l)), &c.key, dff, d);
            c.overridden = vec![false; t_len];
            if let Some(o) = hooks.mlp_override.filter(|o| o.layer() == l) {
                let t = t_len - 1;
                if let Some(val) = o.lookup(&c.key[t * dff..(t + 1) * dff]) {
                    c.mlp_out[t * d..(t + 1) * d].copy_from_slice(val);
                    c.overridden[t] = true;
                }
            }
            c.x_out = c.x_mid.iter().zip(&c.mlp_out).map(|(a, b)| a + b).collect();
            if let Some(s) = hooks.substitution.filter(|s| s.layer == l) {
                c.x_out[s.position * d..(s.position + 1) * d].copy_from_slice(s.hidden);
            }
            x = c.x_out.clone();
            layers.push(c);
        }

        let mut nf = vec![0.0; t_len * d];
        let rmsf = rms_norm(&x, self.tensor(Param::FinalNorm), d, &mut nf);
        let logits = linear(self.transposed(Param::Unembedding), &nf, d, a.vocab_size);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        Ok(Cache { len: t_len, layers, rmsf, nf, logits })
    }

    /// Greedy decoding; stops after `max_new` tokens or on `stop`.
    pub fn generate(&self, prompt: &[Token], max_new: usize, stop: Option<Token>) -> Result<Vec<Token>> {
        self.generate_with(prompt, max_new, stop, &Hooks::none())
    }

    pub fn generate_with(
        &self,
        prompt: &[Token],
        max_new: usize,
        stop: Option<Token>,
        hooks: &Hooks<'_>,
    ) -> Result<Vec<Token>> {
        self.validate_tokens(prompt)?;
        if prompt.len() + max_new > self.arch.max_seq {
            return Err(Error::ContextOverflow { prompt: prompt.len(), max_new, max_seq: self.arch.max_seq });
        }
        let mut seq = prompt.to_vec();
        let mut out = Vec::with_capacity(max_new);
        for _ in 0..max_new {
            let logits = self.next_logits(&seq, hooks)?;
            let tok = argmax(&logits) as Token;
            out.push(tok);
            if Some(tok) == stop {
                break;
            }
            seq.push(tok);
        }
        Ok(out)
    }

    /// Mean cross-entropy of `tokens[p]` given `tokens[..p]` over the targets.
    pub fn sequence_loss(&self, tokens: &[Token], targets: &[usize]) -> Result<f64> {
        self.sequence_loss_with(tokens, targets, &Hooks::none())
    }

    pub fn sequence_loss_with(&self, tokens: &[Token], targets: &[usize], hooks: &Hooks<'_>) -> Result<f64> {
        check_targets(targets, tokens.len())?;
        let logits = self.forward_with(tokens, hooks)?;
        Ok(cross_entropy(&logits, tokens, targets, self.arch.vocab_size).0)
    }
}

pub(crate) fn check_targets(targets: &[usize], len: usize) -> Result<()> {
    if targets.is_empty() {
        return Err(Error::EmptyTargets);
    }
    for &p in targets {
        if p == 0 {
            return Err(Error::PositionZeroTarget(p));
        }
        if p >= len {
            return Err(Error::PositionOutOfRange { position: p, len });
        }
    }
    Ok(())
}

/// Mean cross-entropy and its gradient with respect to the logits.
pub(crate) fn cross_entropy(logits: &[f64], tokens: &[Token], targets: &[usize], v: usize) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; logits.len()];
    let n = targets.len() as f64;
    let mut loss = 0.0;
    for &p in targets {
        let row = &logits[(p - 1) * v..p * v];
        let lp = log_softmax(row);
        let gold = tokens[p] as usize;
        loss -= lp[gold];
        let g = &mut grad[(p - 1) * v..p * v];
        for i in 0..v {
            g[i] += math::exp(lp[i]) / n;
        }
        g[gold] -= 1.0 / n;
    }
    (loss / n, grad)
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|&x| math::exp(x - mx)).sum();
    let lz = mx + math::ln(z);
    row.iter().map(|&x| x - lz).collect()
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
