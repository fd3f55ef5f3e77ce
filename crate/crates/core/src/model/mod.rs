//! The micro decoder-only transformer.
//!
//! Pre-norm blocks with scale-only RMS normalization, causal multi-head
//! attention and a two-matrix GELU MLP (`mlp_fc` then `mlp_proj`). All
//! parameters live in one flat `f32` array whose order is fixed by
//! [`Param::all`]; that order is also the checkpoint payload order.
//! Activations and reductions are computed in `f64`.

mod backward;
mod forward;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::OnceCell;
use core::ops::Range;

pub use backward::{GradRequest, Gradients};
pub use forward::{argmax, log_softmax, AttentionDelta, ForwardTrace, Hooks, MlpOverride, Substitution};

use crate::linalg::Matrix;
use crate::rng::Rng;
use crate::{digest, Error, Result};

pub type Token = u32;

pub(crate) const NORM_EPS: f64 = 1e-5;

/// Architecture descriptor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ArchSpec {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self { vocab_size: 256, d_model: 64, n_layers: 4, n_heads: 2, d_ff: 256, max_seq: 64 }
    }
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArch(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidArch(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq < 2 {
            return Err(Error::InvalidArch("max_seq must be at least 2".into()));
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(Error::InvalidArch("vocab_size exceeds token id range".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn param_count(&self) -> usize {
        Param::all(self).map(|p| p.len(self)).sum()
    }
}

/// One named parameter tensor. Matrices are row-major `[out × in]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Param {
    TokenEmbedding,
    PositionEmbedding,
    AttnNorm(usize),
    Query(usize),
    Key(usize),
    Value(usize),
    Output(usize),
    MlpNorm(usize),
    MlpFc(usize),
    MlpProj(usize),
    FinalNorm,
    Unembedding,
}

impl Param {
    /// Every parameter in storage order.
    pub fn all(arch: &ArchSpec) -> impl Iterator<Item = Param> {
        let layers = (0..arch.n_layers).flat_map(|l| {
            [
                Param::AttnNorm(l),
                Param::Query(l),
                Param::Key(l),
                Param::Value(l),
                Param::Output(l),
                Param::MlpNorm(l),
                Param::MlpFc(l),
                Param::MlpProj(l),
            ]
        });
        [Param::TokenEmbedding, Param::PositionEmbedding]
            .into_iter()
            .chain(layers)
            .chain([Param::FinalNorm, Param::Unembedding])
    }

    /// `(rows, cols)`; vectors are `(len, 1)`.
    pub fn shape(&self, a: &ArchSpec) -> (usize, usize) {
        match self {
            Param::TokenEmbedding | Param::Unembedding => (a.vocab_size, a.d_model),
            Param::PositionEmbedding => (a.max_seq, a.d_model),
            Param::AttnNorm(_) | Param::MlpNorm(_) | Param::FinalNorm => (a.d_model, 1),
            Param::Query(_) | Param::Key(_) | Param::Value(_) | Param::Output(_) => {
                (a.d_model, a.d_model)
            }
            Param::MlpFc(_) => (a.d_ff, a.d_model),
            Param::MlpProj(_) => (a.d_model, a.d_ff),
        }
    }

    pub fn len(&self, a: &ArchSpec) -> usize {
        let (r, c) = self.shape(a);
        r * c
    }

    pub fn name(&self) -> String {
        match self {
            Param::TokenEmbedding => "token_embedding".into(),
            Param::PositionEmbedding => "position_embedding".into(),
            Param::AttnNorm(l) => format!("layers.{l}.attn_norm"),
            Param::Query(l) => format!("layers.{l}.query"),
            Param::Key(l) => format!("layers.{l}.key"),
            Param::Value(l) => format!("layers.{l}.value"),
            Param::Output(l) => format!("layers.{l}.output"),
            Param::MlpNorm(l) => format!("layers.{l}.mlp_norm"),
            Param::MlpFc(l) => format!("layers.{l}.mlp_fc"),
            Param::MlpProj(l) => format!("layers.{l}.mlp_proj"),
            Param::FinalNorm => "final_norm".into(),
            Param::Unembedding => "unembedding".into(),
        }
    }
}

/// Offsets of every parameter in the flat array.
#[derive(Clone, Debug)]
pub struct Layout {
    per_layer: usize,
    layer_base: usize,
    final_norm: usize,
    unembedding: usize,
    total: usize,
    arch: ArchSpec,
}

impl Layout {
    pub fn new(arch: &ArchSpec) -> Self {
        let d = arch.d_model;
        let layer_base = arch.vocab_size * d + arch.max_seq * d;
        let per_layer = 2 * d + 4 * d * d + 2 * d * arch.d_ff;
        let final_norm = layer_base + per_layer * arch.n_layers;
        let unembedding = final_norm + d;
        let total = unembedding + arch.vocab_size * d;
        Self { per_layer, layer_base, final_norm, unembedding, total, arch: *arch }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn range(&self, p: Param) -> Range<usize> {
        let a = &self.arch;
        let d = a.d_model;
        let start = match p {
            Param::TokenEmbedding => 0,
            Param::PositionEmbedding => a.vocab_size * d,
            Param::FinalNorm => self.final_norm,
            Param::Unembedding => self.unembedding,
            Param::AttnNorm(l)
            | Param::Query(l)
            | Param::Key(l)
            | Param::Value(l)
            | Param::Output(l)
            | Param::MlpNorm(l)
            | Param::MlpFc(l)
            | Param::MlpProj(l) => {
                let base = self.layer_base + l * self.per_layer;
                base + match p {
                    Param::AttnNorm(_) => 0,
                    Param::Query(_) => d,
                    Param::Key(_) => d + d * d,
                    Param::Value(_) => d + 2 * d * d,
                    Param::Output(_) => d + 3 * d * d,
                    Param::MlpNorm(_) => d + 4 * d * d,
                    Param::MlpFc(_) => 2 * d + 4 * d * d,
                    _ => 2 * d + 4 * d * d + d * a.d_ff,
                }
            }
        };
        start..start + p.len(a)
    }
}

/// Full weight set plus bookkeeping.
#[derive(Clone, Debug)]
pub struct ModelState {
    arch: ArchSpec,
    params: Vec<f32>,
    /// `f64` copy of `params` with every matrix transposed; rebuilt lazily
    /// after any mutation.
    widened: OnceCell<Vec<f64>>,
    /// Seed the weights were initialized from.
    pub seed: u64,
    /// Number of parameter edits applied since training.
    pub edit_history_len: u64,
}

impl PartialEq for ModelState {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch
            && self.params == other.params
            && self.seed == other.seed
            && self.edit_history_len == other.edit_history_len
    }
}

impl ModelState {
    /// Random initialization: normal(0, 0.02) everywhere, residual output
    /// projections scaled down by `sqrt(2 * n_layers)`, norm scales at 1.
    pub fn init(arch: ArchSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut m = Self::zeros(arch)?;
        m.seed = seed;
        let mut rng = Rng::stream(seed, 0x1417);
        let resid_std = 0.02 / libm::sqrt(2.0 * arch.n_layers as f64);
        for p in Param::all(&arch).collect::<Vec<_>>() {
            let std = match p {
                Param::AttnNorm(_) | Param::MlpNorm(_) | Param::FinalNorm => {
                    m.tensor_mut(p).fill(1.0);
                    continue;
                }
                Param::Output(_) | Param::MlpProj(_) => resid_std,
                _ => 0.02,
            };
            for v in m.tensor_mut(p) {
                *v = (rng.normal() * std) as f32;
            }
        }
        Ok(m)
    }

    /// All-zero weights (norm scales included).
    pub fn zeros(arch: ArchSpec) -> Result<Self> {
        arch.validate()?;
        let total = Layout::new(&arch).total();
        Ok(Self { arch, params: vec![0.0; total], widened: OnceCell::new(), seed: 0, edit_history_len: 0 })
    }

    /// Rebuilds a model from a flat parameter array in storage order.
    pub fn from_params(arch: ArchSpec, params: Vec<f32>, seed: u64, edit_history_len: u64) -> Result<Self> {
        arch.validate()?;
        let total = Layout::new(&arch).total();
        if params.len() != total {
            return Err(Error::ShapeMismatch { expected: total, got: params.len() });
        }
        if let Some(i) = params.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter index {i}")));
        }
        Ok(Self { arch, params, widened: OnceCell::new(), seed, edit_history_len })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.arch)
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        self.widened.take();
        &mut self.params
    }

    pub fn tensor(&self, p: Param) -> &[f32] {
        &self.params[self.layout().range(p)]
    }

    pub fn tensor_mut(&mut self, p: Param) -> &mut [f32] {
        let r = self.layout().range(p);
        self.widened.take();
        &mut self.params[r]
    }

    /// A weight matrix widened to `f64` and transposed, `[cols × rows]`.
    pub(crate) fn transposed(&self, p: Param) -> &[f64] {
        let layout = self.layout();
        let all = self.widened.get_or_init(|| {
            let mut w: Vec<f64> = self.params.iter().map(|&v| v as f64).collect();
            for q in Param::all(&self.arch) {
                let (rows, cols) = q.shape(&self.arch);
                if rows < 2 || cols < 2 {
                    continue;
                }
                let r = layout.range(q);
                let src = &self.params[r.clone()];
                let dst = &mut w[r];
                for i in 0..rows {
                    for j in 0..cols {
                        dst[j * rows + i] = src[i * cols + j] as f64;
                    }
                }
            }
            w
        });
        &all[layout.range(p)]
    }

    /// A parameter tensor widened to an `f64` matrix.
    pub fn matrix(&self, p: Param) -> Matrix {
        let (r, c) = p.shape(&self.arch);
        Matrix::from_f32(r, c, self.tensor(p))
    }

    /// Overwrites a parameter tensor, narrowing to `f32`.
    pub fn set_matrix(&mut self, p: Param, m: &Matrix) -> Result<()> {
        let (r, c) = p.shape(&self.arch);
        if (m.rows(), m.cols()) != (r, c) {
            return Err(Error::ShapeMismatch { expected: r * c, got: m.rows() * m.cols() });
        }
        if !m.is_finite() {
            return Err(Error::NonFinite(p.name()));
        }
        for (dst, src) in self.tensor_mut(p).iter_mut().zip(m.as_slice()) {
            *dst = *src as f32;
        }
        Ok(())
    }

    pub fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.arch.n_layers {
            return Err(Error::LayerOutOfRange { layer, n_layers: self.arch.n_layers });
        }
        Ok(())
    }

    /// SHA-256 over the little-endian parameter bytes.
    pub fn digest(&self) -> String {
        digest::f32_digest(&self.params)
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }

    pub(crate) fn validate_tokens(&self, tokens: &[Token]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        if tokens.len() > self.arch.max_seq {
            return Err(Error::SequenceTooLong { len: tokens.len(), max_seq: self.arch.max_seq });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.arch.vocab_size) {
            return Err(Error::TokenOutOfRange { token: t, vocab_size: self.arch.vocab_size });
        }
        Ok(())
    }
}

/// Anything that produces next-token logits for a prompt: a bare model,
/// a model with an adapter attached, or a test double.
pub trait Predictor {
    fn vocab_size(&self) -> usize;

    fn next_logits(&self, prompt: &[Token]) -> Result<Vec<f64>>;

    fn greedy_next(&self, prompt: &[Token]) -> Result<Token> {
        Ok(forward::argmax(&self.next_logits(prompt)?) as Token)
    }

    /// Greedy continuation of at most `max_new` tokens, ending early on `stop`.
    fn generate(&self, prompt: &[Token], max_new: usize, stop: Option<Token>) -> Result<Vec<Token>> {
        let mut seq = prompt.to_vec();
        let mut out = Vec::with_capacity(max_new);
        for _ in 0..max_new {
            let t = self.greedy_next(&seq)?;
            out.push(t);
            if Some(t) == stop {
                break;
            }
            seq.push(t);
        }
        Ok(out)
    }
}

impl Predictor for ModelState {
    fn vocab_size(&self) -> usize {
        self.arch.vocab_size
    }

    fn next_logits(&self, prompt: &[Token]) -> Result<Vec<f64>> {
        ModelState::next_logits(self, prompt, &Hooks::none())
    }

    fn generate(&self, prompt: &[Token], max_new: usize, stop: Option<Token>) -> Result<Vec<Token>> {
        ModelState::generate(self, prompt, max_new, stop)
    }
}
