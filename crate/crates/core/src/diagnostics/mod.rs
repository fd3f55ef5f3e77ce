//! Parameter similarity, repetition-adjusted perplexity and saliency flow.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::linalg::Matrix;
use crate::math;
use crate::model::{Hooks, ModelState, Param, Token};
use crate::{Error, Result};

/// Answer tokens scored by [`adjusted_perplexity`]; shorter answers are
/// excluded.
pub const ANSWER_WINDOW: usize = 20;

/// Default fragment size for the repetition ratio.
pub const DEFAULT_NGRAM: usize = 2;

/// Product-moment correlation of two equally shaped matrices.
pub fn pearson_similarity(a: &Matrix, b: &Matrix) -> Result<f64> {
    if (a.rows(), a.cols()) != (b.rows(), b.cols()) {
        return Err(Error::ShapeMismatch { expected: a.rows() * a.cols(), got: b.rows() * b.cols() });
    }
    let (a, b) = (a.as_slice(), b.as_slice());
    pearson(a.len(), |i| a[i], |i| b[i])
}

/// [`pearson_similarity`] over flat `f32` tensors.
pub fn pearson_f32(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch { expected: a.len(), got: b.len() });
    }
    pearson(a.len(), |i| a[i] as f64, |i| b[i] as f64)
}

fn pearson(n: usize, a: impl Fn(usize) -> f64, b: impl Fn(usize) -> f64) -> Result<f64> {
    if n < 2 {
        return Err(Error::InvalidCount(alloc::format!("correlation needs at least 2 entries, got {n}")));
    }
    let nf = n as f64;
    let ma = (0..n).map(&a).sum::<f64>() / nf;
    let mb = (0..n).map(&b).sum::<f64>() / nf;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (x, y) = (a(i) - ma, b(i) - mb);
        sab += x * y;
        saa += x * x;
        sbb += y * y;
    }
    if !(saa > 0.0) || !(sbb > 0.0) {
        return Err(Error::ZeroVariance);
    }
    // sqrt of a product so identical inputs give exactly 1.
    let r = sab / math::sqrt(saa * sbb);
    if !r.is_finite() {
        return Err(Error::NonFinite("correlation".into()));
    }
    Ok(r.clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilarityRow {
    pub layer: usize,
    pub edit_count: usize,
    pub r: f64,
}

/// Correlation of `mlp_proj` between `original` and `edited` at each
/// requested layer.
pub fn layer_similarity(
    original: &ModelState,
    edited: &ModelState,
    layers: &[usize],
    edit_count: usize,
) -> Result<Vec<SimilarityRow>> {
    if original.arch() != edited.arch() {
        return Err(Error::ArchMismatch("models differ in architecture".into()));
    }
    layers
        .iter()
        .map(|&layer| {
            original.check_layer(layer)?;
            let p = Param::MlpProj(layer);
            let r = pearson_f32(original.tensor(p), edited.tensor(p))?;
            Ok(SimilarityRow { layer, edit_count, r })
        })
        .collect()
}

/// Unique `n`-grams over total `n`-grams.
pub fn repetition_ratio(tokens: &[Token], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidCount("n-gram size must be at least 1".into()));
    }
    if tokens.len() < n {
        return Err(Error::InvalidCount(alloc::format!("{} tokens is shorter than n = {n}", tokens.len())));
    }
    let total = tokens.len() - n + 1;
    let unique: BTreeSet<&[Token]> = tokens.windows(n).collect();
    Ok(unique.len() as f64 / total as f64)
}

/// Scores of one generated answer under the judge.
#[derive(Clone, Debug, PartialEq)]
pub struct PerplexityReport {
    /// Perplexity of the first [`ANSWER_WINDOW`] answer tokens.
    pub ppl: Option<f64>,
    /// Repetition ratio over the whole answer.
    pub rho: Option<f64>,
    /// `ppl · e^{1−ρ}`.
    pub adjusted: Option<f64>,
    pub tokens_used: usize,
    pub excluded: bool,
}

/// `PPL · e^{1−ρ}`.
pub fn adjust(ppl: f64, rho: f64) -> f64 {
    ppl * math::exp(1.0 - rho)
}

/// Perplexity of `answer` given `question` under `judge`, penalized for
/// repetition. Answers shorter than [`ANSWER_WINDOW`] are excluded.
pub fn adjusted_perplexity(judge: &ModelState, question: &[Token], answer: &[Token], n: usize) -> Result<PerplexityReport> {
    if question.is_empty() {
        return Err(Error::EmptySequence);
    }
    if answer.len() < ANSWER_WINDOW {
        return Ok(PerplexityReport { ppl: None, rho: None, adjusted: None, tokens_used: 0, excluded: true });
    }
    let max_seq = judge.arch().max_seq;
    if question.len() + ANSWER_WINDOW > max_seq {
        return Err(Error::ContextOverflow { prompt: question.len(), max_new: ANSWER_WINDOW, max_seq });
    }
    let mut tokens = question.to_vec();
    tokens.extend_from_slice(&answer[..ANSWER_WINDOW]);
    let targets: Vec<usize> = (question.len()..tokens.len()).collect();
    let ce = judge.sequence_loss(&tokens, &targets)?;
    let ppl = math::exp(ce);
    let rho = repetition_ratio(answer, n)?;
    Ok(PerplexityReport {
        ppl: Some(ppl),
        rho: Some(rho),
        adjusted: Some(adjust(ppl, rho)),
        tokens_used: ANSWER_WINDOW,
        excluded: false,
    })
}

/// Aggregate over a batch of generations.
#[derive(Clone, Debug, PartialEq)]
pub struct PerplexitySummary {
    pub mean_ppl: f64,
    pub mean_adjusted: f64,
    pub mean_rho: f64,
    pub scored: usize,
    pub excluded: usize,
    pub judge_digest: String,
}

pub fn summarize_perplexity(reports: &[PerplexityReport], judge_digest: &str) -> PerplexitySummary {
    let scored: Vec<&PerplexityReport> = reports.iter().filter(|r| !r.excluded).collect();
    let mean = |f: fn(&PerplexityReport) -> Option<f64>| {
        if scored.is_empty() {
            f64::NAN
        } else {
            scored.iter().filter_map(|r| f(r)).sum::<f64>() / scored.len() as f64
        }
    };
    PerplexitySummary {
        mean_ppl: mean(|r| r.ppl),
        mean_adjusted: mean(|r| r.adjusted),
        mean_rho: mean(|r| r.rho),
        scored: scored.len(),
        excluded: reports.len() - scored.len(),
        judge_digest: judge_digest.into(),
    }
}

/// Which saliency class a strict-lower-triangle entry `(i, j)` falls in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FlowClass {
    /// Text to label word: `(p_k, j)` with `j < p_k`.
    TextToLabel,
    /// Label word to target: `(q, p_k)`.
    LabelToTarget,
    /// Everything else.
    Other,
}

/// Partition of `{(i, j): j < i < len}` induced by the label positions and
/// the target position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlowClasses {
    pub len: usize,
    pub label_positions: Vec<usize>,
    pub target_position: usize,
}

impl FlowClasses {
    pub fn new(len: usize, label_positions: &[usize], target_position: usize) -> Result<Self> {
        if label_positions.is_empty() {
            return Err(Error::Precondition("at least one label position is required".into()));
        }
        if target_position >= len {
            return Err(Error::PositionOutOfRange { position: target_position, len });
        }
        let mut seen = BTreeSet::new();
        for &p in label_positions {
            if p >= target_position {
                return Err(Error::Precondition(alloc::format!(
                    "label position {p} must precede the target position {target_position}"
                )));
            }
            if !seen.insert(p) {
                return Err(Error::Precondition(alloc::format!("label position {p} listed twice")));
            }
        }
        Ok(Self { len, label_positions: label_positions.to_vec(), target_position })
    }

    /// Class of `(i, j)`; `None` outside the strict lower triangle.
    pub fn class_of(&self, i: usize, j: usize) -> Option<FlowClass> {
        if j >= i || i >= self.len {
            return None;
        }
        if self.label_positions.contains(&i) {
            Some(FlowClass::TextToLabel)
        } else if i == self.target_position && self.label_positions.contains(&j) {
            Some(FlowClass::LabelToTarget)
        } else {
            Some(FlowClass::Other)
        }
    }

    /// `(|C_wp|, |C_pq|, |C_ww|)`.
    pub fn sizes(&self) -> (usize, usize, usize) {
        let wp: usize = self.label_positions.iter().sum();
        let pq = self.label_positions.len();
        (wp, pq, self.len * (self.len.saturating_sub(1)) / 2 - wp - pq)
    }
}

/// Per-layer saliency flow scores.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SaliencyLayer {
    pub layer: usize,
    pub s_wp: f64,
    pub s_pq: f64,
    pub s_ww: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyReport {
    pub classes: FlowClasses,
    pub gold: Token,
    pub layers: Vec<SaliencyLayer>,
}

/// `I_l = |Σ_h A_{h,l} ⊙ ∂L/∂A_{h,l}|` for the loss of predicting `gold`
/// right after `target_position`; `[layer][i * len + j]` over the prompt.
/// Rows after the target position do not influence the loss and are zero.
pub fn saliency_matrices(model: &ModelState, prompt: &[Token], target_position: usize, gold: Token) -> Result<Vec<Vec<f64>>> {
    let len = prompt.len();
    if target_position >= len {
        return Err(Error::PositionOutOfRange { position: target_position, len });
    }
    let mut tokens = prompt[..=target_position].to_vec();
    tokens.push(gold);
    let run_len = tokens.len();
    let targets = [run_len - 1];
    let (_, trace) = model.forward_traced(&tokens, &Hooks::none())?;
    let grads = model.attention_saliency(&tokens, &targets)?;
    let nh = model.arch().n_heads;
    let mut out = Vec::with_capacity(grads.len());
    for (lt, g) in trace.layers.iter().zip(&grads) {
        let mut m = vec![0.0; len * len];
        for i in 0..=target_position {
            for j in 0..i {
                let mut s = 0.0;
                for h in 0..nh {
                    let idx = (h * run_len + i) * run_len + j;
                    s += lt.attention[idx] * g[idx];
                }
                m[i * len + j] = s.abs();
            }
        }
        out.push(m);
    }
    Ok(out)
}

/// Mean saliency over the text-to-label, label-to-target and remaining
/// classes at every layer.
pub fn saliency_flows(
    model: &ModelState,
    prompt: &[Token],
    label_positions: &[usize],
    target_position: usize,
    gold: Token,
) -> Result<SaliencyReport> {
    let classes = FlowClasses::new(prompt.len(), label_positions, target_position)?;
    let (nwp, npq, nww) = classes.sizes();
    if nwp == 0 {
        return Err(Error::EmptyClass("text-to-label"));
    }
    if nww == 0 {
        return Err(Error::EmptyClass("other"));
    }
    if (gold as usize) >= model.arch().vocab_size {
        return Err(Error::TokenOutOfRange { token: gold, vocab_size: model.arch().vocab_size });
    }
    let mats = saliency_matrices(model, prompt, target_position, gold)?;
    let len = prompt.len();
    let layers = mats
        .iter()
        .enumerate()
        .map(|(layer, m)| {
            let (mut wp, mut pq, mut ww) = (0.0, 0.0, 0.0);
            for i in 1..len {
                for j in 0..i {
                    let v = m[i * len + j];
                    match classes.class_of(i, j) {
                        Some(FlowClass::TextToLabel) => wp += v,
                        Some(FlowClass::LabelToTarget) => pq += v,
                        _ => ww += v,
                    }
                }
            }
            SaliencyLayer { layer, s_wp: wp / nwp as f64, s_pq: pq / npq as f64, s_ww: ww / nww as f64 }
        })
        .collect();
    Ok(SaliencyReport { classes, gold, layers })
}
