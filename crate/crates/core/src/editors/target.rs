//! Search for the hidden state that makes the model answer `o′`.

use alloc::vec::Vec;

use crate::corpus::FactRecord;
use crate::model::{GradRequest, Hooks, ModelState, Substitution, Token};
use crate::{Error, Result};

/// Settings of the value search. Each iteration moves the hidden state a
/// distance of `step_size` against the gradient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverSettings {
    pub max_iters: usize,
    pub step_size: f64,
    /// Required log-probability gap between `o′` and the runner-up.
    pub margin: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self { max_iters: 100, step_size: 4.0, margin: 0.1 }
    }
}

/// Result of a value search at one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetValue {
    pub layer: usize,
    /// Position of the last prompt token, where the key is read.
    pub position: usize,
    /// Activation entering `mlp_proj` at `position`.
    pub key: Vec<f64>,
    /// `mlp_proj` output before the search.
    pub current: Vec<f64>,
    /// Replacement `mlp_proj` output found by the search.
    pub value: Vec<f64>,
    /// Layer output hidden state corresponding to `value`.
    pub hidden: Vec<f64>,
    pub iterations: usize,
    /// Cross-entropy of `o′` at the returned value.
    pub loss: f64,
}

/// `o′` log-prob gap over the best other token.
fn margin_of(logits: &[f64], target: Token) -> f64 {
    let t = target as usize;
    let best_other = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != t)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    logits[t] - best_other
}

/// Finds `v∗` for `fact` at `layer`: the `mlp_proj` output at the key
/// position that makes the greedy answer `o′` with the configured margin.
pub fn compute_target_value(
    model: &ModelState,
    layer: usize,
    fact: &FactRecord,
    solver: &SolverSettings,
) -> Result<TargetValue> {
    solve_value(model, layer, &fact.prompt(), fact.new_object, solver)
}

pub(crate) fn solve_value(
    model: &ModelState,
    layer: usize,
    prompt: &[Token],
    target: Token,
    solver: &SolverSettings,
) -> Result<TargetValue> {
    model.check_layer(layer)?;
    if prompt.is_empty() {
        return Err(Error::EmptySequence);
    }
    if !(solver.step_size > 0.0) || !(solver.margin >= 0.0) {
        return Err(Error::Precondition("solver step size must be positive and margin non-negative".into()));
    }
    let a = *model.arch();
    let pos = prompt.len() - 1;
    let mut tokens = prompt.to_vec();
    tokens.push(target);
    let targets = [tokens.len() - 1];

    let (_, trace) = model.forward_traced(&tokens, &Hooks::none())?;
    let lt = &trace.layers[layer];
    let key = lt.key_at(pos, a.d_ff).to_vec();
    let current = lt.mlp_out[pos * a.d_model..(pos + 1) * a.d_model].to_vec();
    let mid = &lt.hidden_mid[pos * a.d_model..(pos + 1) * a.d_model];
    let mut hidden = lt.hidden_out[pos * a.d_model..(pos + 1) * a.d_model].to_vec();

    let v = a.vocab_size;
    let mut iterations = 0;
    loop {
        let hooks = Hooks {
            substitution: Some(Substitution { layer, position: pos, hidden: &hidden }),
            ..Hooks::none()
        };
        let g = model.gradients(&tokens, &targets, &hooks, GradRequest { hidden: true, ..GradRequest::default() })?;
        let row = &g.logits[pos * v..(pos + 1) * v];
        if margin_of(row, target) >= solver.margin {
            let value = if iterations == 0 {
                current.clone()
            } else {
                hidden.iter().zip(mid).map(|(h, m)| h - m).collect()
            };
            return Ok(TargetValue { layer, position: pos, key, current, value, hidden, iterations, loss: g.loss });
        }
        if iterations >= solver.max_iters {
            return Err(Error::SolverFailed { iterations, loss: g.loss });
        }
        let grad = g.hidden.unwrap_or_default();
        iterations += 1;
        let gn = crate::math::norm(&grad);
        if gn == 0.0 {
            return Err(Error::SolverFailed { iterations, loss: g.loss });
        }
        crate::math::axpy(&mut hidden, -solver.step_size / gn, &grad);
        if hidden.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("target value".into()));
        }
    }
}
