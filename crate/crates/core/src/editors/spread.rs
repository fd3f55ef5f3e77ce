use alloc::boxed::Box;
use alloc::vec::Vec;

use crate::corpus::FactRecord;
use crate::linalg::Matrix;
use crate::model::{Hooks, ModelState, Param};
use crate::{Error, Result};

use super::target::{compute_target_value, SolverSettings, TargetValue};
use super::{batched_edit, CovarianceStats};

/// Output of [`spread_edit`].
#[derive(Clone, Debug)]
pub struct SpreadOutcome {
    pub model: ModelState,
    /// Value searches at the top layer of the range, one per fact.
    pub targets: Vec<TargetValue>,
}

fn at_layer(layer: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::AtLayer { .. } => e,
        other => Error::AtLayer { layer, source: Box::new(other) },
    }
}

/// Looks up the statistics for `layer`.
pub fn stats_for(stats: &[CovarianceStats], layer: usize) -> Result<&CovarianceStats> {
    stats
        .iter()
        .find(|s| s.layer == layer)
        .ok_or_else(|| Error::Precondition(alloc::format!("no covariance statistics for layer {layer}")))
}

/// Stores every fact of `facts` across `first..=last`. The target hidden
/// state is found at `last`; each layer, in ascending order, then takes an
/// equal share of the residual still separating the current output from
/// that target.
pub fn spread_edit(
    model: &ModelState,
    first: usize,
    last: usize,
    facts: &[FactRecord],
    stats: &[CovarianceStats],
    solver: &SolverSettings,
) -> Result<SpreadOutcome> {
    if first > last {
        return Err(Error::InvalidPlan(alloc::format!("empty layer range {first}..={last}")));
    }
    model.check_layer(last)?;
    if facts.is_empty() {
        return Err(Error::InvalidPlan("no facts to edit".into()));
    }
    let a = *model.arch();
    let (d, dff) = (a.d_model, a.d_ff);

    let targets = facts
        .iter()
        .map(|f| compute_target_value(model, last, f, solver))
        .collect::<Result<Vec<_>>>()
        .map_err(at_layer(last))?;

    let mut out = model.clone();
    for layer in first..=last {
        let remaining = (last - layer + 1) as f64;
        let mut keys = Vec::with_capacity(facts.len());
        let mut values = Vec::with_capacity(facts.len());
        for (f, t) in facts.iter().zip(&targets) {
            let (_, trace) = out.forward_traced(&f.prompt(), &Hooks::none()).map_err(at_layer(layer))?;
            let p = t.position;
            let lt = &trace.layers[layer];
            let top = &trace.layers[last].hidden_out[p * d..(p + 1) * d];
            let cur = &lt.mlp_out[p * d..(p + 1) * d];
            let v: Vec<f64> = cur.iter().zip(&t.hidden).zip(top).map(|((c, z), h)| c + (z - h) / remaining).collect();
            keys.push(lt.key_at(p, dff).to_vec());
            values.push(v);
        }
        let st = stats_for(stats, layer)?;
        let w = out.matrix(Param::MlpProj(layer));
        let edited = batched_edit(&w, st, &Matrix::from_columns(&keys), &Matrix::from_columns(&values))
            .map_err(at_layer(layer))?;
        out.set_matrix(Param::MlpProj(layer), &edited).map_err(at_layer(layer))?;
    }
    out.edit_history_len += 1;
    Ok(SpreadOutcome { model: out, targets })
}
