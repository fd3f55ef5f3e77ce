//! Editors turning `f_{θ_{t−1}}` into `f_{θ_t}`.
//!
//! Two families are provided. The rank-one and batched editors rewrite
//! `mlp_proj` weights in closed form, weighting the change by the key
//! covariance. The codebook editor leaves every weight alone and attaches a
//! key-value adapter instead.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::corpus::FactRecord;
use crate::model::{ArchSpec, Hooks, ModelState, Predictor, Token};
use crate::{Error, Result};

mod closed_form;
mod codebook;
mod covariance;
mod spread;
mod target;

pub use closed_form::{batched_edit, rank_one_edit, MAX_CONDITION, RANK_TOL};
pub use codebook::{grace_forward_hook, grace_insert, Codebook, CodebookEntry};
pub use covariance::{estimate_covariance, CovarianceStats};
pub use spread::{spread_edit, stats_for, SpreadOutcome};
pub use target::{compute_target_value, SolverSettings, TargetValue};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EditMethod {
    RankOne,
    Batched,
    Codebook,
}

impl EditMethod {
    pub const ALL: [EditMethod; 3] = [EditMethod::RankOne, EditMethod::Batched, EditMethod::Codebook];

    pub fn name(self) -> &'static str {
        match self {
            EditMethod::RankOne => "rank_one",
            EditMethod::Batched => "batched",
            EditMethod::Codebook => "codebook",
        }
    }

    pub fn is_parametric(self) -> bool {
        self != EditMethod::Codebook
    }
}

impl fmt::Display for EditMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EditMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rank_one" | "rome" => Ok(EditMethod::RankOne),
            "batched" | "memit" => Ok(EditMethod::Batched),
            "codebook" | "grace" => Ok(EditMethod::Codebook),
            other => Err(Error::InvalidPlan(alloc::format!("unknown method {other:?}"))),
        }
    }
}

/// What to edit and how.
#[derive(Clone, Debug, PartialEq)]
pub struct EditPlan {
    pub method: EditMethod,
    /// First edited layer.
    pub first_layer: usize,
    /// Last edited layer (inclusive); equals `first_layer` except for
    /// batched edits spread over several layers.
    pub last_layer: usize,
    /// Facts per editing step.
    pub batch_size: usize,
    /// Deferral radius of new codebook entries.
    pub epsilon: f64,
    pub solver: SolverSettings,
}

impl EditPlan {
    pub fn rank_one(layer: usize) -> Self {
        Self {
            method: EditMethod::RankOne,
            first_layer: layer,
            last_layer: layer,
            batch_size: 1,
            epsilon: 1.0,
            solver: SolverSettings::default(),
        }
    }

    pub fn batched(first_layer: usize, last_layer: usize, batch_size: usize) -> Self {
        Self { method: EditMethod::Batched, first_layer, last_layer, batch_size, ..Self::rank_one(first_layer) }
    }

    pub fn codebook(layer: usize, epsilon: f64) -> Self {
        Self { method: EditMethod::Codebook, epsilon, ..Self::rank_one(layer) }
    }

    /// Default layers scaled by depth: rank-one a quarter of the way up,
    /// batched over the lower three quarters, the codebook at the top.
    pub fn default_for(method: EditMethod, arch: &ArchSpec) -> Self {
        let n = arch.n_layers;
        match method {
            EditMethod::RankOne => Self::rank_one(n / 4),
            EditMethod::Batched => Self::batched(0, (3 * n / 4).max(1) - 1, 1),
            EditMethod::Codebook => Self::codebook(n - 1, 1.0),
        }
    }

    pub fn layers(&self) -> core::ops::RangeInclusive<usize> {
        self.first_layer..=self.last_layer
    }

    pub fn validate(&self, arch: &ArchSpec) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidPlan(m));
        if self.first_layer > self.last_layer {
            return bad(alloc::format!("first layer {} after last layer {}", self.first_layer, self.last_layer));
        }
        if self.last_layer >= arch.n_layers {
            return bad(alloc::format!("layer {} out of range for {} layers", self.last_layer, arch.n_layers));
        }
        if self.method != EditMethod::Batched && self.first_layer != self.last_layer {
            return bad(alloc::format!("{} edits a single layer", self.method));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.method == EditMethod::RankOne && self.batch_size != 1 {
            return bad("rank_one edits one fact per step".into());
        }
        if self.method == EditMethod::Codebook && !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(alloc::format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.solver.step_size > 0.0) || !(self.solver.margin >= 0.0) {
            return bad("solver step size must be positive and margin non-negative".into());
        }
        Ok(())
    }
}

/// A model plus, for codebook editing, its adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct EditState {
    pub model: ModelState,
    pub codebook: Option<Codebook>,
}

impl EditState {
    pub fn bare(model: ModelState) -> Self {
        Self { model, codebook: None }
    }

    /// Edits applied so far: weight edits plus codebook entries.
    pub fn edit_count(&self) -> u64 {
        self.model.edit_history_len + self.codebook.as_ref().map_or(0, |c| c.len() as u64)
    }

    pub fn hooks(&self) -> Hooks<'_> {
        match &self.codebook {
            Some(c) => Hooks::with_override(c),
            None => Hooks::none(),
        }
    }
}

impl Predictor for EditState {
    fn vocab_size(&self) -> usize {
        self.model.arch().vocab_size
    }

    fn next_logits(&self, prompt: &[Token]) -> Result<Vec<f64>> {
        self.model.next_logits(prompt, &self.hooks())
    }
}

/// One editing step: stores `facts` (a single fact unless the plan is
/// batched) and returns the new state. `stats` must cover the plan's
/// layers for parametric methods.
pub fn apply_single_edit(
    state: &EditState,
    plan: &EditPlan,
    facts: &[FactRecord],
    stats: &[CovarianceStats],
) -> Result<EditState> {
    plan.validate(state.model.arch())?;
    if facts.is_empty() || facts.len() > plan.batch_size {
        return Err(Error::InvalidPlan(alloc::format!(
            "{} facts for a step of batch size {}",
            facts.len(),
            plan.batch_size
        )));
    }
    match plan.method {
        EditMethod::RankOne => {
            let layer = plan.first_layer;
            let t = compute_target_value(&state.model, layer, &facts[0], &plan.solver)?;
            let st = stats_for(stats, layer)?;
            let p = crate::model::Param::MlpProj(layer);
            let w = rank_one_edit(&state.model.matrix(p), st, &t.key, &t.value)?;
            let mut model = state.model.clone();
            model.set_matrix(p, &w)?;
            model.edit_history_len += 1;
            Ok(EditState { model, codebook: state.codebook.clone() })
        }
        EditMethod::Batched => {
            let out = spread_edit(&state.model, plan.first_layer, plan.last_layer, facts, stats, &plan.solver)?;
            Ok(EditState { model: out.model, codebook: state.codebook.clone() })
        }
        EditMethod::Codebook => {
            let mut cb = match &state.codebook {
                Some(c) if c.layer() == plan.first_layer => c.clone(),
                Some(c) => {
                    return Err(Error::InvalidPlan(alloc::format!(
                        "codebook is attached at layer {}, plan targets {}",
                        c.layer(),
                        plan.first_layer
                    )))
                }
                None => Codebook::for_model(&state.model, plan.first_layer)?,
            };
            for f in facts {
                cb = grace_insert(&cb, &state.model, f, plan.epsilon, &plan.solver)?;
            }
            Ok(EditState { model: state.model.clone(), codebook: Some(cb) })
        }
    }
}
