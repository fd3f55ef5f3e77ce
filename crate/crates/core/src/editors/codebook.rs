use alloc::vec::Vec;

use crate::corpus::FactRecord;
use crate::math;
use crate::model::{MlpOverride, ModelState};
use crate::{Error, Result};

use super::target::{solve_value, SolverSettings};

#[derive(Clone, Debug, PartialEq)]
pub struct CodebookEntry {
    pub key: Vec<f64>,
    pub value: Vec<f64>,
    pub radius: f64,
    pub fact_id: u32,
}

/// Key-value adapter attached after `mlp_proj` of one layer. Any position
/// whose key lies within an entry's radius has its `mlp_proj` output
/// replaced by the entry's value; all other positions pass through.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    layer: usize,
    key_dim: usize,
    value_dim: usize,
    entries: Vec<CodebookEntry>,
}

impl Codebook {
    pub fn new(layer: usize, key_dim: usize, value_dim: usize) -> Self {
        Self { layer, key_dim, value_dim, entries: Vec::new() }
    }

    /// An empty codebook sized for `model`.
    pub fn for_model(model: &ModelState, layer: usize) -> Result<Self> {
        model.check_layer(layer)?;
        Ok(Self::new(layer, model.arch().d_ff, model.arch().d_model))
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn key_dim(&self) -> usize {
        self.key_dim
    }

    pub fn value_dim(&self) -> usize {
        self.value_dim
    }

    pub fn entries(&self) -> &[CodebookEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, entry: CodebookEntry) -> Result<()> {
        if entry.key.len() != self.key_dim {
            return Err(Error::ShapeMismatch { expected: self.key_dim, got: entry.key.len() });
        }
        if entry.value.len() != self.value_dim {
            return Err(Error::ShapeMismatch { expected: self.value_dim, got: entry.value.len() });
        }
        if !(entry.radius > 0.0) || !entry.radius.is_finite() {
            return Err(Error::Precondition(alloc::format!("radius must be positive, got {}", entry.radius)));
        }
        if entry.key.iter().chain(&entry.value).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(alloc::format!("codebook entry for fact {}", entry.fact_id)));
        }
        self.entries.push(entry);
        Ok(())
    }

    /// Index of and Euclidean distance to the closest key; the lowest index
    /// wins ties.
    pub fn nearest(&self, query: &[f64]) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, e) in self.entries.iter().enumerate() {
            let d2: f64 = e.key.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
            if best.is_none_or(|(_, b)| d2 < b) {
                best = Some((i, d2));
            }
        }
        best.map(|(i, d2)| (i, math::sqrt(d2)))
    }
}

/// The stored value of the nearest key if the query lies strictly inside
/// that key's radius, `None` (pass-through) otherwise.
pub fn grace_forward_hook<'a>(codebook: &'a Codebook, query: &[f64]) -> Option<&'a [f64]> {
    let (i, dist) = codebook.nearest(query)?;
    let e = &codebook.entries[i];
    (dist < e.radius).then_some(e.value.as_slice())
}

impl MlpOverride for Codebook {
    fn layer(&self) -> usize {
        self.layer
    }

    fn lookup(&self, key: &[f64]) -> Option<&[f64]> {
        grace_forward_hook(self, key)
    }
}

/// Appends an entry for `fact`: its key at the codebook layer, a value
/// trained (starting from the current output) until the model answers `o′`,
/// and radius `epsilon`. The model is not touched.
pub fn grace_insert(
    codebook: &Codebook,
    model: &ModelState,
    fact: &FactRecord,
    epsilon: f64,
    solver: &SolverSettings,
) -> Result<Codebook> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::Precondition(alloc::format!("epsilon must be positive, got {epsilon}")));
    }
    if codebook.key_dim != model.arch().d_ff || codebook.value_dim != model.arch().d_model {
        return Err(Error::ArchMismatch("codebook dimensions do not match the model".into()));
    }
    let t = solve_value(model, codebook.layer, &fact.prompt(), fact.new_object, solver)?;
    let mut out = codebook.clone();
    out.push(CodebookEntry { key: t.key, value: t.value, radius: epsilon, fact_id: fact.id })?;
    Ok(out)
}
