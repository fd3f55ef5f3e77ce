//! Run configuration: TOML with one level of tables. Every field has a
//! default, unknown keys are rejected and command-line flags override file
//! values.

use std::path::Path;

use memedit_core::corpus::CorpusSpec;
use memedit_core::digest::sha256_hex;
use memedit_core::editors::{EditMethod, EditPlan, SolverSettings};
use memedit_core::harness::{EvalSchedule, FailurePolicy, ProbeSettings, RunOptions};
use memedit_core::model::ArchSpec;
use memedit_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Output root; not part of the digest.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
    pub arch: ArchSection,
    pub corpus: CorpusSection,
    pub train: TrainSection,
    pub edit: EditSection,
    pub eval: EvalSection,
    pub diagnostics: DiagnosticsSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchSection {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
}

impl Default for ArchSection {
    fn default() -> Self {
        let a = ArchSpec::default();
        Self {
            vocab_size: a.vocab_size,
            d_model: a.d_model,
            n_layers: a.n_layers,
            n_heads: a.n_heads,
            d_ff: a.d_ff,
            max_seq: a.max_seq,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub n_base: usize,
    pub n_edit: usize,
    pub n_filler: usize,
    pub n_icl: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        let c = CorpusSpec::default();
        Self { n_base: c.n_base, n_edit: c.n_edit, n_filler: c.n_filler, n_icl: c.n_icl }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub learn_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub clip_norm: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: t.steps,
            learn_rate: t.learn_rate,
            batch_size: t.batch_size,
            beta1: t.beta1,
            beta2: t.beta2,
            clip_norm: t.clip_norm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditSection {
    /// `rank_one`, `batched` or `codebook`.
    pub method: String,
    /// First edited layer; the method's default when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
    /// Last edited layer for batched edits; defaults to `layer`, or to the
    /// method's default range when `layer` is absent too.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub last_layer: Option<usize>,
    pub batch_size: usize,
    pub epsilon: f64,
    pub max_iters: usize,
    pub step_size: f64,
    pub margin: f64,
    /// Paraphrases scored per fact.
    pub paraphrases: usize,
    /// `continue` or `halt`.
    pub on_failure: String,
}

impl Default for EditSection {
    fn default() -> Self {
        let s = SolverSettings::default();
        Self {
            method: EditMethod::RankOne.name().into(),
            layer: None,
            last_layer: None,
            batch_size: 1,
            epsilon: 1.0,
            max_iters: s.max_iters,
            step_size: s.step_size,
            margin: s.margin,
            paraphrases: 1,
            on_failure: "continue".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub schedule: Vec<usize>,
    pub prefix_words: usize,
    pub max_new: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let p = ProbeSettings::default();
        Self { schedule: EvalSchedule::default().counts().to_vec(), prefix_words: p.prefix_words, max_new: p.max_new }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsSection {
    /// Fragment size of the repetition ratio.
    pub ngram: usize,
    /// Covariance ridge; `1e-2 · trace(C) / d_ff` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ridge: Option<f64>,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        Self { ngram: ProbeSettings::default().ngram, ridge: None }
    }
}

/// Flag values that replace file values when present.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub method: Option<String>,
    pub layer: Option<usize>,
    pub last_layer: Option<usize>,
    pub batch_size: Option<usize>,
    pub epsilon: Option<f64>,
    pub schedule: Option<Vec<usize>>,
    pub out_dir: Option<String>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let c: RunConfig = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml(&text)
    }

    /// Applies `o` and re-validates.
    pub fn with_overrides(mut self, o: &Overrides) -> Result<Self, ConfigError> {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.steps {
            self.train.steps = v;
        }
        if let Some(v) = &o.method {
            self.edit.method = v.clone();
        }
        if let Some(v) = o.layer {
            self.edit.layer = Some(v);
        }
        if let Some(v) = o.last_layer {
            self.edit.last_layer = Some(v);
        }
        if let Some(v) = o.batch_size {
            self.edit.batch_size = v;
        }
        if let Some(v) = o.epsilon {
            self.edit.epsilon = v;
        }
        if let Some(v) = &o.schedule {
            self.eval.schedule = v.clone();
        }
        if let Some(v) = &o.out_dir {
            self.out_dir = Some(v.clone());
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.arch_spec().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.edit_plan()?.validate(&self.arch_spec()).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.schedule()?;
        self.failure_policy()?;
        let c = &self.corpus;
        if [c.n_base, c.n_edit, c.n_filler, c.n_icl].contains(&0) {
            return invalid("corpus counts must be at least 1");
        }
        if self.eval.schedule.last().is_some_and(|&t| t > c.n_edit) {
            return invalid(format!("schedule reaches {} edits but corpus.n_edit is {}", self.eval.schedule.last().unwrap(), c.n_edit));
        }
        let t = &self.train;
        if !(t.learn_rate > 0.0) || t.batch_size == 0 || !(t.clip_norm > 0.0) {
            return invalid("train.learn_rate, train.batch_size and train.clip_norm must be positive");
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return invalid("train.beta1 and train.beta2 must lie in [0, 1)");
        }
        if self.edit.paraphrases == 0 {
            return invalid("edit.paraphrases must be at least 1");
        }
        if self.diagnostics.ngram == 0 {
            return invalid("diagnostics.ngram must be at least 1");
        }
        if self.diagnostics.ridge.is_some_and(|r| !(r >= 0.0) || !r.is_finite()) {
            return invalid("diagnostics.ridge must be non-negative");
        }
        if self.eval.prefix_words == 0 || self.eval.max_new == 0 {
            return invalid("eval.prefix_words and eval.max_new must be positive");
        }
        Ok(())
    }

    pub fn arch_spec(&self) -> ArchSpec {
        let a = &self.arch;
        ArchSpec {
            vocab_size: a.vocab_size,
            d_model: a.d_model,
            n_layers: a.n_layers,
            n_heads: a.n_heads,
            d_ff: a.d_ff,
            max_seq: a.max_seq,
        }
    }

    pub fn corpus_spec(&self) -> CorpusSpec {
        let c = &self.corpus;
        CorpusSpec { n_base: c.n_base, n_edit: c.n_edit, n_filler: c.n_filler, n_icl: c.n_icl, ..CorpusSpec::default() }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            steps: t.steps,
            learn_rate: t.learn_rate,
            batch_size: t.batch_size,
            beta1: t.beta1,
            beta2: t.beta2,
            clip_norm: t.clip_norm,
            seed: self.seed,
        }
    }

    pub fn method(&self) -> Result<EditMethod, ConfigError> {
        self.edit.method.parse().map_err(|e: memedit_core::Error| ConfigError::Invalid(e.to_string()))
    }

    pub fn edit_plan(&self) -> Result<EditPlan, ConfigError> {
        let e = &self.edit;
        let mut plan = EditPlan::default_for(self.method()?, &self.arch_spec());
        if let Some(l) = e.layer {
            plan.first_layer = l;
            plan.last_layer = l;
        }
        if let Some(l) = e.last_layer {
            plan.last_layer = l;
        }
        plan.batch_size = e.batch_size;
        plan.epsilon = e.epsilon;
        plan.solver = SolverSettings { max_iters: e.max_iters, step_size: e.step_size, margin: e.margin };
        Ok(plan)
    }

    pub fn schedule(&self) -> Result<EvalSchedule, ConfigError> {
        EvalSchedule::new(self.eval.schedule.clone()).map_err(|e| ConfigError::Invalid(format!("eval.schedule: {e}")))
    }

    pub fn failure_policy(&self) -> Result<FailurePolicy, ConfigError> {
        match self.edit.on_failure.as_str() {
            "continue" => Ok(FailurePolicy::Continue),
            "halt" => Ok(FailurePolicy::Halt),
            other => invalid(format!("edit.on_failure must be \"continue\" or \"halt\", got {other:?}")),
        }
    }

    pub fn probe_settings(&self) -> ProbeSettings {
        ProbeSettings { prefix_words: self.eval.prefix_words, max_new: self.eval.max_new, ngram: self.diagnostics.ngram }
    }

    pub fn run_options(&self) -> Result<RunOptions, ConfigError> {
        Ok(RunOptions {
            plan: self.edit_plan()?,
            schedule: self.schedule()?,
            probes: self.probe_settings(),
            paraphrases: self.edit.paraphrases,
            policy: self.failure_policy()?,
            seed: self.seed,
            config_digest: self.digest(),
        })
    }

    /// Canonical TOML of everything that affects results.
    pub fn canonical(&self) -> String {
        let c = RunConfig { out_dir: None, ..self.clone() };
        toml::to_string(&c).expect("config serializes")
    }

    /// Digest of the full resolved config; independent of the order of
    /// keys in the source file and of the output directory.
    pub fn digest(&self) -> String {
        sha256_hex(self.canonical().as_bytes())
    }

    /// Digest of the fields that determine the pretrained model and corpus.
    pub fn pretrain_digest(&self) -> String {
        #[derive(Serialize)]
        struct Pretrain<'a> {
            seed: u64,
            arch: &'a ArchSection,
            corpus: &'a CorpusSection,
            train: &'a TrainSection,
        }
        let p = Pretrain { seed: self.seed, arch: &self.arch, corpus: &self.corpus, train: &self.train };
        sha256_hex(toml::to_string(&p).expect("config serializes").as_bytes())
    }
}
