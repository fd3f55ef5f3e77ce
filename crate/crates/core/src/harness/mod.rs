//! The sequential-editing protocol, its metrics and the downstream probes.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::corpus::{Corpus, FactRecord, EOS};
use crate::diagnostics::{adjusted_perplexity, layer_similarity, summarize_perplexity, PerplexitySummary, SimilarityRow};
use crate::editors::{apply_single_edit, CovarianceStats, EditMethod, EditPlan, EditState};
use crate::model::{ModelState, Predictor};
use crate::train::fact_recall;
use crate::{Error, Result};

/// Edit counts at which a run is evaluated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalSchedule {
    counts: Vec<usize>,
}

impl EvalSchedule {
    pub fn new(counts: Vec<usize>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::InvalidCount("schedule is empty".into()));
        }
        if counts[0] == 0 || counts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidCount(alloc::format!("schedule {counts:?} must be positive and strictly increasing")));
        }
        Ok(Self { counts })
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Total number of facts a run edits.
    pub fn last(&self) -> usize {
        self.counts[self.counts.len() - 1]
    }

    /// Whether a step covering `(before, after]` reaches a scheduled count.
    pub fn hits(&self, before: usize, after: usize) -> bool {
        self.counts.iter().any(|&c| before < c && c <= after)
    }
}

impl Default for EvalSchedule {
    fn default() -> Self {
        Self { counts: alloc::vec![1, 10, 20, 50, 100] }
    }
}

/// Reliability and generalization, each in `[0, 1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EditScores {
    pub reliability: f64,
    pub generalization: f64,
}

/// Scores the most recent edit: reliability on the edit prompt and the
/// fraction of the first `paraphrases` paraphrases answered with `o′`.
pub fn score_individual<P: Predictor + ?Sized>(p: &P, fact: &FactRecord, paraphrases: usize) -> Result<EditScores> {
    let n = paraphrases.min(fact.paraphrases.len());
    if n == 0 {
        return Err(Error::Precondition(alloc::format!("fact {} has no paraphrase to score", fact.id)));
    }
    let rel = p.greedy_next(&fact.prompt())? == fact.new_object;
    let mut hits = 0;
    for i in 0..n {
        let q = fact.paraphrase_prompt(i).unwrap_or_default();
        if p.greedy_next(&q)? == fact.new_object {
            hits += 1;
        }
    }
    Ok(EditScores { reliability: f64::from(u8::from(rel)), generalization: hits as f64 / n as f64 })
}

/// Mean of [`score_individual`] over every fact edited so far.
pub fn score_sequential<P: Predictor + ?Sized>(p: &P, facts: &[FactRecord], paraphrases: usize) -> Result<EditScores> {
    if facts.is_empty() {
        return Err(Error::Precondition("no edited facts to score".into()));
    }
    let mut sum = EditScores::default();
    for f in facts {
        let s = score_individual(p, f, paraphrases)?;
        sum.reliability += s.reliability;
        sum.generalization += s.generalization;
    }
    let n = facts.len() as f64;
    Ok(EditScores { reliability: sum.reliability / n, generalization: sum.generalization / n })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProbeSettings {
    /// Filler words given as the language-modelling prompt.
    pub prefix_words: usize,
    /// Tokens generated per prompt.
    pub max_new: usize,
    /// Fragment size of the repetition ratio.
    pub ngram: usize,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self { prefix_words: 8, max_new: 24, ngram: crate::diagnostics::DEFAULT_NGRAM }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeMetrics {
    /// Recall of the never-edited base facts.
    pub locality: f64,
    /// Judge-scored generations on held-out filler prompts.
    pub lm: PerplexitySummary,
    /// First-token label accuracy on 1-shot prompts.
    pub icl_accuracy: f64,
}

/// Locality, language-modelling and in-context probes of `p`.
pub fn probe_suite<P: Predictor + ?Sized>(
    p: &P,
    corpus: &Corpus,
    judge: &ModelState,
    settings: &ProbeSettings,
) -> Result<ProbeMetrics> {
    let locality = fact_recall(p, &corpus.base_facts, false)?;

    let mut reports = Vec::with_capacity(corpus.filler.len());
    for prompt in corpus.filler_prompts(settings.prefix_words) {
        let answer = p.generate(&prompt, settings.max_new, Some(EOS))?;
        reports.push(adjusted_perplexity(judge, &prompt, &answer, settings.ngram)?);
    }
    let lm = summarize_perplexity(&reports, &judge.digest());

    let prompts = corpus.icl_prompts();
    if prompts.is_empty() {
        return Err(Error::Precondition("no in-context probes".into()));
    }
    let mut hits = 0;
    for q in &prompts {
        if p.greedy_next(&q.tokens)? == q.gold {
            hits += 1;
        }
    }
    Ok(ProbeMetrics { locality, lm, icl_accuracy: hits as f64 / prompts.len() as f64 })
}

/// What a run does when an editing step fails.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FailurePolicy {
    /// Record the failure, leave the state unchanged and go on.
    #[default]
    Continue,
    Halt,
}

/// Elapsed wall time, supplied by the caller.
pub trait Clock {
    fn seconds(&self) -> f64;
}

/// A clock that always reads zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoClock;

impl Clock for NoClock {
    fn seconds(&self) -> f64 {
        0.0
    }
}

/// Shared, read-only inputs of a run.
#[derive(Clone, Copy)]
pub struct RunInputs<'a> {
    /// The pretrained model, `edit_history_len = 0`.
    pub model: &'a ModelState,
    /// Frozen copy used to score generations.
    pub judge: &'a ModelState,
    pub corpus: &'a Corpus,
    /// Key statistics for every layer a parametric plan may touch.
    pub stats: &'a [CovarianceStats],
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOptions {
    pub plan: EditPlan,
    pub schedule: EvalSchedule,
    pub probes: ProbeSettings,
    /// Paraphrases scored per fact.
    pub paraphrases: usize,
    pub policy: FailurePolicy,
    pub seed: u64,
    pub config_digest: String,
}

impl RunOptions {
    pub fn new(plan: EditPlan) -> Self {
        Self {
            plan,
            schedule: EvalSchedule::default(),
            probes: ProbeSettings::default(),
            paraphrases: 1,
            policy: FailurePolicy::Continue,
            seed: 0,
            config_digest: String::new(),
        }
    }
}

/// Metrics after the step that reached edit count `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub t: usize,
    pub steps: usize,
    /// Over the facts of the latest step; zero if that step failed.
    pub individual: EditScores,
    pub sequential: EditScores,
    pub probes: ProbeMetrics,
    /// `mlp_proj` correlation with the unedited model at each plan layer.
    pub similarity: Vec<SimilarityRow>,
    /// Failed steps so far.
    pub failures: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditFailure {
    pub step: usize,
    pub t: usize,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub config_digest: String,
    pub judge_digest: String,
    pub seed: u64,
    pub plan: EditPlan,
    pub rows: Vec<ReportRow>,
    pub failures: Vec<EditFailure>,
    /// Seconds since the start of the run at each row; kept apart from the
    /// reproducible payload.
    pub wall_secs: Vec<f64>,
}

impl RunReport {
    /// Checks score ranges and row order.
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if self.rows.windows(2).any(|w| w[0].t >= w[1].t) {
            return Err(Error::Precondition("report rows are not sorted by t".into()));
        }
        for r in &self.rows {
            let s = [
                r.individual.reliability,
                r.individual.generalization,
                r.sequential.reliability,
                r.sequential.generalization,
                r.probes.locality,
                r.probes.icl_accuracy,
            ];
            if !s.iter().all(|&v| unit(v)) {
                return Err(Error::Precondition(alloc::format!("score out of [0, 1] at t = {}", r.t)));
            }
            let lm = &r.probes.lm;
            if lm.scored > 0 && !(lm.mean_ppl >= 1.0 && lm.mean_adjusted >= lm.mean_ppl) {
                return Err(Error::Precondition(alloc::format!("perplexity below 1 at t = {}", r.t)));
            }
        }
        Ok(())
    }
}

/// Edits the facts of the corpus in order, each step acting on the
/// previous step's output, and evaluates at every scheduled count.
pub fn run_sequential(inputs: RunInputs<'_>, options: &RunOptions, clock: &dyn Clock) -> Result<RunReport> {
    run_sequential_state(inputs, options, clock).map(|(r, _)| r)
}

/// [`run_sequential`] that also returns the final edited state.
pub fn run_sequential_state(
    inputs: RunInputs<'_>,
    options: &RunOptions,
    clock: &dyn Clock,
) -> Result<(RunReport, EditState)> {
    let RunInputs { model, judge, corpus, stats } = inputs;
    let plan = &options.plan;
    plan.validate(model.arch())?;
    if model.edit_history_len != 0 {
        return Err(Error::Precondition("the starting model has already been edited".into()));
    }
    let total = options.schedule.last();
    if total > corpus.edit_facts.len() {
        return Err(Error::Precondition(alloc::format!(
            "schedule needs {total} edits but the corpus has {}",
            corpus.edit_facts.len()
        )));
    }
    let layers: Vec<usize> = plan.layers().collect();
    let start = clock.seconds();
    let mut state = EditState::bare(model.clone());
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut wall = Vec::new();
    let (mut t, mut step) = (0, 0);
    while t < total {
        let n = plan.batch_size.min(total - t);
        let batch = &corpus.edit_facts[t..t + n];
        let before = t;
        t += n;
        step += 1;
        let failed = match apply_single_edit(&state, plan, batch, stats) {
            Ok(s) => {
                state = s;
                false
            }
            Err(e) => match options.policy {
                FailurePolicy::Halt => return Err(Error::EditFailed { t, source: Box::new(e) }),
                FailurePolicy::Continue => {
                    failures.push(EditFailure { step, t, message: alloc::format!("{e}") });
                    true
                }
            },
        };
        if !options.schedule.hits(before, t) {
            continue;
        }
        let individual = if failed { EditScores::default() } else { score_sequential(&state, batch, options.paraphrases)? };
        rows.push(ReportRow {
            t,
            steps: step,
            individual,
            sequential: score_sequential(&state, &corpus.edit_facts[..t], options.paraphrases)?,
            probes: probe_suite(&state, corpus, judge, &options.probes)?,
            similarity: layer_similarity(model, &state.model, &layers, t)?,
            failures: failures.len(),
        });
        wall.push(clock.seconds() - start);
    }
    let report = RunReport {
        config_digest: options.config_digest.clone(),
        judge_digest: judge.digest(),
        seed: options.seed,
        plan: plan.clone(),
        rows,
        failures,
        wall_secs: wall,
    };
    Ok((report, state))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SweepAxis {
    Layer,
    BatchSize,
    Epsilon,
    Method,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Layer => "layer",
            SweepAxis::BatchSize => "batch_size",
            SweepAxis::Epsilon => "epsilon",
            SweepAxis::Method => "method",
        }
    }
}

impl core::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer" => Ok(SweepAxis::Layer),
            "batch_size" | "batch" => Ok(SweepAxis::BatchSize),
            "epsilon" => Ok(SweepAxis::Epsilon),
            "method" => Ok(SweepAxis::Method),
            other => Err(Error::InvalidPlan(alloc::format!("unknown sweep axis {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SweepValue {
    Layer(usize),
    BatchSize(usize),
    Epsilon(f64),
    Method(EditMethod),
}

impl SweepValue {
    pub fn axis(&self) -> SweepAxis {
        match self {
            SweepValue::Layer(_) => SweepAxis::Layer,
            SweepValue::BatchSize(_) => SweepAxis::BatchSize,
            SweepValue::Epsilon(_) => SweepAxis::Epsilon,
            SweepValue::Method(_) => SweepAxis::Method,
        }
    }

    pub fn parse(axis: SweepAxis, s: &str) -> Result<Self> {
        let bad = || Error::InvalidPlan(alloc::format!("invalid {} value {s:?}", axis.name()));
        Ok(match axis {
            SweepAxis::Layer => SweepValue::Layer(s.parse().map_err(|_| bad())?),
            SweepAxis::BatchSize => SweepValue::BatchSize(s.parse().map_err(|_| bad())?),
            SweepAxis::Epsilon => SweepValue::Epsilon(s.parse().map_err(|_| bad())?),
            SweepAxis::Method => SweepValue::Method(s.parse()?),
        })
    }

    /// `base` with this value substituted.
    pub fn apply(&self, base: &EditPlan, arch: &crate::model::ArchSpec) -> EditPlan {
        let mut p = base.clone();
        match *self {
            SweepValue::Layer(l) => {
                p.first_layer = l;
                p.last_layer = l;
            }
            SweepValue::BatchSize(b) => p.batch_size = b,
            SweepValue::Epsilon(e) => p.epsilon = e,
            SweepValue::Method(m) => {
                p = EditPlan { solver: base.solver, epsilon: base.epsilon, ..EditPlan::default_for(m, arch) };
            }
        }
        p
    }
}

impl fmt::Display for SweepValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SweepValue::Layer(l) => write!(f, "{l}"),
            SweepValue::BatchSize(b) => write!(f, "{b}"),
            SweepValue::Epsilon(e) => write!(f, "{e}"),
            SweepValue::Method(m) => write!(f, "{m}"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SweepCell {
    pub value: SweepValue,
    pub result: Result<RunReport>,
}

/// One independent run per value, all from the same model and corpus.
/// A failing cell does not affect the others.
pub fn sweep(
    axis: SweepAxis,
    values: &[SweepValue],
    inputs: RunInputs<'_>,
    base: &RunOptions,
    clock: &dyn Clock,
) -> Result<Vec<SweepCell>> {
    if let Some(v) = values.iter().find(|v| v.axis() != axis) {
        return Err(Error::InvalidPlan(alloc::format!("value {v} does not belong to the {} axis", axis.name())));
    }
    let arch = *inputs.model.arch();
    Ok(values
        .iter()
        .map(|v| {
            let options = RunOptions { plan: v.apply(&base.plan, &arch), ..base.clone() };
            SweepCell { value: *v, result: run_sequential(inputs, &options, clock) }
        })
        .collect())
}
