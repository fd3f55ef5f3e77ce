mod common;

use std::collections::HashMap;

use common::fact;
use memedit_core::corpus::{build_corpus, Corpus, CorpusSpec, FactRecord};
use memedit_core::editors::{estimate_covariance, CovarianceStats, EditMethod, EditPlan};
use memedit_core::harness::{
    probe_suite, run_sequential, score_individual, score_sequential, sweep, EditScores, EvalSchedule, FailurePolicy,
    NoClock, ProbeSettings, RunInputs, RunOptions, SweepAxis, SweepValue,
};
use memedit_core::model::{ArchSpec, ModelState, Predictor, Token};
use memedit_core::{Error, Result};

/// Answers from a lookup table keyed by prompt, `fallback` otherwise.
struct Scripted {
    answers: HashMap<Vec<Token>, Token>,
    fallback: Token,
}

impl Scripted {
    fn new(fallback: Token) -> Self {
        Self { answers: HashMap::new(), fallback }
    }

    fn answer(mut self, prompt: Vec<Token>, t: Token) -> Self {
        self.answers.insert(prompt, t);
        self
    }
}

impl Predictor for Scripted {
    fn vocab_size(&self) -> usize {
        16
    }

    fn next_logits(&self, prompt: &[Token]) -> Result<Vec<f64>> {
        let mut l = vec![0.0; 16];
        l[*self.answers.get(prompt).unwrap_or(&self.fallback) as usize] = 1.0;
        Ok(l)
    }
}

fn scores(r: f64, g: f64) -> EditScores {
    EditScores { reliability: r, generalization: g }
}

fn three_facts() -> Vec<FactRecord> {
    vec![fact(0, &[4], &[5, 6], 7, 8), fact(1, &[9], &[5, 6], 7, 10), fact(2, &[11], &[5, 6], 7, 12)]
}

#[test]
fn schedule_validation() {
    assert!(EvalSchedule::new(vec![]).is_err());
    assert!(EvalSchedule::new(vec![0, 1]).is_err());
    assert!(EvalSchedule::new(vec![2, 2]).is_err());
    let s = EvalSchedule::new(vec![1, 10]).unwrap();
    assert_eq!(s.last(), 10);
    assert!(s.hits(0, 1) && !s.hits(1, 9) && s.hits(9, 10));
    assert_eq!(EvalSchedule::default().counts(), &[1, 10, 20, 50, 100]);
}

#[test]
fn individual_score_cases() {
    let f = &three_facts()[0];
    let para = f.paraphrase_prompt(0).unwrap();
    let both = Scripted::new(0).answer(f.prompt(), 8).answer(para.clone(), 8);
    assert_eq!(score_individual(&both, f, 1).unwrap(), scores(1.0, 1.0));
    assert_eq!(score_individual(&Scripted::new(7), f, 1).unwrap(), scores(0.0, 0.0));
    let prompt_only = Scripted::new(7).answer(f.prompt(), 8);
    assert_eq!(score_individual(&prompt_only, f, 1).unwrap(), scores(1.0, 0.0));
    assert!(score_individual(&both, f, 0).is_err());
}

#[test]
fn sequential_score_cases() {
    let facts = three_facts();
    // Recalls edits 1 and 3; generalizes only edit 1.
    let p = Scripted::new(7)
        .answer(facts[0].prompt(), 8)
        .answer(facts[0].paraphrase_prompt(0).unwrap(), 8)
        .answer(facts[2].prompt(), 12);
    let s = score_sequential(&p, &facts, 1).unwrap();
    assert_eq!(s, scores(2.0 / 3.0, 1.0 / 3.0));
    assert_eq!(score_sequential(&p, &facts[..1], 1).unwrap(), score_individual(&p, &facts[0], 1).unwrap());
    assert_eq!(score_sequential(&Scripted::new(7), &facts, 1).unwrap(), scores(0.0, 0.0));
    assert!(score_sequential(&p, &[], 1).is_err());
}

#[test]
fn sequential_score_grows_when_a_fact_is_recalled() {
    let facts = three_facts();
    let mut p = Scripted::new(7).answer(facts[0].prompt(), 8);
    let before = score_sequential(&p, &facts, 1).unwrap().reliability;
    p = p.answer(facts[1].prompt(), 10);
    assert!(score_sequential(&p, &facts, 1).unwrap().reliability > before);
}

fn tiny_setup() -> (Corpus, ModelState, Vec<CovarianceStats>) {
    let spec = CorpusSpec { n_base: 6, n_edit: 8, n_filler: 2, n_icl: 4, ..CorpusSpec::default() };
    let corpus = build_corpus(3, spec).unwrap();
    let arch = ArchSpec { vocab_size: corpus.vocab_size(), d_model: 16, n_layers: 2, n_heads: 2, d_ff: 24, max_seq: 64 };
    let model = ModelState::init(arch, 3).unwrap();
    let stats = (0..2).map(|l| estimate_covariance(&model, l, &corpus.filler_train, None).unwrap()).collect();
    (corpus, model, stats)
}

#[test]
fn constant_label_scores_half_on_the_balanced_probe() {
    let (corpus, model, _) = tiny_setup();
    struct Constant(Token, usize);
    impl Predictor for Constant {
        fn vocab_size(&self) -> usize {
            self.1
        }
        fn next_logits(&self, _: &[Token]) -> Result<Vec<f64>> {
            let mut l = vec![0.0; self.1];
            l[self.0 as usize] = 1.0;
            Ok(l)
        }
    }
    let p = Constant(corpus.label_words[0], corpus.vocab_size());
    let m = probe_suite(&p, &corpus, &model, &ProbeSettings::default()).unwrap();
    assert_eq!(m.icl_accuracy, 0.5);
    assert_eq!(m.lm.judge_digest, model.digest());
}

#[test]
fn single_count_schedule_gives_one_row() {
    let (corpus, model, stats) = tiny_setup();
    let inputs = RunInputs { model: &model, judge: &model, corpus: &corpus, stats: &stats };
    for plan in [EditPlan::rank_one(1), EditPlan::batched(0, 1, 1), EditPlan::codebook(1, 1.0)] {
        let mut o = RunOptions::new(plan);
        o.schedule = EvalSchedule::new(vec![1]).unwrap();
        let r = run_sequential(inputs, &o, &NoClock).unwrap();
        assert_eq!(r.rows.len(), 1);
        assert_eq!(r.rows[0].t, 1);
        assert_eq!(r.rows[0].individual, r.rows[0].sequential);
        assert_eq!(r.judge_digest, model.digest());
        r.validate().unwrap();
    }
}

#[test]
fn runs_are_reproducible_and_codebook_probes_stay_put() {
    let (corpus, model, stats) = tiny_setup();
    let inputs = RunInputs { model: &model, judge: &model, corpus: &corpus, stats: &stats };
    let mut o = RunOptions::new(EditPlan::codebook(1, 1e-6));
    o.schedule = EvalSchedule::new(vec![1, 4, 8]).unwrap();
    let a = run_sequential(inputs, &o, &NoClock).unwrap();
    let b = run_sequential(inputs, &o, &NoClock).unwrap();
    assert_eq!(a, b);
    let base = probe_suite(&model, &corpus, &model, &o.probes).unwrap();
    for row in &a.rows {
        assert_eq!(row.probes, base);
    }
    assert_eq!(a.rows.iter().map(|r| r.t).collect::<Vec<_>>(), vec![1, 4, 8]);
}

#[test]
fn one_batch_makes_individual_equal_sequential() {
    let (corpus, model, stats) = tiny_setup();
    let inputs = RunInputs { model: &model, judge: &model, corpus: &corpus, stats: &stats };
    let mut o = RunOptions::new(EditPlan::batched(0, 1, 4));
    o.schedule = EvalSchedule::new(vec![4]).unwrap();
    let r = run_sequential(inputs, &o, &NoClock).unwrap();
    assert_eq!(r.rows[0].steps, 1);
    assert_eq!(r.rows[0].individual, r.rows[0].sequential);
}

#[test]
fn failures_are_recorded_or_halt_the_run() {
    let (corpus, model, stats) = tiny_setup();
    let inputs = RunInputs { model: &model, judge: &model, corpus: &corpus, stats: &stats };
    let mut plan = EditPlan::rank_one(1);
    plan.solver.max_iters = 0;
    plan.solver.margin = 1e9;
    let mut o = RunOptions::new(plan);
    o.schedule = EvalSchedule::new(vec![2]).unwrap();
    let r = run_sequential(inputs, &o, &NoClock).unwrap();
    assert_eq!(r.failures.len(), 2);
    assert_eq!(r.rows[0].failures, 2);
    assert_eq!(r.rows[0].individual, scores(0.0, 0.0));
    o.policy = FailurePolicy::Halt;
    assert!(matches!(run_sequential(inputs, &o, &NoClock), Err(Error::EditFailed { t: 1, .. })));
}

#[test]
fn too_few_facts_for_the_schedule_is_an_error() {
    let (corpus, model, stats) = tiny_setup();
    let inputs = RunInputs { model: &model, judge: &model, corpus: &corpus, stats: &stats };
    let mut o = RunOptions::new(EditPlan::rank_one(1));
    o.schedule = EvalSchedule::new(vec![100]).unwrap();
    assert!(run_sequential(inputs, &o, &NoClock).is_err());
}

#[test]
fn batch_size_sweep_divides_the_edit_stream() {
    let (corpus, model, stats) = tiny_setup();
    let inputs = RunInputs { model: &model, judge: &model, corpus: &corpus, stats: &stats };
    let mut o = RunOptions::new(EditPlan::batched(0, 1, 1));
    o.schedule = EvalSchedule::new(vec![8]).unwrap();
    let values: Vec<_> = [1, 4, 8].map(SweepValue::BatchSize).to_vec();
    let cells = sweep(SweepAxis::BatchSize, &values, inputs, &o, &NoClock).unwrap();
    let steps: Vec<usize> = cells.iter().map(|c| c.result.as_ref().unwrap().rows[0].steps).collect();
    assert_eq!(steps, vec![8, 2, 1]);
    assert!(sweep(SweepAxis::Layer, &values, inputs, &o, &NoClock).is_err());
}

#[test]
fn layer_sweep_has_one_cell_per_layer_and_isolates_failures() {
    let (corpus, model, stats) = tiny_setup();
    let inputs = RunInputs { model: &model, judge: &model, corpus: &corpus, stats: &stats };
    let mut o = RunOptions::new(EditPlan::rank_one(0));
    o.schedule = EvalSchedule::new(vec![1]).unwrap();
    let values: Vec<_> = [0, 1, 5].map(SweepValue::Layer).to_vec();
    let cells = sweep(SweepAxis::Layer, &values, inputs, &o, &NoClock).unwrap();
    assert_eq!(cells.len(), 3);
    assert!(cells[0].result.is_ok() && cells[1].result.is_ok() && cells[2].result.is_err());
    assert_eq!(cells[1].result.as_ref().unwrap().plan.first_layer, 1);
}

#[test]
fn sweep_values_parse_per_axis() {
    assert_eq!(SweepValue::parse(SweepAxis::Epsilon, "20").unwrap(), SweepValue::Epsilon(20.0));
    assert_eq!(SweepValue::parse(SweepAxis::Method, "grace").unwrap(), SweepValue::Method(EditMethod::Codebook));
    assert!(SweepValue::parse(SweepAxis::Layer, "x").is_err());
    assert_eq!("batch_size".parse::<SweepAxis>().unwrap(), SweepAxis::BatchSize);
}
