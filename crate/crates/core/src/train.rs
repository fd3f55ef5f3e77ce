//! Pretraining on the synthetic corpus and the fact-recall probe.

use alloc::vec;
use alloc::vec::Vec;

use crate::corpus::{one_shot_prompt, Corpus, FactRecord};
use crate::math;
use crate::model::{ModelState, Predictor, Token};
use crate::rng::Rng;
use crate::{Error, Result};

/// Adam with fixed hyperparameters and global-norm gradient clipping.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub learn_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 3600, learn_rate: 3e-3, batch_size: 12, beta1: 0.9, beta2: 0.99, clip_norm: 1.0, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Mean batch loss of every step.
    pub losses: Vec<f64>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    /// Mean of the last ten step losses.
    pub fn final_loss(&self) -> Option<f64> {
        let n = self.losses.len().min(10);
        (n > 0).then(|| self.losses[self.losses.len() - n..].iter().sum::<f64>() / n as f64)
    }
}

/// A training sequence and the positions whose tokens are predicted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<Token>,
    pub targets: Vec<usize>,
}

/// Training pools: facts (object position only), 1-shot sequences (both
/// label positions) and filler (every position).
pub fn training_pools(corpus: &Corpus) -> [Vec<Example>; 3] {
    let mut facts = Vec::new();
    for f in corpus.all_facts() {
        let mut p = f.prompt();
        p.push(f.object);
        facts.push(Example { targets: vec![p.len() - 1], tokens: p });
        for i in 0..f.paraphrases.len() {
            let mut p = f.paraphrase_prompt(i).unwrap_or_default();
            p.push(f.object);
            facts.push(Example { targets: vec![p.len() - 1], tokens: p });
        }
    }
    let n = corpus.icl_train.len();
    let icl = (0..n)
        .map(|i| {
            let prompt = one_shot_prompt(&corpus.icl_train[(i + 1) % n], &corpus.icl_train[i]);
            let mut tokens = prompt.tokens;
            tokens.push(prompt.gold);
            let targets = vec![prompt.label_positions[0], tokens.len() - 1];
            Example { tokens, targets }
        })
        .collect();
    let filler = corpus
        .filler_train
        .iter()
        .map(|s| Example { tokens: s.clone(), targets: (1..s.len()).collect() })
        .collect();
    [facts, icl, filler]
}

/// Sampling weights of the three pools.
const POOL_WEIGHTS: [f64; 3] = [0.6, 0.2, 0.2];

/// Trains a copy of `model`. `steps = 0` returns the model unchanged.
pub fn train(model: &ModelState, corpus: &Corpus, cfg: &TrainConfig) -> Result<(ModelState, TrainReport)> {
    let mut m = model.clone();
    m.edit_history_len = 0;
    let mut report = TrainReport { losses: Vec::with_capacity(cfg.steps) };
    if cfg.steps == 0 {
        return Ok((m, report));
    }
    if corpus.vocab_size() > m.arch().vocab_size {
        return Err(Error::ArchMismatch(alloc::format!(
            "corpus vocabulary {} exceeds model vocabulary {}",
            corpus.vocab_size(),
            m.arch().vocab_size
        )));
    }
    let pools = training_pools(corpus);
    let n = m.params().len();
    let mut m1 = vec![0.0f64; n];
    let mut m2 = vec![0.0f64; n];
    let mut rng = Rng::stream(cfg.seed, 0x7a);
    let batch = cfg.batch_size.max(1);
    let mut grad = vec![0.0f64; n];

    for step in 0..cfg.steps {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for _ in 0..batch {
            let u = rng.uniform();
            let pool = if u < POOL_WEIGHTS[0] { 0 } else if u < POOL_WEIGHTS[0] + POOL_WEIGHTS[1] { 1 } else { 2 };
            let pool = if pools[pool].is_empty() { 0 } else { pool };
            let ex = &pools[pool][rng.below(pools[pool].len())];
            loss += m
                .accumulate_param_grad(&ex.tokens, &ex.targets, &mut grad)
                .map_err(|e| if matches!(e, Error::NonFinite(_)) { Error::Diverged { step } } else { e })?;
        }
        let inv = 1.0 / batch as f64;
        loss *= inv;
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        report.losses.push(loss);
        grad.iter_mut().for_each(|g| *g *= inv);
        let gn = math::norm(&grad);
        if !gn.is_finite() {
            return Err(Error::Diverged { step });
        }
        let clip = if gn > cfg.clip_norm { cfg.clip_norm / gn } else { 1.0 };

        let t = (step + 1) as f64;
        let bc1 = 1.0 - libm::pow(cfg.beta1, t);
        let bc2 = 1.0 - libm::pow(cfg.beta2, t);
        for (i, p) in m.params_mut().iter_mut().enumerate() {
            let g = grad[i] * clip;
            m1[i] = cfg.beta1 * m1[i] + (1.0 - cfg.beta1) * g;
            m2[i] = cfg.beta2 * m2[i] + (1.0 - cfg.beta2) * g * g;
            let upd = cfg.learn_rate * (m1[i] / bc1) / (math::sqrt(m2[i] / bc2) + 1e-8);
            *p = (*p as f64 - upd) as f32;
        }
        if !m.is_finite() {
            return Err(Error::Diverged { step });
        }
    }
    Ok((m, report))
}

/// Fraction of facts whose greedy next token after the prompt (or its
/// first paraphrase) equals the fact's current object.
pub fn fact_recall<P: Predictor + ?Sized>(p: &P, facts: &[FactRecord], use_paraphrase: bool) -> Result<f64> {
    recall_of(p, facts, use_paraphrase, |f| f.object)
}

/// As [`fact_recall`] with an arbitrary expected token per fact.
pub fn recall_of<P: Predictor + ?Sized>(
    p: &P,
    facts: &[FactRecord],
    use_paraphrase: bool,
    expected: impl Fn(&FactRecord) -> Token,
) -> Result<f64> {
    if facts.is_empty() {
        return Err(Error::Precondition("fact set is empty".into()));
    }
    let mut hits = 0usize;
    for f in facts {
        if f.subject.is_empty() || f.relation.is_empty() {
            return Err(Error::Precondition(alloc::format!("fact {} has an empty prompt", f.id)));
        }
        let prompt = if use_paraphrase {
            f.paraphrase_prompt(0).ok_or_else(|| Error::Precondition(alloc::format!("fact {} has no paraphrase", f.id)))?
        } else {
            f.prompt()
        };
        if p.greedy_next(&prompt)? == expected(f) {
            hits += 1;
        }
    }
    Ok(hits as f64 / facts.len() as f64)
}
