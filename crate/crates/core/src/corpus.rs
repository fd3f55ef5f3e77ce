//! Deterministic synthetic world: facts with paraphrases, filler text from
//! a sparse Markov chain, and a two-label in-context classification task.
//!
//! Surface forms:
//!
//! ```text
//! fact        <bos> s r o
//! paraphrase  <bos> s p r o        (p is a relation-specific prefix)
//! filler      <bos> w w w ...
//! 1-shot ICL  <bos> x x x <is> L <sep> x x x <is> L'
//! ```

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::model::Token;
use crate::rng::Rng;
use crate::{Error, Result};

pub const BOS: Token = 0;
pub const EOS: Token = 1;
pub const SEP: Token = 2;
pub const CUE: Token = 3;

const N_RELATIONS: usize = 4;
const PARAPHRASES_PER_RELATION: usize = 2;
const N_OBJECTS: usize = 16;
const N_FILLER_WORDS: usize = 24;
const N_SENTIMENT_WORDS: usize = 6;
const ICL_TEXT_LEN: usize = 3;
/// Length of filler sentences, excluding `<bos>`.
pub const FILLER_LEN: usize = 40;
/// Training filler sentences per held-out one.
const FILLER_TRAIN_FACTOR: usize = 8;
/// Training 1-shot sequences per probe prompt.
const ICL_TRAIN_FACTOR: usize = 8;

/// Token id to string table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
}

impl Vocab {
    pub fn new(words: Vec<String>) -> Self {
        Self { words }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, t: Token) -> &str {
        self.words.get(t as usize).map_or("<unk>", String::as_str)
    }

    pub fn id(&self, w: &str) -> Option<Token> {
        self.words.iter().position(|x| x == w).map(|i| i as Token)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn render(&self, tokens: &[Token]) -> String {
        let mut s = String::new();
        for (i, &t) in tokens.iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            s.push_str(self.word(t));
        }
        s
    }
}

/// A fact `(s, r, o)` together with its edit target `o′`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FactRecord {
    pub id: u32,
    pub subject: Vec<Token>,
    pub relation: Vec<Token>,
    pub object: Token,
    pub new_object: Token,
    /// Alternative `(s, r)` phrasings, subject included.
    pub paraphrases: Vec<Vec<Token>>,
}

impl FactRecord {
    /// `<bos> s r`.
    pub fn prompt(&self) -> Vec<Token> {
        let mut p = Vec::with_capacity(1 + self.subject.len() + self.relation.len());
        p.push(BOS);
        p.extend_from_slice(&self.subject);
        p.extend_from_slice(&self.relation);
        p
    }

    /// `<bos>` followed by paraphrase `i`.
    pub fn paraphrase_prompt(&self, i: usize) -> Option<Vec<Token>> {
        self.paraphrases.get(i).map(|p| {
            let mut v = Vec::with_capacity(p.len() + 1);
            v.push(BOS);
            v.extend_from_slice(p);
            v
        })
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.subject.is_empty() || self.relation.is_empty() {
            return Err(Error::Precondition(format!("fact {} has an empty subject or relation", self.id)));
        }
        if self.object == self.new_object {
            return Err(Error::Precondition(format!("fact {} has o == o'", self.id)));
        }
        if self.paraphrases.is_empty() || self.paraphrases.iter().any(Vec::is_empty) {
            return Err(Error::Precondition(format!("fact {} needs a non-empty paraphrase", self.id)));
        }
        let all = self
            .subject
            .iter()
            .chain(&self.relation)
            .chain(self.paraphrases.iter().flatten())
            .chain([&self.object, &self.new_object]);
        for &t in all {
            if t as usize >= vocab_size {
                return Err(Error::TokenOutOfRange { token: t, vocab_size });
            }
        }
        Ok(())
    }
}

/// One labelled text of the in-context task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IclExample {
    pub text: Vec<Token>,
    pub label: Token,
}

/// A 1-shot prompt with the positions used by the saliency analysis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IclPrompt {
    /// Ends at the query's cue token; the gold label follows.
    pub tokens: Vec<Token>,
    pub label_positions: Vec<usize>,
    pub target_position: usize,
    pub gold: Token,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorpusSpec {
    pub n_base: usize,
    pub n_edit: usize,
    pub n_filler: usize,
    pub n_icl: usize,
    pub vocab_capacity: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self { n_base: 60, n_edit: 100, n_filler: 16, n_icl: 32, vocab_capacity: 256 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub seed: u64,
    pub vocab: Vocab,
    /// Pretrained and never edited; the locality set.
    pub base_facts: Vec<FactRecord>,
    /// Source of the edit stream. Pretrained with their old objects.
    pub edit_facts: Vec<FactRecord>,
    /// Held-out filler sentences for the language-modelling probe.
    pub filler: Vec<Vec<Token>>,
    /// Filler sentences used for training and covariance statistics.
    pub filler_train: Vec<Vec<Token>>,
    /// Probe examples; labels alternate starting with the first label word.
    pub icl: Vec<IclExample>,
    pub icl_train: Vec<IclExample>,
    pub label_words: [Token; 2],
}

struct Alloc {
    words: Vec<String>,
}

impl Alloc {
    fn take(&mut self, prefix: &str, n: usize) -> Vec<Token> {
        (0..n)
            .map(|i| {
                self.words.push(format!("{prefix}{i}"));
                (self.words.len() - 1) as Token
            })
            .collect()
    }
}

/// Builds the synthetic corpus; a pure function of its arguments.
pub fn build_corpus(seed: u64, spec: CorpusSpec) -> Result<Corpus> {
    for (name, v) in [("n_base", spec.n_base), ("n_edit", spec.n_edit), ("n_filler", spec.n_filler), ("n_icl", spec.n_icl)] {
        if v == 0 {
            return Err(Error::InvalidCount(format!("{name} must be at least 1")));
        }
    }
    let needed = 4
        + N_RELATIONS * (1 + PARAPHRASES_PER_RELATION)
        + N_OBJECTS
        + N_FILLER_WORDS
        + 2 * N_SENTIMENT_WORDS
        + 2
        + spec.n_base.div_ceil(N_RELATIONS)
        + spec.n_edit.div_ceil(N_RELATIONS);
    if needed > spec.vocab_capacity {
        return Err(Error::VocabularyExhausted { needed, capacity: spec.vocab_capacity });
    }

    let mut a = Alloc { words: ["<bos>", "<eos>", "<sep>", "<is>"].iter().map(|s| String::from(*s)).collect() };
    let relations = a.take("rel", N_RELATIONS);
    let prefixes: Vec<Vec<Token>> = (0..N_RELATIONS)
        .map(|r| a.take(&format!("rel{r}_alt"), PARAPHRASES_PER_RELATION))
        .collect();
    let objects = a.take("obj", N_OBJECTS);
    let filler_words = a.take("w", N_FILLER_WORDS);
    let positive = a.take("good", N_SENTIMENT_WORDS);
    let negative = a.take("bad", N_SENTIMENT_WORDS);
    a.words.push("positive".into());
    a.words.push("negative".into());
    let label_words = [(a.words.len() - 2) as Token, (a.words.len() - 1) as Token];
    let n_base_subjects = spec.n_base.div_ceil(N_RELATIONS);
    let subjects = a.take("subj", n_base_subjects + spec.n_edit.div_ceil(N_RELATIONS));

    // Every subject carries every relation, each with its own object.
    let mut rng = Rng::stream(seed, 0xc0);
    let mut make = |s: Token, r: usize, id: usize| {
        let object = objects[rng.below(N_OBJECTS)];
        let mut new_object = objects[rng.below(N_OBJECTS - 1)];
        if new_object >= object {
            new_object += 1;
        }
        FactRecord {
            id: id as u32,
            subject: alloc::vec![s],
            relation: alloc::vec![relations[r]],
            object,
            new_object,
            paraphrases: prefixes[r].iter().map(|&p| alloc::vec![s, p, relations[r]]).collect(),
        }
    };
    let mut base_facts = Vec::with_capacity(spec.n_base);
    let mut edit_facts = Vec::with_capacity(spec.n_edit);
    for (i, &s) in subjects.iter().enumerate() {
        for r in 0..N_RELATIONS {
            let (set, n) = if i < n_base_subjects { (&mut base_facts, spec.n_base) } else { (&mut edit_facts, spec.n_edit) };
            if set.len() < n {
                let id = i * N_RELATIONS + r;
                set.push(make(s, r, id));
            }
        }
    }
    // Interleave subjects in the edit stream.
    rng.shuffle(&mut edit_facts);

    // Each filler word has two successors, taken with probability 3/4 and 1/4.
    let successors: Vec<[usize; 2]> = (0..N_FILLER_WORDS)
        .map(|_| {
            let a = rng.below(N_FILLER_WORDS);
            let mut b = rng.below(N_FILLER_WORDS - 1);
            if b >= a {
                b += 1;
            }
            [a, b]
        })
        .collect();
    let sentence = |rng: &mut Rng| {
        let mut w = rng.below(N_FILLER_WORDS);
        let mut s = Vec::with_capacity(FILLER_LEN + 1);
        s.push(BOS);
        for _ in 0..FILLER_LEN {
            s.push(filler_words[w]);
            w = successors[w][usize::from(rng.uniform() >= 0.75)];
        }
        s
    };
    let filler: Vec<_> = (0..spec.n_filler).map(|_| sentence(&mut rng)).collect();
    let filler_train: Vec<_> = (0..spec.n_filler * FILLER_TRAIN_FACTOR).map(|_| sentence(&mut rng)).collect();

    let example = |rng: &mut Rng, positive_label: bool| {
        // Majority polarity decides the label: two or three of three words.
        let n_major = 2 + rng.below(2);
        let (major, minor) = if positive_label { (&positive, &negative) } else { (&negative, &positive) };
        let mut text: Vec<Token> = (0..ICL_TEXT_LEN)
            .map(|i| if i < n_major { major[rng.below(N_SENTIMENT_WORDS)] } else { minor[rng.below(N_SENTIMENT_WORDS)] })
            .collect();
        rng.shuffle(&mut text);
        IclExample { text, label: label_words[usize::from(!positive_label)] }
    };
    let icl: Vec<_> = (0..spec.n_icl).map(|i| example(&mut rng, i % 2 == 0)).collect();
    let icl_train: Vec<_> = (0..spec.n_icl * ICL_TRAIN_FACTOR * 2).map(|_| {
        let p = rng.uniform() < 0.5;
        example(&mut rng, p)
    }).collect();

    Ok(Corpus {
        seed,
        vocab: Vocab::new(a.words),
        base_facts,
        edit_facts,
        filler,
        filler_train,
        icl,
        icl_train,
        label_words,
    })
}

/// `<bos> demo <is> label <sep> query <is>`; the gold label is not included.
pub fn one_shot_prompt(demo: &IclExample, query: &IclExample) -> IclPrompt {
    let mut tokens = Vec::with_capacity(2 * ICL_TEXT_LEN + 5);
    tokens.push(BOS);
    tokens.extend_from_slice(&demo.text);
    tokens.push(CUE);
    let label_pos = tokens.len();
    tokens.push(demo.label);
    tokens.push(SEP);
    tokens.extend_from_slice(&query.text);
    tokens.push(CUE);
    IclPrompt { target_position: tokens.len() - 1, tokens, label_positions: alloc::vec![label_pos], gold: query.label }
}

impl Corpus {
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// Probe prompts: query `i` with the next example as its demonstration.
    /// Labels of queries alternate, so the probe is balanced for even counts.
    pub fn icl_prompts(&self) -> Vec<IclPrompt> {
        let n = self.icl.len();
        (0..n).map(|i| one_shot_prompt(&self.icl[(i + 1) % n], &self.icl[i])).collect()
    }

    /// Prompts for the language-modelling probe: `<bos>` plus the first
    /// `prefix` words of every held-out filler sentence.
    pub fn filler_prompts(&self, prefix: usize) -> Vec<Vec<Token>> {
        self.filler.iter().map(|s| s[..(prefix + 1).min(s.len())].to_vec()).collect()
    }

    pub fn all_facts(&self) -> impl Iterator<Item = &FactRecord> {
        self.base_facts.iter().chain(&self.edit_facts)
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.vocab_size();
        for f in self.all_facts() {
            f.validate(v)?;
        }
        for b in &self.base_facts {
            if self.edit_facts.iter().any(|e| e.subject == b.subject) {
                return Err(Error::Precondition(format!("subject of fact {} shared between base and edit sets", b.id)));
            }
        }
        if self.label_words[0] == self.label_words[1] {
            return Err(Error::Precondition("label words must differ".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_corpus() {
        let a = build_corpus(3, CorpusSpec::default()).unwrap();
        let b = build_corpus(3, CorpusSpec::default()).unwrap();
        assert_eq!(a, b);
        let c = build_corpus(4, CorpusSpec::default()).unwrap();
        assert_ne!(a.base_facts, c.base_facts);
    }

    #[test]
    fn counts_and_invariants() {
        let c = build_corpus(1, CorpusSpec { n_edit: 100, ..CorpusSpec::default() }).unwrap();
        assert_eq!(c.edit_facts.len(), 100);
        assert!(c.edit_facts.iter().all(|f| !f.paraphrases.is_empty() && f.object != f.new_object));
        c.validate().unwrap();
        assert!(c.vocab_size() <= 256);
        for b in &c.base_facts {
            assert!(c.edit_facts.iter().all(|e| e.subject != b.subject));
        }
    }

    #[test]
    fn vocabulary_exhaustion_is_reported() {
        let spec = CorpusSpec { n_base: 2000, ..CorpusSpec::default() };
        assert!(matches!(build_corpus(1, spec), Err(Error::VocabularyExhausted { .. })));
        let spec = CorpusSpec { n_icl: 0, ..CorpusSpec::default() };
        assert!(matches!(build_corpus(1, spec), Err(Error::InvalidCount(_))));
    }

    #[test]
    fn icl_prompt_positions() {
        let c = build_corpus(2, CorpusSpec::default()).unwrap();
        for p in c.icl_prompts() {
            assert!(c.label_words.contains(&p.tokens[p.label_positions[0]]));
            assert_eq!(p.tokens[p.target_position], CUE);
            assert_eq!(p.target_position, p.tokens.len() - 1);
        }
        let golds: Vec<_> = c.icl_prompts().iter().map(|p| p.gold).collect();
        assert_eq!(golds.iter().filter(|&&g| g == c.label_words[0]).count(), golds.len() / 2);
    }
}
