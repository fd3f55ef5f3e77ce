//! Corpus files: one tab-separated record per line, `kind<TAB>id<TAB>fields`.
//!
//! ```text
//! seed          0        <seed>
//! vocab         <token>  <word>
//! labels        0        <word>  <word>
//! base | edit   <id>     <subject>  <relation>  <object>  <new object>  <paraphrase>|<paraphrase>...
//! filler | filler_train  <i>  <words>
//! icl | icl_train        <i>  <label>  <words>
//! ```
//!
//! Multi-word fields are space-separated words. Words may not contain tabs,
//! pipes or spaces. Records of one kind appear in id order.

use std::fmt::Write as _;
use std::path::Path;

use memedit_core::corpus::{Corpus, FactRecord, IclExample, Vocab};
use memedit_core::model::Token;

use crate::error::{FormatError, Result};

pub const CORPUS_HEADER: &str = "# memedit-corpus v1";

fn words(v: &Vocab, t: &[Token]) -> String {
    t.iter().map(|&t| v.word(t)).collect::<Vec<_>>().join(" ")
}

pub fn corpus_to_string(c: &Corpus) -> String {
    let v = &c.vocab;
    let mut s = String::new();
    let _ = writeln!(s, "{CORPUS_HEADER}");
    let _ = writeln!(s, "seed\t0\t{}", c.seed);
    for (i, w) in v.words().iter().enumerate() {
        let _ = writeln!(s, "vocab\t{i}\t{w}");
    }
    let _ = writeln!(s, "labels\t0\t{}\t{}", v.word(c.label_words[0]), v.word(c.label_words[1]));
    for (kind, facts) in [("base", &c.base_facts), ("edit", &c.edit_facts)] {
        for f in facts {
            let para: Vec<String> = f.paraphrases.iter().map(|p| words(v, p)).collect();
            let _ = writeln!(
                s,
                "{kind}\t{}\t{}\t{}\t{}\t{}\t{}",
                f.id,
                words(v, &f.subject),
                words(v, &f.relation),
                v.word(f.object),
                v.word(f.new_object),
                para.join("|")
            );
        }
    }
    for (kind, set) in [("filler", &c.filler), ("filler_train", &c.filler_train)] {
        for (i, t) in set.iter().enumerate() {
            let _ = writeln!(s, "{kind}\t{i}\t{}", words(v, t));
        }
    }
    for (kind, set) in [("icl", &c.icl), ("icl_train", &c.icl_train)] {
        for (i, e) in set.iter().enumerate() {
            let _ = writeln!(s, "{kind}\t{i}\t{}\t{}", v.word(e.label), words(v, &e.text));
        }
    }
    s
}

pub fn write_corpus(path: &Path, c: &Corpus) -> Result<()> {
    for w in c.vocab.words() {
        if w.is_empty() || w.contains(['\t', '|', ' ', '\n']) {
            return Err(FormatError::malformed(path, 0, format!("word {w:?} cannot be written")));
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(FormatError::io(dir))?;
    }
    std::fs::write(path, corpus_to_string(c)).map_err(FormatError::io(path))
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let text = std::fs::read_to_string(path).map_err(FormatError::io(path))?;
    parse_corpus(&text, path)
}

/// Parses the text of a corpus file; `path` is for messages only.
pub fn parse_corpus(text: &str, path: &Path) -> Result<Corpus> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, CORPUS_HEADER)) => {}
        _ => return Err(FormatError::malformed(path, 1, "not a memedit corpus file")),
    }
    let mut seed = None;
    let mut vocab: Vec<String> = Vec::new();
    let mut labels = None;
    let mut base = Vec::new();
    let mut edit = Vec::new();
    let mut filler = Vec::new();
    let mut filler_train = Vec::new();
    let mut icl = Vec::new();
    let mut icl_train = Vec::new();

    for (n, line) in lines {
        let n = n + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: String| FormatError::malformed(path, n, msg);
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() < 3 {
            return Err(bad("expected kind, id and at least one field".into()));
        }
        let id: u64 = f[1].parse().map_err(|_| bad(format!("invalid id {:?}", f[1])))?;
        let tok = |w: &str| -> Result<Token> {
            vocab
                .iter()
                .position(|v| v == w)
                .map(|i| i as Token)
                .ok_or_else(|| FormatError::malformed(path, n, format!("unknown word {w:?}")))
        };
        let toks = |s: &str| -> Result<Vec<Token>> { s.split(' ').filter(|w| !w.is_empty()).map(tok).collect() };
        let arity = |k: usize| if f.len() == k { Ok(()) } else { Err(bad(format!("{} record needs {k} fields", f[0]))) };
        match f[0] {
            "seed" => {
                arity(3)?;
                seed = Some(f[2].parse::<u64>().map_err(|_| bad("invalid seed".into()))?);
            }
            "vocab" => {
                arity(3)?;
                if id as usize != vocab.len() {
                    return Err(bad(format!("vocab id {id} out of order")));
                }
                vocab.push(f[2].to_string());
            }
            "labels" => {
                arity(4)?;
                labels = Some([tok(f[2])?, tok(f[3])?]);
            }
            "base" | "edit" => {
                arity(7)?;
                let fact = FactRecord {
                    id: u32::try_from(id).map_err(|_| bad("fact id too large".into()))?,
                    subject: toks(f[2])?,
                    relation: toks(f[3])?,
                    object: tok(f[4])?,
                    new_object: tok(f[5])?,
                    paraphrases: f[6].split('|').map(toks).collect::<Result<_>>()?,
                };
                if f[0] == "base" { base.push(fact) } else { edit.push(fact) }
            }
            "filler" | "filler_train" => {
                arity(3)?;
                let set = if f[0] == "filler" { &mut filler } else { &mut filler_train };
                set.push(toks(f[2])?);
            }
            "icl" | "icl_train" => {
                arity(4)?;
                let e = IclExample { label: tok(f[2])?, text: toks(f[3])? };
                if f[0] == "icl" { icl.push(e) } else { icl_train.push(e) }
            }
            other => return Err(bad(format!("unknown record kind {other:?}"))),
        }
    }
    let missing = |what: &str| FormatError::malformed(path, 0, format!("no {what} record"));
    let corpus = Corpus {
        seed: seed.ok_or_else(|| missing("seed"))?,
        vocab: Vocab::new(vocab),
        base_facts: base,
        edit_facts: edit,
        filler,
        filler_train,
        icl,
        icl_train,
        label_words: labels.ok_or_else(|| missing("labels"))?,
    };
    corpus.validate().map_err(FormatError::invalid(path))?;
    Ok(corpus)
}
