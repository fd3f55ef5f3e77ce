#![allow(dead_code)]

use memedit_core::corpus::FactRecord;
use memedit_core::model::{ArchSpec, ModelState, Param};
use memedit_core::rng::Rng;

pub fn small_arch() -> ArchSpec {
    ArchSpec { vocab_size: 16, d_model: 8, n_layers: 3, n_heads: 2, d_ff: 12, max_seq: 12 }
}

/// Random model with weights large enough that every path matters.
pub fn random_model(arch: ArchSpec, seed: u64) -> ModelState {
    let mut m = ModelState::init(arch, seed).unwrap();
    let mut rng = Rng::new(seed ^ 0xabc);
    for p in Param::all(&arch).collect::<Vec<_>>() {
        for v in m.tensor_mut(p) {
            *v = match p {
                Param::AttnNorm(_) | Param::MlpNorm(_) | Param::FinalNorm => 1.0 + 0.3 * rng.normal() as f32,
                _ => 0.5 * rng.normal() as f32,
            };
        }
    }
    m
}

pub fn random_tokens(rng: &mut Rng, len: usize, vocab: usize) -> Vec<u32> {
    (0..len).map(|_| rng.below(vocab) as u32).collect()
}

pub fn fact(id: u32, subject: &[u32], relation: &[u32], object: u32, new_object: u32) -> FactRecord {
    let mut para = relation.to_vec();
    para.reverse();
    let mut p = subject.to_vec();
    p.extend(para);
    FactRecord {
        id,
        subject: subject.to_vec(),
        relation: relation.to_vec(),
        object,
        new_object,
        paraphrases: vec![p],
    }
}

pub fn prompts(seed: u64, n: usize, len: usize, vocab: usize) -> Vec<Vec<u32>> {
    let mut rng = Rng::new(seed);
    (0..n).map(|_| random_tokens(&mut rng, len, vocab)).collect()
}
