use memedit_core::model::{ArchSpec, AttentionDelta, GradRequest, Hooks, ModelState, Param};
use memedit_core::rng::Rng;
use memedit_core::Error;

fn small_arch() -> ArchSpec {
    ArchSpec { vocab_size: 16, d_model: 8, n_layers: 2, n_heads: 2, d_ff: 12, max_seq: 10 }
}

/// Random model with weights large enough that every path matters.
fn random_model(arch: ArchSpec, seed: u64) -> ModelState {
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

fn random_tokens(rng: &mut Rng, len: usize, vocab: usize) -> Vec<u32> {
    (0..len).map(|_| rng.below(vocab) as u32).collect()
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-7 {
        (a - b).abs() / 1e-7
    } else {
        (a - b).abs() / scale
    }
}

#[test]
fn zero_model_single_token_gives_uniform_logits() {
    let m = ModelState::zeros(small_arch()).unwrap();
    let logits = m.forward(&[3]).unwrap();
    assert!(logits.iter().all(|&v| v == logits[0]));
}

#[test]
fn forward_is_deterministic() {
    let m = random_model(small_arch(), 1);
    let a = m.forward(&[1, 2, 3, 4]).unwrap();
    let b = m.forward(&[1, 2, 3, 4]).unwrap();
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn attention_rows_are_causal_distributions() {
    let m = random_model(small_arch(), 2);
    let (_, trace) = m.forward_traced(&[1, 5, 7, 2, 9], &Hooks::none()).unwrap();
    for layer in &trace.layers {
        for h in 0..2 {
            for i in 0..5 {
                let row = layer.attention_row(h, i);
                let s: f64 = row[..=i].iter().sum();
                assert!((s - 1.0).abs() <= 1e-5);
                assert!(row[..=i].iter().all(|&v| v >= 0.0));
                assert!(row[i + 1..].iter().all(|&v| v == 0.0));
            }
        }
    }
}

#[test]
fn changing_a_token_never_changes_earlier_logits() {
    let m = random_model(small_arch(), 3);
    let v = 16;
    let a = m.forward(&[1, 2, 3, 4, 5]).unwrap();
    let b = m.forward(&[1, 2, 3, 11, 5]).unwrap();
    assert_eq!(&a[..3 * v], &b[..3 * v]);
    assert_ne!(&a[3 * v..4 * v], &b[3 * v..4 * v]);
}

#[test]
fn forward_rejects_bad_inputs() {
    let m = random_model(small_arch(), 4);
    assert!(matches!(m.forward(&[]), Err(Error::EmptySequence)));
    assert!(matches!(m.forward(&[0; 11]), Err(Error::SequenceTooLong { .. })));
    assert!(matches!(m.forward(&[16]), Err(Error::TokenOutOfRange { token: 16, .. })));
}

#[test]
fn sequence_loss_cases() {
    let m = ModelState::zeros(small_arch()).unwrap();
    let l = m.sequence_loss(&[1, 2, 3], &[1, 2]).unwrap();
    assert!((l - 16f64.ln()).abs() < 1e-12);
    assert!(matches!(m.sequence_loss(&[1, 2], &[0]), Err(Error::PositionZeroTarget(0))));
    assert!(matches!(m.sequence_loss(&[1, 2], &[]), Err(Error::EmptyTargets)));
}

#[test]
fn sequence_loss_matches_hand_computed_two_token_vocab() {
    // vocab 2, one layer; zero everything except the unembedding so that
    // logits are U · norm(embedding + position).
    let arch = ArchSpec { vocab_size: 2, d_model: 2, n_layers: 1, n_heads: 1, d_ff: 2, max_seq: 4 };
    let mut m = ModelState::zeros(arch).unwrap();
    m.tensor_mut(Param::FinalNorm).copy_from_slice(&[1.0, 1.0]);
    m.tensor_mut(Param::TokenEmbedding).copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
    m.tensor_mut(Param::Unembedding).copy_from_slice(&[2.0, 0.0, 0.0, 0.0]);
    // Token 0 embeds to (1,0); rms = sqrt(0.5 + eps); normalized x0 = 1/rms.
    let rms = (0.5f64 + 1e-5).sqrt();
    let z = 2.0 / rms;
    let p1 = 1.0 / (1.0 + (-z).exp());
    let expected = -(1.0 - p1).ln(); // gold next token is 1
    let got = m.sequence_loss(&[0, 1], &[1]).unwrap();
    assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let arch = small_arch();
    let m = random_model(arch, 7);
    let tokens = [1, 4, 9, 2, 7, 3];
    let targets = [2, 4, 5];
    let g = m
        .gradients(&tokens, &targets, &Hooks::none(), GradRequest { params: true, ..Default::default() })
        .unwrap();
    let mut rng = Rng::new(99);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let i = rng.below(m.params().len());
        let h = 1e-2f32;
        let mut p = m.clone();
        let x0 = p.params()[i];
        p.params_mut()[i] = x0 + h;
        let lp = p.sequence_loss(&tokens, &targets).unwrap();
        p.params_mut()[i] = x0 - h;
        let lm = p.sequence_loss(&tokens, &targets).unwrap();
        let hh = ((x0 + h) as f64 - (x0 - h) as f64) / 2.0;
        let fd = (lp - lm) / (2.0 * hh);
        worst = worst.max(rel_err(g.params[i], fd) * if g.params[i].abs() < 1e-4 { 0.0 } else { 1.0 });
    }
    assert!(worst < 1e-2, "worst rel err {worst}");
}

#[test]
fn attention_saliency_matches_finite_differences() {
    let arch = small_arch();
    let mut rng = Rng::new(5);
    let mut worst = 0.0f64;
    for trial in 0..5 {
        let m = random_model(arch, 100 + trial);
        let tokens = random_tokens(&mut rng, 6, arch.vocab_size);
        let targets = [5];
        let grads = m.attention_saliency(&tokens, &targets).unwrap();
        for l in 0..arch.n_layers {
            for h in 0..arch.n_heads {
                for i in 0..6 {
                    for j in 0..6 {
                        let g = grads[l][(h * 6 + i) * 6 + j];
                        if j > i {
                            assert_eq!(g, 0.0);
                            continue;
                        }
                        let eps = 1e-3;
                        let f = |delta| {
                            let hooks = Hooks {
                                attention_delta: Some(AttentionDelta { layer: l, head: h, row: i, col: j, delta }),
                                ..Hooks::none()
                            };
                            m.sequence_loss_with(&tokens, &targets, &hooks).unwrap()
                        };
                        let fd = (f(eps) - f(-eps)) / (2.0 * eps);
                        worst = worst.max(rel_err(g, fd));
                    }
                }
            }
        }
    }
    println!("worst attention rel err {worst:e}");
    assert!(worst <= 1e-3, "worst rel err {worst}");
}

#[test]
fn hidden_grad_matches_finite_differences() {
    let arch = small_arch();
    let mut rng = Rng::new(6);
    let mut worst = 0.0f64;
    for trial in 0..5 {
        let m = random_model(arch, 200 + trial);
        let tokens = random_tokens(&mut rng, 5, arch.vocab_size);
        let layer = trial as usize % arch.n_layers;
        let pos = 3;
        let (_, trace) = m.forward_traced(&tokens, &Hooks::none()).unwrap();
        let d = arch.d_model;
        let mut inj: Vec<f64> = trace.layers[layer].hidden_out[pos * d..(pos + 1) * d].to_vec();
        for v in inj.iter_mut() {
            *v += 0.3 * rng.normal();
        }
        let targets = [4];
        let g = m.hidden_grad(&tokens, layer, pos, &inj, &targets).unwrap();
        for c in 0..d {
            let eps = 1e-4;
            let mut p = inj.clone();
            p[c] += eps;
            let hooks = |h: &[f64]| m.sequence_loss_with(&tokens, &targets, &Hooks {
                substitution: Some(memedit_core::model::Substitution { layer, position: pos, hidden: h }),
                ..Hooks::none()
            }).unwrap();
            let lp = hooks(&p);
            p[c] -= 2.0 * eps;
            let lm = hooks(&p);
            let fd = (lp - lm) / (2.0 * eps);
            worst = worst.max(rel_err(g[c], fd));
        }
    }
    println!("worst hidden rel err {worst:e}");
    assert!(worst <= 1e-3, "worst rel err {worst}");
}
