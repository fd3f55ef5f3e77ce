mod common;

use common::{prompts, random_model, small_arch};
use memedit_core::diagnostics::{
    adjust, adjusted_perplexity, layer_similarity, pearson_similarity, repetition_ratio, saliency_flows,
    summarize_perplexity, FlowClass, FlowClasses, ANSWER_WINDOW,
};
use memedit_core::linalg::Matrix;
use memedit_core::model::{ArchSpec, ModelState};
use memedit_core::Error;
use proptest::prelude::*;

#[test]
fn pearson_of_identical_and_negated_matrices() {
    let w = Matrix::from_row_slice(2, 3, &[0.1, -2.0, 3.5, 0.7, 1.25, -0.3]);
    assert_eq!(pearson_similarity(&w, &w).unwrap(), 1.0);
    assert_eq!(pearson_similarity(&w, &w.scale(-1.0)).unwrap(), -1.0);
}

#[test]
fn pearson_rejects_degenerate_inputs() {
    let a = Matrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]);
    let flat = Matrix::from_row_slice(1, 3, &[2.0, 2.0, 2.0]);
    assert!(matches!(pearson_similarity(&a, &flat), Err(Error::ZeroVariance)));
    assert!(matches!(pearson_similarity(&a, &Matrix::zeros(3, 1)), Err(Error::ShapeMismatch { .. })));
    let one = Matrix::from_row_slice(1, 1, &[1.0]);
    assert!(pearson_similarity(&one, &one).is_err());
}

#[test]
fn unedited_model_has_unit_similarity_everywhere() {
    let m = random_model(small_arch(), 1);
    let rows = layer_similarity(&m, &m.clone(), &[0, 1, 2], 0).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.r == 1.0));
}

#[test]
fn repetition_ratio_cases() {
    // a b a b a b
    assert_eq!(repetition_ratio(&[1, 2, 1, 2, 1, 2], 2).unwrap(), 0.4);
    assert_eq!(repetition_ratio(&[1, 2, 3, 4, 5], 2).unwrap(), 1.0);
    assert_eq!(repetition_ratio(&[7; 9], 2).unwrap(), 1.0 / 8.0);
    assert!(repetition_ratio(&[1], 2).is_err());
    assert!(repetition_ratio(&[1, 2], 0).is_err());
}

#[test]
fn adjustment_factor() {
    assert_eq!(adjust(3.0, 1.0), 3.0);
    assert!((adjust(1.0, 0.4) - 0.6f64.exp()).abs() < 1e-15);
    assert!((adjust(1.0, 0.4) - 1.8221).abs() < 1e-4);
}

fn uniform_judge() -> ModelState {
    ModelState::zeros(ArchSpec { vocab_size: 16, d_model: 8, n_layers: 1, n_heads: 2, d_ff: 8, max_seq: 32 }).unwrap()
}

#[test]
fn uniform_judge_has_vocab_sized_perplexity() {
    let judge = uniform_judge();
    let answer: Vec<u32> = (0..ANSWER_WINDOW as u32).map(|i| i % 16).collect();
    let r = adjusted_perplexity(&judge, &[0, 1], &answer, 2).unwrap();
    assert!(!r.excluded);
    assert_eq!(r.tokens_used, ANSWER_WINDOW);
    assert!((r.ppl.unwrap() - 16.0).abs() < 1e-9);
    let rho = repetition_ratio(&answer, 2).unwrap();
    assert_eq!(r.rho, Some(rho));
    assert_eq!(r.adjusted, Some(adjust(r.ppl.unwrap(), rho)));
}

#[test]
fn short_answers_are_excluded_and_overflow_is_reported() {
    let judge = uniform_judge();
    let r = adjusted_perplexity(&judge, &[0], &[1; ANSWER_WINDOW - 1], 2).unwrap();
    assert!(r.excluded && r.ppl.is_none());
    let long_question = vec![1; 20];
    assert!(matches!(
        adjusted_perplexity(&judge, &long_question, &[1; ANSWER_WINDOW], 2),
        Err(Error::ContextOverflow { .. })
    ));
    let s = summarize_perplexity(&[r.clone(), r], "abc");
    assert_eq!((s.scored, s.excluded), (0, 2));
    assert_eq!(s.judge_digest, "abc");
}

#[test]
fn flat_loss_gives_zero_saliency() {
    let judge = uniform_judge();
    let r = saliency_flows(&judge, &[0, 4, 5, 6, 7, 8], &[2], 4, 3).unwrap();
    for l in &r.layers {
        assert_eq!((l.s_wp, l.s_pq, l.s_ww), (0.0, 0.0, 0.0));
    }
}

#[test]
fn saliency_reports_empty_classes() {
    let m = random_model(small_arch(), 2);
    assert!(matches!(saliency_flows(&m, &[0, 1, 2, 3], &[0], 3, 1), Err(Error::EmptyClass(_))));
    assert!(saliency_flows(&m, &[0, 1, 2, 3], &[3], 2, 1).is_err());
    assert!(saliency_flows(&m, &[0, 1, 2, 3], &[1], 2, 99).is_err());
}

#[test]
fn saliency_scores_are_non_negative() {
    let m = random_model(small_arch(), 3);
    for p in prompts(5, 5, 9, 16) {
        let r = saliency_flows(&m, &p, &[2, 5], 8, 4).unwrap();
        assert_eq!(r.layers.len(), 3);
        assert!(r.layers.iter().all(|l| l.s_wp >= 0.0 && l.s_pq >= 0.0 && l.s_ww >= 0.0));
        assert!(r.layers.iter().any(|l| l.s_ww > 0.0));
    }
}

proptest! {
    #[test]
    fn pearson_is_affine_invariant_and_symmetric(
        vals in prop::collection::vec(-5.0f64..5.0, 12),
        other in prop::collection::vec(-5.0f64..5.0, 12),
        a in 0.01f64..10.0,
        b in -10.0f64..10.0,
    ) {
        let w = Matrix::from_row_slice(3, 4, &vals);
        let v = Matrix::from_row_slice(3, 4, &other);
        prop_assume!(pearson_similarity(&w, &v).is_ok());
        let shifted = Matrix::from_row_slice(3, 4, &vals.iter().map(|x| a * x + b).collect::<Vec<_>>());
        prop_assert!((pearson_similarity(&w, &shifted).unwrap() - 1.0).abs() <= 1e-9);
        let r = pearson_similarity(&w, &v).unwrap();
        prop_assert!((r - pearson_similarity(&v, &w).unwrap()).abs() <= 1e-12);
        prop_assert!(r.abs() <= 1.0);
    }

    #[test]
    fn adjusted_is_never_below_plain(ppl in 1.0f64..1e4, rho in 0.001f64..=1.0) {
        let adj = adjust(ppl, rho);
        prop_assert!(adj >= ppl);
        prop_assert_eq!(adj == ppl, rho == 1.0);
    }

    #[test]
    fn repetition_ratio_is_in_unit_interval(tokens in prop::collection::vec(0u32..4, 2..30), n in 1usize..3) {
        let rho = repetition_ratio(&tokens, n).unwrap();
        prop_assert!(rho > 0.0 && rho <= 1.0);
    }

    #[test]
    fn flow_classes_partition_the_lower_triangle(len in 3usize..20, picks in prop::collection::vec(0usize..100, 1..4)) {
        let target = len - 1;
        let mut labels: Vec<usize> = picks.iter().map(|p| p % target).collect();
        labels.sort_unstable();
        labels.dedup();
        let c = FlowClasses::new(len, &labels, target).unwrap();
        let (mut wp, mut pq, mut ww) = (0, 0, 0);
        for i in 0..len {
            for j in 0..len {
                match c.class_of(i, j) {
                    Some(FlowClass::TextToLabel) => wp += 1,
                    Some(FlowClass::LabelToTarget) => pq += 1,
                    Some(FlowClass::Other) => ww += 1,
                    None => prop_assert!(j >= i),
                }
            }
        }
        prop_assert_eq!((wp, pq, ww), c.sizes());
        prop_assert_eq!(wp + pq + ww, len * (len - 1) / 2);
    }
}
