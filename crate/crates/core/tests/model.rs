mod common;

use approx::assert_abs_diff_eq;
use common::*;
use kalm::kb::KnowledgeBase;
use kalm::model::{Direction, ModelParams};
use proptest::prelude::*;

fn set(model: &mut ModelParams, name: &str, values: &[f64]) {
    let id = model.param(name).unwrap();
    model.store_mut().set(id, values).unwrap();
}

fn fill(model: &mut ModelParams, name: &str, f: impl Fn(usize) -> f64) {
    let id = model.param(name).unwrap();
    for (i, v) in model.store_mut().get_mut(id).iter_mut().enumerate() {
        *v = f(i);
    }
}

#[test]
fn identical_type_embedding_rows_give_uniform_posterior() {
    let (mut model, _, _) = small_model(TOY_LINES, &two_type_kb(), small_config(false, true), 1, 0.5);
    let (rows, cols) = model.store().shape(model.param("type_embedding").unwrap());
    fill(&mut model, "type_embedding", |i| 0.1 * (i % cols) as f64 - 0.2);
    let post = model.type_posterior(&[0.3, -0.1, 0.5, 0.2, -0.4, 0.9]).unwrap();
    for p in post {
        assert_abs_diff_eq!(p, 1.0 / rows as f64, epsilon = 1e-15);
    }
}

#[test]
fn empty_kb_posterior_is_one() {
    let (model, _, _) = small_model(TOY_LINES, &KnowledgeBase::new(), small_config(false, true), 2, 0.5);
    assert_eq!(model.type_posterior(&[0.1; 6]).unwrap(), vec![1.0]);
}

#[test]
fn posterior_matches_direct_matrix_product() {
    let (model, _, _) = small_model(TOY_LINES, &two_type_kb(), small_config(false, true), 3, 0.5);
    let h = [0.2, -0.7, 0.1, 0.4, 0.0, -0.3];
    let got = model.type_posterior(&h).unwrap();
    let want = posterior(&model, &h);
    for (a, b) in got.iter().zip(&want) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-14);
    }
}

#[test]
fn word_given_type_examples() {
    let mut kb = KnowledgeBase::new();
    kb.add_entity("ONE", "solo", 1).unwrap();
    kb.add_entity("THREE", "x", 1).unwrap();
    kb.add_entity("THREE", "y", 1).unwrap();
    kb.add_entity("THREE", "z", 1).unwrap();
    let (mut model, vocab, _) = small_model(&["solo x y z here"], &kb, small_config(false, false), 4, 0.5);
    let h = [0.3, 0.1, -0.2, 0.5, 0.4, -0.6];
    assert_eq!(model.word_given_type(&h, 1).unwrap().unwrap(), vec![0.0]);
    set(&mut model, "type2.bias", &[0.0; 3]);

    let zero = model.word_given_type(&[0.0; 6], 2).unwrap().unwrap();
    for lp in zero {
        assert_abs_diff_eq!(lp, -(3.0f64).ln(), epsilon = 1e-15);
    }

    // Crafted logits 1, 2, 3 through a unit hidden vector.
    let idx: Vec<usize> = ["x", "y", "z"].iter().map(|w| vocab.type_candidate(2, w).unwrap()).collect();
    let mut w = vec![0.0; 18];
    for (i, &r) in idx.iter().enumerate() {
        w[r * 6] = (i + 1) as f64;
    }
    set(&mut model, "type2.out", &w);
    set(&mut model, "type2.bias", &[0.0; 3]);
    let got = model.word_given_type(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0], 2).unwrap().unwrap();
    let denom = 1f64.exp() + 2f64.exp() + 3f64.exp();
    for (i, &r) in idx.iter().enumerate() {
        assert_abs_diff_eq!(got[r], (((i + 1) as f64).exp() / denom).ln(), epsilon = 1e-14);
    }
}

#[test]
fn zero_hidden_zero_bias_is_uniform_general() {
    let (mut model, vocab, _) = small_model(TOY_LINES, &two_type_kb(), small_config(false, true), 5, 0.5);
    fill(&mut model, "general.bias", |_| 0.0);
    let d = model.word_given_type(&[0.0; 6], 0).unwrap().unwrap();
    for lp in d {
        assert_abs_diff_eq!(lp, -(vocab.general().len() as f64).ln(), epsilon = 1e-14);
    }
}

#[test]
fn mixture_matches_exhaustive_enumeration() {
    let (model, vocab, sentences) = small_model(TOY_LINES, &two_type_kb(), small_config(false, true), 6, 0.6);
    for s in &sentences {
        let mut state = model.initial_state();
        for t in 0..s.len() - 1 {
            state = model.step(&state, s.tokens[t], Direction::Forward).unwrap();
            let dist = model.next_word_distribution(&state).unwrap();
            // Every (type, word) pair enumerated by hand.
            let h = state.top();
            let post = posterior(&model, h);
            let mut total = 0.0;
            for j in 0..=model.num_types() {
                if let Some(d) = word_dist(&model, h, j) {
                    total += d.iter().map(|p| post[j] * p).sum::<f64>();
                }
            }
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(dist.total_probability(), total, epsilon = 1e-12);
            let y = &s.surfaces[t + 1];
            let want = mixture_prob(&model, h, h, s, t + 1);
            assert_abs_diff_eq!(dist.log_prob_surface(&vocab, y).exp(), want, epsilon = 1e-12);
        }
    }
}

#[test]
fn word_in_two_types_sums_both_components() {
    let (model, vocab, _) = small_model(TOY_LINES, &two_type_kb(), small_config(false, true), 7, 0.6);
    let mut state = model.initial_state();
    state = model.step(&state, vocab.bos_row(), Direction::Forward).unwrap();
    let dist = model.next_word_distribution(&state).unwrap();
    let per = vocab.type_candidate(1, "paris").unwrap();
    let loc = vocab.type_candidate(2, "paris").unwrap();
    assert!(vocab.row("paris").unwrap() >= vocab.general().len());
    let want = dist.type_posterior[1] * dist.word_log_probs[1].as_ref().unwrap()[per].exp()
        + dist.type_posterior[2] * dist.word_log_probs[2].as_ref().unwrap()[loc].exp();
    assert_abs_diff_eq!(dist.log_prob_surface(&vocab, "paris").exp(), want, epsilon = 1e-15);
}

#[test]
fn model_log_probs_match_reference_implementation() {
    for feedback in [false, true] {
        let (model, _, sentences) =
            small_model(TOY_LINES, &two_type_kb(), small_config(false, feedback), 8, 0.5);
        for s in &sentences {
            let got = model.score_sentence(s).unwrap();
            let want = reference_uni(&model, s);
            assert_eq!(got.positions, (1..s.len()).collect::<Vec<_>>());
            for (a, b) in got.log_probs.iter().zip(&want) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }
}

#[test]
fn empty_kb_equals_plain_lstm_lm() {
    for feedback in [false, true] {
        let (model, _, sentences) =
            small_model(TOY_LINES, &KnowledgeBase::new(), small_config(false, feedback), 9, 0.5);
        for s in &sentences {
            let got = model.score_sentence(s).unwrap().log_probs;
            let want = plain_lstm_lm(&model, s);
            for (a, b) in got.iter().zip(&want) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-13);
            }
        }
    }
}

#[test]
fn feedback_disabled_step_is_plain_stacked_lstm() {
    let (model, _, sentences) = small_model(TOY_LINES, &two_type_kb(), small_config(false, false), 10, 0.5);
    let s = &sentences[1];
    let order: Vec<usize> = (0..s.len()).collect();
    let want = run_direction(&model, "fwd", s, &order);
    let mut state = model.initial_state();
    for (t, w) in order.iter().zip(&want) {
        state = model.step(&state, s.tokens[*t], Direction::Forward).unwrap();
        for (a, b) in state.top().iter().zip(w) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        }
    }
}

#[test]
fn feedback_vector_examples() {
    let (model, _, _) = small_model(TOY_LINES, &two_type_kb(), small_config(false, true), 11, 0.5);
    let (we, _, cols) = mat(model.store(), "type_embedding");
    for j in 0..3 {
        let mut onehot = vec![0.0; 3];
        onehot[j] = 1.0;
        assert_eq!(model.type_feedback(&onehot).unwrap(), we[j * cols..(j + 1) * cols].to_vec());
    }
    let nu = model.type_feedback(&[1.0 / 3.0; 3]).unwrap();
    for k in 0..cols {
        let mean = (we[k] + we[cols + k] + we[2 * cols + k]) / 3.0;
        assert_abs_diff_eq!(nu[k], mean, epsilon = 1e-15);
    }
}

#[test]
fn zero_type_embeddings_reduce_feedback_to_padding() {
    let kb = two_type_kb();
    let (mut with, _, sentences) = small_model(TOY_LINES, &kb, small_config(false, true), 12, 0.5);
    fill(&mut with, "type_embedding", |_| 0.0);
    let (mut without, _, _) = small_model(TOY_LINES, &kb, small_config(false, false), 12, 0.5);
    // Copy every shared parameter; the narrower first layer takes the
    // leading input columns.
    for id in without.store().ids().collect::<Vec<_>>() {
        let name = without.store().name(id).to_string();
        let src = with.param(&name).unwrap();
        let (rows, cols) = without.store().shape(id);
        let (_, wide) = with.store().shape(src);
        let values: Vec<f64> = (0..rows)
            .flat_map(|r| with.store().get(src)[r * wide..r * wide + cols].to_vec())
            .collect();
        without.store_mut().set(id, &values).unwrap();
    }
    for s in &sentences {
        let mut a = with.initial_state();
        let mut b = without.initial_state();
        for &tok in &s.tokens {
            a = with.step(&a, tok, Direction::Forward).unwrap();
            b = without.step(&b, tok, Direction::Forward).unwrap();
            assert_eq!(a, b);
        }
    }
}

#[test]
fn unidirectional_posterior_ignores_current_and_later_tokens() {
    let (model, vocab, sentences) = small_model(TOY_LINES, &two_type_kb(), small_config(false, true), 13, 0.5);
    let s = &sentences[2];
    let base = model.score_sentence(s).unwrap();
    for t in 1..s.len() - 1 {
        let changed = s.with_token(t, vocab.row("city").unwrap(), "city");
        let other = model.score_sentence(&changed).unwrap();
        for p in 0..base.positions.len() {
            if base.positions[p] <= t {
                assert_eq!(base.posteriors[p], other.posteriors[p], "position {}", base.positions[p]);
            }
        }
    }
}

#[test]
fn bidirectional_posterior_ignores_only_its_own_token() {
    let (model, vocab, sentences) = small_model(TOY_LINES, &two_type_kb(), small_config(true, true), 14, 0.5);
    let s = &sentences[1];
    let base = model.encode_bidirectional(s).unwrap();
    for t in 1..s.len() - 1 {
        let changed = s.with_token(t, vocab.row("city").unwrap(), "city");
        let other = model.encode_bidirectional(&changed).unwrap();
        for (i, &p) in base.positions.iter().enumerate() {
            if p == t {
                assert_eq!(base.posteriors[i], other.posteriors[i]);
            } else {
                assert_ne!(base.posteriors[i], other.posteriors[i], "position {p} ignores token {t}");
            }
        }
    }
}

#[test]
fn boundary_only_sentence_has_no_interior_positions() {
    let (model, vocab, _) = small_model(TOY_LINES, &two_type_kb(), small_config(true, true), 15, 0.5);
    let empty = vocab.encode("");
    assert_eq!(empty.len(), 2);
    let enc = model.encode_bidirectional(&empty).unwrap();
    assert!(enc.positions.is_empty());
    assert!(model.score_sentence(&empty).unwrap().positions.is_empty());
}

#[test]
fn ten_token_sentence_has_eight_interior_positions() {
    let (model, vocab, _) = small_model(TOY_LINES, &two_type_kb(), small_config(true, true), 16, 0.5);
    let s = vocab.encode("alice met bob in the city of rome");
    assert_eq!(s.len(), 10);
    assert_eq!(model.encode_bidirectional(&s).unwrap().positions, (1..9).collect::<Vec<_>>());
    assert_eq!(model.score_sentence(&s).unwrap().log_probs.len(), 8);
}

#[test]
fn bidirectional_fusion_matches_reference_directions() {
    let (model, _, sentences) = small_model(TOY_LINES, &two_type_kb(), small_config(true, true), 17, 0.5);
    for s in &sentences {
        let n = s.len();
        let left = run_direction(&model, "fwd", s, &(0..n).collect::<Vec<_>>());
        let right_order: Vec<usize> = (0..n).rev().collect();
        let right = run_direction(&model, "bwd", s, &right_order);
        let enc = model.encode_bidirectional(s).unwrap();
        for (i, &t) in enc.positions.iter().enumerate() {
            let mut want = left[t - 1].clone();
            want.extend(&right[n - 1 - (t + 1)]);
            for (a, b) in enc.fused[i].iter().zip(&want) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-14);
            }
        }
    }
}

#[test]
fn swapped_directions_mirror_a_palindrome() {
    let (model, vocab, _) = small_model(TOY_LINES, &two_type_kb(), small_config(true, true), 18, 0.5);
    // Reading the end symbol as the start symbol makes the row sequence a
    // palindrome.
    let s = vocab.encode("alice met bob met alice");
    let s = s.with_token(s.len() - 1, vocab.bos_row(), "<s>");
    let mut swapped = model.clone();
    for id in model.store().ids() {
        let name = model.store().name(id);
        let partner = if let Some(rest) = name.strip_prefix("fwd.") {
            format!("bwd.{rest}")
        } else if let Some(rest) = name.strip_prefix("bwd.") {
            format!("fwd.{rest}")
        } else {
            continue;
        };
        let values = model.store().get(id).to_vec();
        let target = swapped.param(&partner).unwrap();
        swapped.store_mut().set(target, &values).unwrap();
    }
    let a = model.encode_bidirectional(&s).unwrap();
    let b = swapped.encode_bidirectional(&s).unwrap();
    let m = a.positions.len();
    let e = model.config().embed_dim;
    for i in 0..m {
        let fa = &a.fused[i];
        let fb = &b.fused[m - 1 - i];
        assert_eq!(&fa[..e], &fb[e..]);
        assert_eq!(&fa[e..], &fb[..e]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(120))]

    #[test]
    fn mixture_invariants_hold_after_every_step(seed in 0u64..1_000_000, range in 0.05f64..2.0, bi in any::<bool>()) {
        let (model, _, sentences) = small_model(TOY_LINES, &two_type_kb(), small_config(false, bi), seed, range);
        let s = &sentences[(seed % 4) as usize];
        let mut state = model.initial_state();
        for &tok in &s.tokens {
            state = model.step(&state, tok, Direction::Forward).unwrap();
            let d = model.next_word_distribution(&state).unwrap();
            prop_assert!((d.type_posterior.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for w in d.word_log_probs.iter().flatten() {
                prop_assert!((w.iter().map(|l| l.exp()).sum::<f64>() - 1.0).abs() < 1e-9);
            }
            prop_assert!((d.total_probability() - 1.0).abs() < 1e-9);
        }
    }
}
