mod common;

use approx::assert_abs_diff_eq;
use kalm::corpus::{build_vocabulary, EncodedSentence, VocabOptions};
use kalm::kb::{KnowledgeBase, TypePrior};
use kalm::model::{Direction, MixtureDistribution, ModelConfig, ModelParams};
use kalm::numerics::{GradCheckOptions, Gradients, ParamStore, Tape};
use kalm::parallel::Execution;
use kalm::rng;
use kalm::synth::toy_problem;
use kalm::training::{
    apply_regularization, batch_objective, check_model_gradients, kl_divergence, kl_prior_penalty,
    sentence_objective, sequence_loss, DropoutRates, TrainConfig, TrainData, Trainer,
};
use rand::seq::SliceRandom;
use rand::Rng;

fn quiet_config() -> TrainConfig {
    TrainConfig {
        dropout: DropoutRates::none(),
        ar_coeff: 0.0,
        tar_coeff: 0.0,
        kl_lambda: 0.0,
        weight_decay: 0.0,
        ..TrainConfig::default()
    }
}

fn one_sentence() -> (kalm::corpus::VocabularySet, EncodedSentence) {
    let v = build_vocabulary(&common::tokens(&["a b c"]), &KnowledgeBase::new(), &VocabOptions::default()).unwrap();
    let s = v.encode("a b c");
    (v, s)
}

#[test]
fn one_hot_predictions_have_zero_loss() {
    let (v, s) = one_sentence();
    let g = v.general().len();
    let positions: Vec<usize> = (1..s.len()).collect();
    let dists: Vec<MixtureDistribution> = positions
        .iter()
        .map(|&t| {
            let target = s.general_index(t).unwrap();
            let lp = (0..g).map(|w| if w == target { 0.0 } else { f64::NEG_INFINITY }).collect();
            MixtureDistribution {
                type_posterior: vec![1.0],
                word_log_probs: vec![Some(lp)],
            }
        })
        .collect();
    assert_eq!(sequence_loss(&dists, &s, &positions).unwrap(), 0.0);
}

#[test]
fn uniform_predictions_cost_log_n() {
    let (v, s) = one_sentence();
    let n = v.general().len();
    let positions: Vec<usize> = (1..s.len()).collect();
    let uniform = MixtureDistribution {
        type_posterior: vec![1.0],
        word_log_probs: vec![Some(vec![-(n as f64).ln(); n])],
    };
    let dists = vec![uniform; positions.len()];
    assert_abs_diff_eq!(sequence_loss(&dists, &s, &positions).unwrap(), (n as f64).ln(), epsilon = 1e-14);
}

#[test]
fn impossible_target_is_an_error() {
    let (v, s) = one_sentence();
    let n = v.general().len();
    let dist = MixtureDistribution {
        type_posterior: vec![1.0],
        word_log_probs: vec![Some(vec![f64::NEG_INFINITY; n])],
    };
    assert!(sequence_loss(&[dist], &s, &[1]).is_err());
}

#[test]
fn sequence_loss_matches_enumeration_on_two_type_toy() {
    let kb = common::two_type_kb();
    for fb in [false, true] {
        let (model, _, enc) = common::small_model(common::TOY_LINES, &kb, common::small_config(false, fb), 5, 0.4);
        let s = &enc[0];
        assert_eq!(s.len() - 2, 3);
        let mut state = model.initial_state();
        let mut dists = Vec::new();
        for t in 0..s.len() - 1 {
            state = model.step(&state, s.tokens[t], Direction::Forward).unwrap();
            dists.push(model.next_word_distribution(&state).unwrap());
        }
        let positions: Vec<usize> = (1..s.len()).collect();
        let got = sequence_loss(&dists, s, &positions).unwrap();
        let oracle = common::reference_uni(&model, s);
        let want = -oracle.iter().sum::<f64>() / oracle.len() as f64;
        assert_abs_diff_eq!(got, want, epsilon = 1e-12);
    }
}

#[test]
fn kl_examples() {
    let p = vec![vec![0.2, 0.3, 0.5]];
    assert_eq!(kl_prior_penalty(&p, &p, 4.0), 0.0);
    let kl = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
    assert_abs_diff_eq!(kl_divergence(&[0.5, 0.5], &[0.9, 0.1]), kl, epsilon = 1e-15);
    assert_abs_diff_eq!(kl_prior_penalty(&[vec![0.5, 0.5]], &[vec![0.9, 0.1]], 1.0), kl * kl, epsilon = 1e-15);
    assert_abs_diff_eq!(kl_prior_penalty(&[vec![0.5, 0.5]], &[vec![0.9, 0.1]], 0.3), 0.3 * kl * kl, epsilon = 1e-15);
}

fn objective_value(model: &ModelParams, s: &EncodedSentence, prior: Option<&TypePrior>, cfg: &TrainConfig) -> (f64, usize) {
    let mut tape = Tape::new(model.store());
    let obj = sentence_objective(&mut tape, model, s, None, prior, cfg).unwrap().unwrap();
    (tape.scalar(obj.loss), obj.scored)
}

#[test]
fn zero_lambda_leaves_the_likelihood_loss_unchanged() {
    let toy = toy_problem();
    let mut model = ModelParams::new(common::small_config(false, true), &toy.vocab, 2).unwrap();
    model.randomize(0.3, &mut rng::stream(2, &[1]));
    let cfg = quiet_config();
    for s in &toy.sentences {
        let (with_prior, scored) = objective_value(&model, s, Some(&toy.prior), &cfg);
        let (without, _) = objective_value(&model, s, None, &cfg);
        assert_eq!(with_prior, without);
        let scores = model.score_sentence(s).unwrap();
        let mean = -scores.log_probs.iter().sum::<f64>() / scored as f64;
        assert_abs_diff_eq!(with_prior / scored as f64, mean, epsilon = 1e-12);
    }
}

#[test]
fn kl_term_on_the_tape_matches_the_plain_formula() {
    let toy = toy_problem();
    for bi in [false, true] {
        let mut model = ModelParams::new(common::small_config(bi, true), &toy.vocab, 4).unwrap();
        model.randomize(0.5, &mut rng::stream(4, &[1]));
        let off = quiet_config();
        let on = TrainConfig {
            kl_lambda: 0.7,
            ..quiet_config()
        };
        for s in &toy.sentences {
            let scores = model.score_sentence(s).unwrap();
            let priors: Vec<Vec<f64>> = scores.positions.iter().map(|&t| toy.prior.get(&s.surfaces[t]).to_vec()).collect();
            let want = kl_prior_penalty(&scores.posteriors, &priors, 0.7);
            let diff = objective_value(&model, s, Some(&toy.prior), &on).0 - objective_value(&model, s, Some(&toy.prior), &off).0;
            assert_abs_diff_eq!(diff, want, epsilon = 1e-10);
        }
    }
}

#[test]
fn regularization_examples() {
    let mut cfg = quiet_config();
    let acts = vec![vec![1.0], vec![3.0]];
    assert_eq!(apply_regularization(0.25, &acts, &acts, &cfg), 0.25);
    cfg.tar_coeff = 2.0;
    assert_eq!(apply_regularization(0.25, &acts, &acts, &cfg), 0.25 + 2.0 * 4.0);
    let constant = vec![vec![0.5, -2.0]; 5];
    assert_eq!(apply_regularization(0.25, &constant, &constant, &cfg), 0.25);
    cfg.ar_coeff = 1.0;
    assert_abs_diff_eq!(apply_regularization(0.0, &acts, &acts, &cfg), 5.0 + 8.0, epsilon = 1e-15);
}

fn randomized_toy(config: ModelConfig, seed: u64) -> (ModelParams, Vec<EncodedSentence>, TypePrior) {
    let toy = toy_problem();
    let mut model = ModelParams::new(config, &toy.vocab, seed).unwrap();
    model.randomize(0.5, &mut rng::stream(seed, &[rng::label::INIT, 1]));
    (model, toy.sentences, toy.prior)
}

#[test]
fn full_objective_passes_gradient_check() {
    let all_on = TrainConfig {
        kl_lambda: 0.5,
        ar_coeff: 1.0,
        tar_coeff: 2.0,
        dropout: DropoutRates {
            weight: 0.2,
            ..DropoutRates::default()
        },
        ..TrainConfig::default()
    };
    for (bi, fb) in [(false, false), (false, true), (true, false), (true, true)] {
        let (model, sentences, prior) = randomized_toy(common::small_config(bi, fb), 11);
        let report = check_model_gradients(&model, &sentences, Some(&prior), &all_on, &GradCheckOptions::default()).unwrap();
        assert!(report.all_passed(), "bi={bi} fb={fb}\n{report}");
    }
    // K = 0 with the same regularizers.
    let v = build_vocabulary(&common::tokens(common::TOY_LINES), &KnowledgeBase::new(), &VocabOptions::default()).unwrap();
    let mut model = ModelParams::new(common::small_config(false, true), &v, 3).unwrap();
    model.randomize(0.5, &mut rng::stream(3, &[1]));
    let enc: Vec<_> = common::TOY_LINES.iter().map(|l| v.encode(l)).collect();
    let report = check_model_gradients(&model, &enc, None, &all_on, &GradCheckOptions::default()).unwrap();
    assert!(report.all_passed(), "{report}");
}

fn objective_and_gradient(model: &ModelParams, s: &[EncodedSentence], prior: &TypePrior, cfg: &TrainConfig) -> (f64, Gradients) {
    let mut tape = Tape::new(model.store());
    let loss = batch_objective(&mut tape, model, s, Some(prior), cfg).unwrap();
    (tape.scalar(loss), tape.backward(loss))
}

#[test]
fn small_step_along_negative_gradient_never_increases_loss() {
    let cfg = TrainConfig {
        kl_lambda: 0.5,
        ..TrainConfig::default()
    };
    for seed in 0..20u64 {
        let bi = seed % 2 == 1;
        let (mut model, sentences, prior) = randomized_toy(common::small_config(bi, seed % 3 != 0), seed);
        let mut rng = rng::stream(seed, &[7]);
        let mut batch = sentences.clone();
        batch.shuffle(&mut rng);
        batch.truncate(rng.gen_range(1..=batch.len()));
        let cfg = TrainConfig { seed, ..cfg.clone() };
        let (before, grads) = objective_and_gradient(&model, &batch, &prior, &cfg);
        let eta = 1e-3 / grads.global_norm().max(1.0);
        model.store_mut().axpy(-eta, &grads);
        let (after, _) = objective_and_gradient(&model, &batch, &prior, &cfg);
        assert!(after <= before, "seed {seed}: {before} -> {after}");
    }
}

fn mean_kl(model: &ModelParams, sentences: &[EncodedSentence], prior: &TypePrior) -> f64 {
    let (mut total, mut n) = (0.0, 0);
    for s in sentences {
        let scores = model.score_sentence(s).unwrap();
        for (&t, post) in scores.positions.iter().zip(&scores.posteriors) {
            total += kl_divergence(post, &prior.get(&s.surfaces[t]));
            n += 1;
        }
    }
    total / n as f64
}

#[test]
fn large_lambda_pulls_posteriors_toward_the_prior() {
    let (model, sentences, prior) = randomized_toy(common::small_config(true, false), 21);
    let backbone: Vec<String> = model
        .store()
        .ids()
        .map(|id| model.store().name(id).to_string())
        .filter(|n| n != "type_embedding" && n != "context_proj")
        .collect();
    let run = |lambda: f64| {
        let cfg = TrainConfig {
            kl_lambda: lambda,
            learning_rate: 1.0,
            epochs: 10,
            batch_size: 2,
            ..quiet_config()
        };
        let data = TrainData {
            train: &sentences,
            valid: &sentences,
            prior: Some(&prior),
        };
        let mut trainer = Trainer::new(model.clone(), cfg, data).unwrap();
        for name in &backbone {
            trainer.freeze(name).unwrap();
        }
        while !trainer.is_finished() {
            trainer.run_epoch().unwrap();
        }
        let mut m = model.clone();
        m.replace_store(trainer.state().current.clone()).unwrap();
        for name in &backbone {
            let id = m.param(name).unwrap();
            assert_eq!(m.store().get(id), model.store().get(id), "{name} moved");
        }
        mean_kl(&m, &sentences, &prior)
    };
    let plain = run(0.0);
    let pulled = run(20.0);
    assert!(pulled < plain, "KL with λ=20 {pulled} vs λ=0 {plain}");
}

fn toy_trainer_run(exec: Execution, bi: bool) -> (ParamStore, Vec<(usize, f64, f64, f64)>) {
    let (model, sentences, prior) = randomized_toy(common::small_config(bi, true), 8);
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 2,
        learning_rate: 1.0,
        ..TrainConfig::default()
    };
    let data = TrainData {
        train: &sentences,
        valid: &sentences[..2],
        prior: Some(&prior),
    };
    let (m, report) = Trainer::new(model, cfg, data).unwrap().with_execution(exec).run().unwrap();
    let metrics = report
        .epochs
        .iter()
        .map(|e| (e.epoch, e.train_loss, e.valid_perplexity, e.grad_norm))
        .collect();
    (m.store().clone(), metrics)
}

#[test]
fn training_is_bit_reproducible() {
    for bi in [false, true] {
        let a = toy_trainer_run(Execution::Parallel, bi);
        let b = toy_trainer_run(Execution::Parallel, bi);
        assert_eq!(a, b);
        let c = toy_trainer_run(Execution::Sequential, bi);
        assert_eq!(a, c, "sequential and parallel runs differ");
        let epochs: Vec<usize> = a.1.iter().map(|m| m.0).collect();
        assert_eq!(epochs, vec![1, 2, 3]);
    }
}

#[test]
fn clipping_bounds_an_adversarial_gradient() {
    let mut store = ParamStore::new();
    let a = store.add("a", 3, 4);
    let b = store.add("b", 1, 5);
    let mut g = Gradients::zeros_like(&store);
    g.get_mut(a).iter_mut().enumerate().for_each(|(i, v)| *v = 1e6 * (i as f64 - 5.0));
    g.get_mut(b).fill(-3e7);
    let before = g.clip_global_norm(0.25);
    assert!(before > 1e7);
    assert!(g.global_norm() <= 0.25 + 1e-15);
    let mut small = Gradients::zeros_like(&store);
    small.get_mut(b)[0] = 0.1;
    small.clip_global_norm(0.25);
    assert_eq!(small.get(b)[0], 0.1);
}

fn planted_run(kb: &KnowledgeBase, train: &[Vec<String>], valid: &[Vec<String>]) -> (f64, f64) {
    let vocab = build_vocabulary(train, kb, &VocabOptions::default()).unwrap();
    let enc = |c: &[Vec<String>]| c.iter().map(|s| vocab.encode_tokens(s)).collect::<Vec<_>>();
    let (tr, va) = (enc(train), enc(valid));
    let config = ModelConfig {
        embed_dim: 16,
        hidden_dim: 16,
        layers: 1,
        type_dim: 8,
        bidirectional: false,
        feedback: true,
        init_range: 0.1,
    };
    let model = ModelParams::new(config, &vocab, 1).unwrap();
    let cfg = TrainConfig {
        epochs: 12,
        batch_size: 10,
        learning_rate: 5.0,
        ..quiet_config()
    };
    let data = TrainData {
        train: &tr,
        valid: &va,
        prior: None,
    };
    let (_, report) = Trainer::new(model, cfg, data).unwrap().run().unwrap();
    (report.initial_valid_perplexity, report.best_valid_perplexity)
}

#[test]
fn planted_corpus_training_lowers_perplexity_and_types_help() {
    let (kb, lines) = common::planted_two_type(250, 1);
    let (train, valid) = lines.split_at(200);
    let (start, typed) = planted_run(&kb, train, valid);
    assert!(typed < start, "valid perplexity {start} -> {typed}");
    let (_, plain) = planted_run(&KnowledgeBase::new(), train, valid);
    assert!(typed < plain, "K=2 {typed} vs K=0 {plain}");
}
