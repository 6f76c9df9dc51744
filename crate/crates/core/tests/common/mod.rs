//! Independent scalar-loop reference implementations used as oracles.
#![allow(dead_code)]

use kalm::corpus::{build_vocabulary, tokenize, EncodedSentence, VocabOptions, VocabularySet};
use kalm::kb::KnowledgeBase;
use kalm::model::{ModelConfig, ModelParams};
use kalm::numerics::ParamStore;
use kalm::rng;
use rand::seq::SliceRandom;

pub fn mat(store: &ParamStore, name: &str) -> (Vec<f64>, usize, usize) {
    let id = store.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    let (r, c) = store.shape(id);
    (store.get(id).to_vec(), r, c)
}

pub fn matvec(m: &(Vec<f64>, usize, usize), x: &[f64]) -> Vec<f64> {
    let (data, rows, cols) = m;
    assert_eq!(x.len(), *cols);
    (0..*rows)
        .map(|i| (0..*cols).map(|k| data[i * cols + k] * x[k]).sum())
        .collect()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One LSTM cell, gate blocks ordered input, forget, candidate, output.
pub fn lstm_cell(
    w_ih: &(Vec<f64>, usize, usize),
    w_hh: &(Vec<f64>, usize, usize),
    bias: &[f64],
    h: &[f64],
    c: &[f64],
    x: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let n = h.len();
    let a = matvec(w_ih, x);
    let b = matvec(w_hh, h);
    let mut h2 = vec![0.0; n];
    let mut c2 = vec![0.0; n];
    for k in 0..n {
        let pre = |g: usize| a[g * n + k] + b[g * n + k] + bias[g * n + k];
        let i = sigmoid(pre(0));
        let f = sigmoid(pre(1));
        let g = pre(2).tanh();
        let o = sigmoid(pre(3));
        c2[k] = f * c[k] + i * g;
        h2[k] = o * c2[k].tanh();
    }
    (h2, c2)
}

/// Type posterior over all `K + 1` types from a context vector.
pub fn posterior(model: &ModelParams, context: &[f64]) -> Vec<f64> {
    let s = model.store();
    let z = matvec(&mat(s, "context_proj"), context);
    let logits = matvec(&mat(s, "type_embedding"), &z);
    let active = model.active_types();
    let sub: Vec<f64> = active.iter().map(|&j| logits[j]).collect();
    let p = softmax(&sub);
    let mut out = vec![0.0; model.num_types() + 1];
    for (&j, v) in active.iter().zip(p) {
        out[j] = v;
    }
    out
}

/// `P(w | type j, h)` over `V_j`, or `None` when `V_j` is empty.
pub fn word_dist(model: &ModelParams, h: &[f64], j: usize) -> Option<Vec<f64>> {
    let s = model.store();
    if j == 0 {
        let (emb, _, cols) = mat(s, "embedding");
        let g = model.sizes()[0];
        let (b, _, _) = mat(s, "general.bias");
        let logits: Vec<f64> = (0..g)
            .map(|w| (0..cols).map(|k| emb[w * cols + k] * h[k]).sum::<f64>() + b[w])
            .collect();
        Some(softmax(&logits))
    } else {
        let w = mat(s, &format!("type{j}.out"));
        if model.sizes()[j] == 0 {
            return None;
        }
        let (b, _, _) = mat(s, &format!("type{j}.bias"));
        let logits: Vec<f64> = matvec(&w, h).iter().zip(&b).map(|(l, b)| l + b).collect();
        Some(softmax(&logits))
    }
}

/// `P(y_t)` by summing `P(type j) P(y_t | j)` over every type listing it.
pub fn mixture_prob(model: &ModelParams, h: &[f64], context: &[f64], s: &EncodedSentence, t: usize) -> f64 {
    let post = posterior(model, context);
    let mut p = 0.0;
    if let Some(g) = s.general_index(t) {
        p += post[0] * word_dist(model, h, 0).unwrap()[g];
    }
    for (j0, cand) in s.candidates[t].iter().enumerate() {
        if let (Some(c), Some(d)) = (cand, word_dist(model, h, j0 + 1)) {
            p += post[j0 + 1] * d[*c];
        }
    }
    p
}

/// Runs one direction's stacked LSTM over `order`, returning the top hidden
/// state after each consumed position.
pub fn run_direction(model: &ModelParams, prefix: &str, s: &EncodedSentence, order: &[usize]) -> Vec<Vec<f64>> {
    let st = model.store();
    let cfg = model.config();
    let (emb, _, e) = mat(st, "embedding");
    let layers: Vec<_> = (0..cfg.layers)
        .map(|l| {
            (
                mat(st, &format!("{prefix}.l{l}.w_ih")),
                mat(st, &format!("{prefix}.l{l}.w_hh")),
                mat(st, &format!("{prefix}.l{l}.bias")).0,
            )
        })
        .collect();
    let mut h: Vec<Vec<f64>> = (0..cfg.layers).map(|l| vec![0.0; cfg.layer_width(l)]).collect();
    let mut c = h.clone();
    let mut tops = Vec::new();
    for &t in order {
        let row = s.tokens[t];
        let mut x: Vec<f64> = emb[row * e..(row + 1) * e].to_vec();
        if cfg.feedback {
            let top = h.last().unwrap();
            let post = if cfg.bidirectional {
                let z = matvec(&mat(st, &format!("{prefix}.feedback_proj")), top);
                let logits = matvec(&mat(st, "type_embedding"), &z);
                let sub: Vec<f64> = model.active_types().iter().map(|&j| logits[j]).collect();
                let p = softmax(&sub);
                let mut full = vec![0.0; model.num_types() + 1];
                for (&j, v) in model.active_types().iter().zip(p) {
                    full[j] = v;
                }
                full
            } else {
                posterior(model, top)
            };
            x.extend(type_feedback(model, &post));
        }
        for (l, (w_ih, w_hh, b)) in layers.iter().enumerate() {
            let (h2, c2) = lstm_cell(w_ih, w_hh, b, &h[l], &c[l], &x);
            h[l] = h2.clone();
            c[l] = c2;
            x = h2;
        }
        tops.push(h.last().unwrap().clone());
    }
    tops
}

pub fn type_feedback(model: &ModelParams, post: &[f64]) -> Vec<f64> {
    let (we, rows, cols) = mat(model.store(), "type_embedding");
    (0..cols)
        .map(|k| (0..rows).map(|j| post[j] * we[j * cols + k]).sum())
        .collect()
}

/// Reference `log P(y_t | y_<t)` for `t = 1..n`, unidirectional model.
pub fn reference_uni(model: &ModelParams, s: &EncodedSentence) -> Vec<f64> {
    let order: Vec<usize> = (0..s.len() - 1).collect();
    let tops = run_direction(model, "fwd", s, &order);
    (1..s.len())
        .map(|t| mixture_prob(model, &tops[t - 1], &tops[t - 1], s, t).ln())
        .collect()
}

/// Plain tied-embedding LSTM language model: embedding lookup, stacked LSTM,
/// softmax over the general vocabulary against the embedding rows. No types.
/// The constant type-feedback input of a `K = 0` model (always row 0 of the
/// type embedding) is folded into the first layer's bias.
pub fn plain_lstm_lm(model: &ModelParams, s: &EncodedSentence) -> Vec<f64> {
    let st = model.store();
    let cfg = model.config();
    let (emb, _, e) = mat(st, "embedding");
    let mut layers: Vec<_> = (0..cfg.layers)
        .map(|l| {
            (
                mat(st, &format!("fwd.l{l}.w_ih")),
                mat(st, &format!("fwd.l{l}.w_hh")),
                mat(st, &format!("fwd.l{l}.bias")).0,
            )
        })
        .collect();
    if cfg.feedback {
        let (we, _, td) = mat(st, "type_embedding");
        let nu = &we[0..td];
        let (w, rows, cols) = &layers[0].0;
        let folded: Vec<f64> = (0..*rows)
            .map(|i| (0..td).map(|k| w[i * cols + e + k] * nu[k]).sum())
            .collect();
        let narrow: Vec<f64> = (0..*rows).flat_map(|i| w[i * cols..i * cols + e].to_vec()).collect();
        let rows = *rows;
        for (b, f) in layers[0].2.iter_mut().zip(folded) {
            *b += f;
        }
        layers[0].0 = (narrow, rows, e);
    }
    let (bias, _, _) = mat(st, "general.bias");
    let g = model.sizes()[0];
    let mut h: Vec<Vec<f64>> = (0..cfg.layers).map(|l| vec![0.0; cfg.layer_width(l)]).collect();
    let mut c = h.clone();
    let mut out = Vec::new();
    for t in 0..s.len() - 1 {
        let row = s.tokens[t];
        let mut x = emb[row * e..(row + 1) * e].to_vec();
        for (l, (w_ih, w_hh, b)) in layers.iter().enumerate() {
            let (h2, c2) = lstm_cell(w_ih, w_hh, b, &h[l], &c[l], &x);
            h[l] = h2.clone();
            c[l] = c2;
            x = h2;
        }
        let logits: Vec<f64> = (0..g)
            .map(|w| (0..e).map(|k| emb[w * e + k] * x[k]).sum::<f64>() + bias[w])
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        let target = s.tokens[t + 1];
        assert!(target < g, "plain LM only scores general words");
        out.push(logits[target] - lse);
    }
    out
}

pub fn tokens(lines: &[&str]) -> Vec<Vec<String>> {
    lines.iter().map(|l| tokenize(l, false)).collect()
}

pub fn small_config(bidirectional: bool, feedback: bool) -> ModelConfig {
    ModelConfig {
        embed_dim: 6,
        hidden_dim: 7,
        layers: 2,
        type_dim: 4,
        bidirectional,
        feedback,
        init_range: 0.1,
    }
}

/// A small model over `lines` and `kb` with parameters spread over
/// `[-range, range]` so that nothing is near-uniform by accident.
pub fn small_model(
    lines: &[&str],
    kb: &KnowledgeBase,
    config: ModelConfig,
    seed: u64,
    range: f64,
) -> (ModelParams, VocabularySet, Vec<EncodedSentence>) {
    let toks = tokens(lines);
    let vocab = build_vocabulary(&toks, kb, &VocabOptions::default()).unwrap();
    let mut model = ModelParams::new(config, &vocab, seed).unwrap();
    let mut r = rng::stream(seed, &[99]);
    model.randomize(range, &mut r);
    let enc = toks.iter().map(|t| vocab.encode_tokens(t)).collect();
    (model, vocab, enc)
}

pub fn two_type_kb() -> KnowledgeBase {
    let mut kb = KnowledgeBase::new();
    for (t, s, c) in [
        ("PER", "alice", 3),
        ("PER", "bob", 1),
        ("PER", "paris", 1),
        ("LOC", "paris", 4),
        ("LOC", "rome", 2),
    ] {
        kb.add_entity(t, s, c).unwrap();
    }
    kb
}

pub const TOY_LINES: &[&str] = &[
    "alice visited paris",
    "bob met alice in rome",
    "the city of paris is big",
    "bob saw the big city",
];

/// "X visited Y" style sentences over two typed lexicons.
pub fn planted_two_type(n: usize, seed: u64) -> (KnowledgeBase, Vec<Vec<String>>) {
    const PER: &[&str] = &["alice", "bob", "carol", "dave", "erin", "frank", "grace", "heidi", "ivan", "judy", "ken", "lena"];
    const LOC: &[&str] = &["paris", "rome", "oslo", "lima", "cairo", "tokyo", "berlin", "quito", "dakar", "seoul", "hanoi", "athens"];
    const TEMPLATES: &[&str] = &[
        "X visited Y",
        "X visited Y last week",
        "X met X in Y",
        "the mayor of Y thanked X",
        "X flew from Y to Y",
        "it rained in Y",
        "X said hello",
    ];
    let mut kb = KnowledgeBase::new();
    for p in PER {
        kb.add_entity("PER", p, 1).unwrap();
    }
    for l in LOC {
        kb.add_entity("LOC", l, 1).unwrap();
    }
    let mut rng = rng::stream(seed, &[42]);
    let lines = (0..n)
        .map(|_| {
            TEMPLATES
                .choose(&mut rng)
                .unwrap()
                .split(' ')
                .map(|w| match w {
                    "X" => PER.choose(&mut rng).unwrap().to_string(),
                    "Y" => LOC.choose(&mut rng).unwrap().to_string(),
                    w => w.to_string(),
                })
                .collect()
        })
        .collect();
    (kb, lines)
}
