use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use kalm::corpus::{
    build_vocabulary, count_tokens, load_vocabulary, read_columns, read_corpus, EncodedSentence,
    TaggedTokens, VocabOptions, VocabularySet,
};
use kalm::inference::{
    perplexity, score_corpus, score_ner, tag_corpus, to_conll, DecodeConfig, TypeMapping,
};
use kalm::kb::{compute_prior, corrupt_kb, load_kb, KnowledgeBase, TypePrior};
use kalm::model::ModelParams;
use kalm::numerics::GradCheckOptions;
use kalm::parallel::{configure_threads, Execution};
use kalm::synth::{toy_problem, SynthConfig, SynthCorpus};
use kalm::training::{check_model_gradients, TrainData, TrainReport, Trainer};
use kalm::{Error, Result};

use crate::checkpoint::{sidecar, vocab_hash, Checkpoint};
use crate::experiment::ExperimentConfig;
use crate::{Cli, Command};

fn experiment(cli: &Cli) -> Result<ExperimentConfig> {
    let g = &cli.global;
    let mut cfg = match &g.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.train_config.seed = s;
    }
    if let Some(p) = g.profile {
        cfg.profile = p;
    }
    if let Some(m) = g.mode {
        cfg.mode = m;
    }
    if let Some(f) = g.feedback {
        cfg.feedback = f.is_on();
    }
    if let Some(l) = g.kl_lambda {
        cfg.train_config.kl_lambda = l;
        cfg.kl = l > 0.0;
    }
    if let Some(a) = g.alpha {
        cfg.decode.alpha = a;
    }
    if let Some(b) = g.beta {
        cfg.decode.beta = b;
    }
    if let Some(e) = g.epochs {
        cfg.train_config.epochs = e;
    }
    if let Some(t) = g.threads {
        cfg.threads = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub(crate) fn dispatch(cli: &Cli) -> Result<()> {
    let cfg = experiment(cli)?;
    configure_threads(cfg.threads);
    match &cli.command {
        Command::BuildVocab { corpus, kb, out } => {
            let corpus = corpus.clone().or(cfg.train.clone());
            let kb = kb.clone().or(cfg.kb.clone());
            cmd_build_vocab(&cfg, corpus.as_deref(), kb.as_deref(), out)
        }
        Command::Train { out, resume } => {
            let out = match out.clone().or(cfg.output.clone()) {
                Some(o) => o,
                None => return Err(Error::Config("train needs --out or an output setting".into())),
            };
            cmd_train(&cfg, &out, resume.as_deref())
        }
        Command::Eval {
            checkpoint,
            corpus,
            vocab,
        } => {
            let corpus = corpus.clone().or(cfg.valid.clone());
            let corpus = cfg.require("corpus", &corpus)?;
            cmd_eval(&cfg, checkpoint, corpus, vocab.as_deref())
        }
        Command::Tag {
            checkpoint,
            input,
            vocab,
            prior,
            no_prior,
            out,
        } => cmd_tag(&cfg, checkpoint, input, vocab.as_deref(), prior.as_deref(), *no_prior, out.as_deref()),
        Command::Score {
            pred,
            gold,
            type_map,
            tsv,
        } => {
            let map = type_map.clone().or(cfg.type_map.clone());
            cmd_score(pred, gold, map.as_deref(), tsv.as_deref())
        }
        Command::AblateKb { fractions, out_dir } => {
            let fractions = parse_fractions(fractions)?;
            let dir = match out_dir {
                Some(d) => d.clone(),
                None => cli
                    .global
                    .config
                    .as_ref()
                    .and_then(|c| c.parent())
                    .unwrap_or(Path::new("."))
                    .join("ablation"),
            };
            cmd_ablate(&cfg, &fractions, &dir)
        }
        Command::Synth {
            out_dir,
            train,
            valid,
            test,
        } => cmd_synth(&cfg, out_dir, *train, *valid, *test),
        Command::GradCheck { tolerance } => cmd_grad_check(&cfg, *tolerance),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_kb_or_empty(path: Option<&Path>) -> Result<KnowledgeBase> {
    path.map(load_kb).transpose().map(Option::unwrap_or_default)
}

/// Reads a whitespace column file, taking the column count from the first
/// token line.
pub fn read_tagged(path: &Path) -> Result<Vec<TaggedTokens>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let columns = text
        .lines()
        .map(|l| l.split_whitespace().count())
        .zip(text.lines())
        .find(|(n, l)| *n > 0 && !l.starts_with("-DOCSTART-"))
        .map_or(2, |(n, _)| n);
    if columns < 2 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "expected at least a token and a tag column".into(),
        });
    }
    read_columns(&text, columns, path)
}

fn read_sentences(path: &Path) -> Result<Vec<Vec<String>>> {
    if path.extension().is_some_and(|e| e == "conll") {
        Ok(read_tagged(path)?.into_iter().map(|s| s.tokens).collect())
    } else {
        read_corpus(path, false)
    }
}

fn vocab_options(cfg: &ExperimentConfig) -> VocabOptions {
    VocabOptions {
        min_count: cfg.min_count,
        lowercase: cfg.lowercase,
        ..VocabOptions::default()
    }
}

fn vocab_report(vocab: &VocabularySet) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "general vocabulary\t{}", vocab.general().len());
    if vocab.num_types() == 0 {
        let _ = writeln!(out, "K = 0 (plain LM mode)");
    } else {
        let _ = writeln!(out, "K = {} entity types", vocab.num_types());
        for (j, name) in vocab.type_names().iter().enumerate() {
            let _ = writeln!(out, "  {name}\t{}", vocab.type_vocab(j + 1).len());
        }
    }
    let _ = writeln!(out, "sha256\t{}", vocab_hash(vocab));
    out
}

fn cmd_build_vocab(cfg: &ExperimentConfig, corpus: Option<&Path>, kb: Option<&Path>, out: &Path) -> Result<()> {
    let corpus = corpus.ok_or_else(|| Error::Config("build-vocab needs --corpus".into()))?;
    let sentences = read_sentences(corpus)?;
    let kb = load_kb_or_empty(kb)?;
    let vocab = build_vocabulary(&sentences, &kb, &vocab_options(cfg))?;
    write_file(out, &vocab.serialize())?;
    print!("{}", vocab_report(&vocab));
    Ok(())
}

/// Counts of training words in their general-vocabulary role.
fn general_counts(sentences: &[Vec<String>], vocab: &VocabularySet) -> HashMap<String, u64> {
    let g = vocab.general().len();
    count_tokens(sentences)
        .into_iter()
        .filter(|(w, _)| vocab.row(w).is_some_and(|r| r < g))
        .collect()
}

fn encode(vocab: &VocabularySet, sentences: &[Vec<String>]) -> Vec<EncodedSentence> {
    sentences.iter().map(|s| vocab.encode_tokens(s)).collect()
}

/// Inputs and outputs of one training run.
pub(crate) struct TrainedRun {
    pub model: ModelParams,
    pub vocab: VocabularySet,
    pub prior: TypePrior,
    pub report: TrainReport,
}

fn metrics_tsv(report: &TrainReport) -> String {
    let mut out = String::from("epoch\ttrain_loss\ttrain_objective\tvalid_perplexity\taveraging\tgrad_norm\n");
    let _ = writeln!(out, "0\t\t\t{}\t0\t", report.initial_valid_perplexity);
    for r in &report.epochs {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.epoch,
            r.train_loss,
            r.train_objective,
            r.valid_perplexity,
            u8::from(r.averaging),
            r.grad_norm
        );
    }
    out
}

/// Builds the vocabulary and prior for `kb`, then trains. With `out`, the
/// vocabulary, prior, metrics and a checkpoint per epoch are written next
/// to it.
fn train_run(
    cfg: &ExperimentConfig,
    kb: &KnowledgeBase,
    out: Option<&Path>,
    resume: Option<&Path>,
    use_prior_file: bool,
) -> Result<TrainedRun> {
    let train_tokens = read_corpus(cfg.require("train", &cfg.train)?, false)?;
    let valid_tokens = read_corpus(cfg.require("valid", &cfg.valid)?, false)?;
    let vocab = match &cfg.vocab {
        Some(p) if p.is_file() => load_vocabulary(p)?,
        _ => build_vocabulary(&train_tokens, kb, &vocab_options(cfg))?,
    };
    let prior = match (&cfg.prior, use_prior_file) {
        (Some(p), true) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            TypePrior::parse_tsv(&text, vocab.num_types(), p)?
        }
        _ => compute_prior(kb, &general_counts(&train_tokens, &vocab), cfg.prior_smoothing)?,
    };
    let train = encode(&vocab, &train_tokens);
    let valid = encode(&vocab, &valid_tokens);
    let data = TrainData {
        train: &train,
        valid: &valid,
        prior: cfg.kl.then_some(&prior),
    };
    let mut tc = cfg.train_config.clone();
    if !cfg.kl {
        tc.kl_lambda = 0.0;
    }
    let mc = cfg.model_config()?;
    let hash = vocab_hash(&vocab);
    let trainer = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path, Some(&vocab))?;
            if ckpt.model.config() != &mc {
                return Err(Error::Config(format!(
                    "{} was trained with a different model configuration",
                    path.display()
                )));
            }
            let state = ckpt
                .state
                .ok_or_else(|| Error::Config(format!("{} has no training state", path.display())))?;
            log::info!("resuming after epoch {}", state.epoch);
            Trainer::resume(ckpt.model, tc.clone(), data, state)?
        }
        None => Trainer::new(ModelParams::new(mc, &vocab, tc.seed)?, tc.clone(), data)?,
    };
    log::info!(
        "{} training windows, initial validation perplexity {:.3}",
        train.len(),
        trainer.state().initial_valid_perplexity
    );
    if let Some(out) = out {
        write_file(&sidecar(out, ".vocab"), &vocab.serialize())?;
        write_file(&sidecar(out, ".prior.tsv"), &prior.to_tsv(vocab.type_names()))?;
    }
    let result = trainer.run_with(|t| {
        let Some(out) = out else {
            return Ok(());
        };
        let ckpt = Checkpoint {
            model: t.best_model(),
            vocab_sha256: hash.clone(),
            train_config: tc.clone(),
            state: Some(t.state().clone()),
        };
        ckpt.save(out)?;
        write_file(&sidecar(out, ".metrics.tsv"), &metrics_tsv(&t.report()))
    });
    let (model, report) = result.map_err(|e| match (e, out) {
        (Error::NonFinite(msg), Some(out)) => Error::NonFinite(format!(
            "{msg}; the last good checkpoint is kept at {}",
            out.display()
        )),
        (e, _) => e,
    })?;
    Ok(TrainedRun {
        model,
        vocab,
        prior,
        report,
    })
}

fn cmd_train(cfg: &ExperimentConfig, out: &Path, resume: Option<&Path>) -> Result<()> {
    let kb = load_kb_or_empty(cfg.kb.as_deref())?;
    let run = train_run(cfg, &kb, Some(out), resume, true)?;
    print!("{}", vocab_report(&run.vocab));
    let r = &run.report;
    println!("initial validation perplexity\t{}", r.initial_valid_perplexity);
    println!("best validation perplexity\t{}", r.best_valid_perplexity);
    println!("best epoch\t{}", r.best_epoch);
    println!("epochs run\t{}", r.epochs.last().map_or(0, |e| e.epoch));
    match r.averaging_start {
        Some(e) => println!("averaging started after epoch\t{e}"),
        None => println!("averaging started after epoch\tnever"),
    }
    println!("checkpoint\t{}", out.display());
    Ok(())
}

fn load_model(checkpoint: &Path, vocab: Option<&Path>) -> Result<(ModelParams, VocabularySet)> {
    let vocab_path = vocab.map(PathBuf::from).unwrap_or_else(|| sidecar(checkpoint, ".vocab"));
    let vocab = load_vocabulary(&vocab_path)?;
    let ckpt = Checkpoint::load(checkpoint, Some(&vocab))?;
    Ok((ckpt.model, vocab))
}

fn cmd_eval(_cfg: &ExperimentConfig, checkpoint: &Path, corpus: &Path, vocab: Option<&Path>) -> Result<()> {
    let (model, vocab) = load_model(checkpoint, vocab)?;
    let sentences = encode(&vocab, &read_sentences(corpus)?);
    let ppl = perplexity(&model, &sentences, Execution::Parallel)?;
    let score = score_corpus(&model, &sentences, Execution::Parallel)?;
    println!("perplexity\t{ppl}");
    println!("scored tokens\t{}", score.tokens);
    println!("sentences\t{}", sentences.len());
    if model.config().bidirectional {
        println!("scope\tinterior tokens, fused bidirectional model");
    } else {
        println!("scope\tnext-word targets");
    }
    Ok(())
}

fn load_prior(path: &Path, num_types: usize) -> Result<TypePrior> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    TypePrior::parse_tsv(&text, num_types, path)
}

fn cmd_tag(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    input: &Path,
    vocab: Option<&Path>,
    prior: Option<&Path>,
    no_prior: bool,
    out: Option<&Path>,
) -> Result<()> {
    let (model, vocab) = load_model(checkpoint, vocab)?;
    let mut decode: DecodeConfig = cfg.decode.clone();
    if no_prior {
        decode.use_prior = false;
    }
    let prior_path = prior
        .map(PathBuf::from)
        .or_else(|| Some(sidecar(checkpoint, ".prior.tsv")).filter(|p| p.is_file()))
        .or(cfg.prior.clone());
    let prior = match (&prior_path, decode.use_prior) {
        (Some(p), true) => Some(load_prior(p, model.num_types())?),
        (None, true) => {
            log::warn!("no type prior available; decoding from the posterior alone");
            decode.use_prior = false;
            None
        }
        _ => None,
    };
    let sentences = read_sentences(input)?;
    let tagged = tag_corpus(&model, &vocab, &sentences, prior.as_ref(), &decode, Execution::Parallel)?;
    let text = to_conll(&tagged);
    match out {
        Some(p) => write_file(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_score(pred: &Path, gold: &Path, type_map: Option<&Path>, tsv: Option<&Path>) -> Result<()> {
    let predicted = read_tagged(pred)?;
    let gold = read_tagged(gold)?;
    let mapping = type_map.map(TypeMapping::load).transpose()?;
    let scores = score_ner(&predicted, &gold, mapping.as_ref())?;
    print!("{}", scores.table());
    if let Some(p) = tsv {
        write_file(p, &scores.to_tsv())?;
    }
    Ok(())
}

fn parse_fractions(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|f| {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|e| Error::Config(format!("bad fraction {f:?}: {e}")))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("fraction {v} outside [0, 1]")));
            }
            Ok(v)
        })
        .collect()
}

/// One row of the ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub fraction: f64,
    pub removed: usize,
    pub valid_perplexity: f64,
    pub test_f1: f64,
    pub test_token_f1: f64,
}

fn cmd_ablate(cfg: &ExperimentConfig, fractions: &[f64], dir: &Path) -> Result<()> {
    let kb = load_kb_or_empty(Some(cfg.require("kb", &cfg.kb)?))?;
    let gold = read_tagged(cfg.require("gold", &cfg.gold)?)?;
    let mapping = cfg.type_map.as_deref().map(TypeMapping::load).transpose()?;
    let test_tokens: Vec<Vec<String>> = gold.iter().map(|g| g.tokens.clone()).collect();
    let mut rows = Vec::new();
    for &f in fractions {
        let (corrupted, removed) = corrupt_kb(&kb, f, cfg.train_config.seed)?;
        log::info!("fraction {f}: {} KB entries removed", removed.len());
        let run = train_run(cfg, &corrupted, None, None, false)?;
        let valid = encode(&run.vocab, &read_corpus(cfg.require("valid", &cfg.valid)?, false)?);
        let valid_perplexity = perplexity(&run.model, &valid, Execution::Parallel)?;
        let tagged = tag_corpus(
            &run.model,
            &run.vocab,
            &test_tokens,
            Some(&run.prior),
            &cfg.decode,
            Execution::Parallel,
        )?;
        let predicted: Vec<TaggedTokens> = tagged.iter().map(|t| t.to_tagged_tokens()).collect();
        let scores = score_ner(&predicted, &gold, mapping.as_ref())?;
        rows.push(AblationRow {
            fraction: f,
            removed: removed.len(),
            valid_perplexity,
            test_f1: scores.f1(),
            test_token_f1: scores.token_f1(),
        });
    }
    let mut tsv = String::from("fraction\tremoved\tvalid_perplexity\ttest_f1\ttest_token_f1\n");
    let mut csv = String::from("fraction,removed,valid_perplexity,test_f1,test_token_f1\n");
    for r in &rows {
        let _ = writeln!(
            tsv,
            "{}\t{}\t{}\t{}\t{}",
            r.fraction, r.removed, r.valid_perplexity, r.test_f1, r.test_token_f1
        );
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            r.fraction, r.removed, r.valid_perplexity, r.test_f1, r.test_token_f1
        );
    }
    write_file(&dir.join("ablation.tsv"), &tsv)?;
    write_file(&dir.join("ablation.csv"), &csv)?;
    print!("{tsv}");
    Ok(())
}

fn cmd_synth(cfg: &ExperimentConfig, dir: &Path, train: usize, valid: usize, test: usize) -> Result<()> {
    let corpus = SynthCorpus::generate(&SynthConfig {
        train,
        valid,
        test,
        seed: cfg.train_config.seed,
    });
    corpus.write(dir)?;
    let experiment = "train = train.txt\nvalid = valid.txt\ntest = test.txt\nkb = kb.tsv\n\
                      gold = test.conll\ntype_map = type_map.tsv\noutput = model.ckpt\n";
    write_file(&dir.join("experiment.cfg"), experiment)?;
    println!(
        "wrote {train} train, {valid} valid and {test} test sentences to {}",
        dir.display()
    );
    Ok(())
}

fn cmd_grad_check(cfg: &ExperimentConfig, tolerance: f64) -> Result<()> {
    let toy = toy_problem();
    let mut mc = cfg.model_config()?;
    mc.embed_dim = 6;
    mc.hidden_dim = 8;
    mc.layers = 2;
    mc.type_dim = 4;
    let mut model = ModelParams::new(mc, &toy.vocab, cfg.train_config.seed)?;
    let mut rng = kalm::rng::stream(cfg.train_config.seed, &[kalm::rng::label::INIT, 1]);
    model.randomize(0.5, &mut rng);
    let mut tc = cfg.train_config.clone();
    if !cfg.kl {
        tc.kl_lambda = 0.0;
    }
    let options = GradCheckOptions {
        tolerance,
        ..GradCheckOptions::default()
    };
    let report = check_model_gradients(&model, &toy.sentences, Some(&toy.prior), &tc, &options)?;
    print!("{report}");
    if report.all_passed() {
        println!("all {} parameter groups passed", report.groups.len());
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "gradient check failed: worst relative error {:.3e}",
            report.worst()
        )))
    }
}
