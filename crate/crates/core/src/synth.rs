//! Planted-entity corpus generator.
//!
//! Sentences come from fixed templates whose slots are filled from typed
//! lexicons, so the gold entity spans are known exactly. The lexicons double
//! as the knowledge base, with each entity's sampling weight as its
//! popularity. Each lexicon is a hand-written head followed by a long tail
//! of generated names with Zipf-distributed weights, so many entities are
//! rare in any sample. Two names are listed under both PER and LOC; their
//! gold type is decided by the template slot.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::{build_vocabulary, EncodedSentence, TaggedTokens, VocabOptions, VocabularySet};
use crate::error::{Error, Result};
use crate::inference::{score_ner, OUTSIDE};
use crate::kb::{compute_prior, KnowledgeBase, TypePrior};
use crate::rng;

pub const TYPES: [&str; 3] = ["PER", "LOC", "ORG"];

const PER: &[&str] = &[
    "alice", "bob", "carol", "dmitri", "erin", "farouk", "grace", "heidi", "ivan", "judy",
    "kenji", "lucia", "mallory", "nadia", "oscar", "peggy", "quentin", "rosa", "sybil",
    "trent", "ursula", "victor", "wendy", "xavier", "yusuf", "zelda", "john smith",
    "mary jones", "pablo ortiz", "jordan", "washington",
];

const LOC: &[&str] = &[
    "paris", "london", "berlin", "tokyo", "madrid", "rome", "cairo", "lima", "oslo", "vienna",
    "dublin", "lisbon", "nairobi", "seoul", "quito", "hanoi", "prague", "warsaw", "athens",
    "helsinki", "manila", "dakar", "san diego", "hong kong", "buenos aires", "jordan",
    "washington",
];

const ORG: &[&str] = &[
    "acme", "globex", "initech", "umbrella", "hooli", "vandelay", "cyberdyne", "tyrell",
    "wonka", "soylent", "gringotts", "oscorp", "monarch", "aperture", "zorg", "nakatomi",
    "massive dynamic", "stark industries", "wayne enterprises", "blue sun", "weyland yutani",
];

const DAYS: &[&str] = &["monday", "tuesday", "wednesday", "thursday", "friday"];
const ADJ: &[&str] = &["large", "small", "modern", "busy", "quiet"];

/// Slots are `{PER}`, `{LOC}`, `{ORG}`; `{DAY}` and `{ADJ}` draw general
/// filler words.
const TEMPLATES: &[&str] = &[
    "{PER} visited {LOC} last week .",
    "{PER} works for {ORG} in {LOC} .",
    "{ORG} opened a {ADJ} office in {LOC} on {DAY} .",
    "the mayor of {LOC} met {PER} on {DAY} .",
    "{PER} said that {ORG} will hire more staff .",
    "shares of {ORG} rose after {PER} resigned .",
    "{PER} and {PER} flew from {LOC} to {LOC} .",
    "she moved to {LOC} to join {ORG} .",
    "{ORG} announced a deal with {ORG} on {DAY} .",
    "it rained in {LOC} all day .",
    "the weather was {ADJ} on {DAY} .",
    "{PER} lives near a {ADJ} park in {LOC} .",
    "according to {ORG} , profits fell sharply .",
    "{PER} , a spokesman for {ORG} , declined to comment .",
    "we spent {DAY} in {LOC} with {PER} .",
    "the board of {ORG} praised {PER} .",
    "prices in {LOC} climbed again .",
    "nobody expected the {ADJ} crowd .",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthConfig {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            train: 2000,
            valid: 200,
            test: 200,
            seed: 1,
        }
    }
}

/// Tokens with IOB2 gold tags.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthSentence {
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
}

impl SynthSentence {
    pub fn to_tagged_tokens(&self) -> TaggedTokens {
        TaggedTokens {
            tokens: self.tokens.clone(),
            tags: self.tags.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub kb: KnowledgeBase,
    pub train: Vec<SynthSentence>,
    pub valid: Vec<SynthSentence>,
    pub test: Vec<SynthSentence>,
}

const SYLLABLES: [&str; 12] = ["ka", "lo", "mi", "nu", "pe", "ra", "si", "to", "va", "ze", "du", "fi"];

/// Generated names per type beyond the hand-written head.
pub const TAIL: usize = 100;

fn build_lexicon(head: &[&str], suffix: &str, offset: usize) -> Vec<String> {
    let n = SYLLABLES.len();
    let tail = (0..TAIL).map(|i| {
        let k = i + offset;
        format!("{}{}{suffix}", SYLLABLES[k % n], SYLLABLES[(k / n) % n])
    });
    head.iter().map(|s| s.to_string()).chain(tail).collect()
}

fn lexicon(name: &str) -> &'static [String] {
    static LEXICONS: OnceLock<[Vec<String>; 3]> = OnceLock::new();
    let lex = LEXICONS.get_or_init(|| {
        [
            build_lexicon(PER, "ra", 0),
            build_lexicon(LOC, "ton", 17),
            build_lexicon(ORG, "tek", 31),
        ]
    });
    match name {
        "PER" => &lex[0],
        "LOC" => &lex[1],
        _ => &lex[2],
    }
}

/// Zipf popularity of the entity at `rank`, reused as its sampling weight.
fn popularity(rank: usize) -> u64 {
    (1000 / (rank as u64 + 1)).max(1)
}

struct Sampler {
    weighted: Vec<WeightedIndex<u64>>,
}

impl Sampler {
    fn new() -> Self {
        let weighted = TYPES
            .iter()
            .map(|t| {
                let n = lexicon(t).len();
                WeightedIndex::new((0..n).map(popularity)).expect("positive weights")
            })
            .collect();
        Sampler { weighted }
    }

    fn sentence<R: Rng>(&self, rng: &mut R) -> SynthSentence {
        let template = TEMPLATES.choose(rng).expect("templates");
        let mut out = SynthSentence {
            tokens: Vec::new(),
            tags: Vec::new(),
        };
        for piece in template.split_whitespace() {
            let slot = piece.trim_start_matches('{').trim_end_matches('}');
            if let Some(j) = TYPES.iter().position(|&t| t == slot) {
                let lex = lexicon(slot);
                let entity = &lex[self.weighted[j].sample(rng)];
                for (k, w) in entity.split_whitespace().enumerate() {
                    out.tokens.push(w.to_string());
                    let prefix = if k == 0 { "B" } else { "I" };
                    out.tags.push(format!("{prefix}-{slot}"));
                }
                continue;
            }
            let word = match slot {
                "DAY" if piece.starts_with('{') => DAYS.choose(rng).expect("days"),
                "ADJ" if piece.starts_with('{') => ADJ.choose(rng).expect("adjectives"),
                _ => piece,
            };
            out.tokens.push(word.to_string());
            out.tags.push(OUTSIDE.to_string());
        }
        out
    }
}

/// The knowledge base listing every lexicon entry with its popularity.
pub fn knowledge_base() -> KnowledgeBase {
    let mut kb = KnowledgeBase::new();
    for t in TYPES {
        for (i, e) in lexicon(t).iter().enumerate() {
            kb.add_entity(t, e, popularity(i)).expect("non-empty surface");
        }
    }
    kb
}

impl SynthCorpus {
    pub fn generate(config: &SynthConfig) -> Self {
        let sampler = Sampler::new();
        let split = |label: u64, n: usize| {
            let mut rng = rng::stream(config.seed, &[rng::label::SYNTH, label]);
            (0..n).map(|_| sampler.sentence(&mut rng)).collect::<Vec<_>>()
        };
        SynthCorpus {
            kb: knowledge_base(),
            train: split(0, config.train),
            valid: split(1, config.valid),
            test: split(2, config.test),
        }
    }

    pub fn tokens(split: &[SynthSentence]) -> Vec<Vec<String>> {
        split.iter().map(|s| s.tokens.clone()).collect()
    }

    pub fn gold(split: &[SynthSentence]) -> Vec<TaggedTokens> {
        split.iter().map(SynthSentence::to_tagged_tokens).collect()
    }

    /// Writes `{train,valid,test}.txt` (one sentence per line),
    /// `{train,valid,test}.conll` (token, two placeholder columns, gold tag),
    /// `kb.tsv` and an identity `type_map.tsv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, text: String| {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
        };
        for (name, split) in [("train", &self.train), ("valid", &self.valid), ("test", &self.test)] {
            let mut plain = String::new();
            let mut conll = String::new();
            for s in split {
                plain.push_str(&s.tokens.join(" "));
                plain.push('\n');
                for (tok, tag) in s.tokens.iter().zip(&s.tags) {
                    let _ = writeln!(conll, "{tok} _ _ {tag}");
                }
                conll.push('\n');
            }
            write(&format!("{name}.txt"), plain)?;
            write(&format!("{name}.conll"), conll)?;
        }
        write("kb.tsv", self.kb.to_tsv())?;
        let map: String = TYPES.iter().map(|t| format!("{t}\t{t}\n")).collect();
        write("type_map.tsv", map)
    }
}

/// Relative frequency of each label (`O` and the bare entity types) over
/// the tokens of `split`, in the order `O, PER, LOC, ORG`.
pub fn label_marginals(split: &[SynthSentence]) -> Vec<(String, f64)> {
    let labels: Vec<&str> = std::iter::once(OUTSIDE).chain(TYPES).collect();
    let mut counts = vec![0usize; labels.len()];
    let mut total = 0;
    for s in split {
        for tag in &s.tags {
            let bare = tag.split_once('-').map_or(tag.as_str(), |(_, l)| l);
            let i = labels.iter().position(|&l| l == bare).expect("known label");
            counts[i] += 1;
            total += 1;
        }
    }
    labels
        .into_iter()
        .zip(counts)
        .map(|(l, c)| (l.to_string(), c as f64 / total.max(1) as f64))
        .collect()
}

/// Expected span F1 of a tagger that ignores its input and draws every tag
/// independently from the label marginals, estimated over `rounds` draws.
pub fn chance_f1(split: &[SynthSentence], rounds: usize, seed: u64) -> f64 {
    let marginals = label_marginals(split);
    let dist = WeightedIndex::new(marginals.iter().map(|(_, p)| *p)).expect("non-empty split");
    let gold = SynthCorpus::gold(split);
    let mut rng = rng::stream(seed, &[rng::label::SYNTH, 99]);
    let mut total = 0.0;
    for _ in 0..rounds.max(1) {
        let predicted: Vec<TaggedTokens> = gold
            .iter()
            .map(|g| TaggedTokens {
                tokens: g.tokens.clone(),
                tags: g
                    .tokens
                    .iter()
                    .map(|_| marginals[dist.sample(&mut rng)].0.clone())
                    .collect(),
            })
            .collect();
        total += score_ner(&predicted, &gold, None).expect("aligned").f1();
    }
    total / rounds.max(1) as f64
}

/// A tiny two-type problem for gradient checks and exact oracles.
#[derive(Clone, Debug)]
pub struct ToyProblem {
    pub kb: KnowledgeBase,
    pub vocab: VocabularySet,
    pub sentences: Vec<EncodedSentence>,
    pub prior: TypePrior,
}

const TOY_SENTENCES: &[&str] = &[
    "alice visited paris",
    "bob met alice in rome",
    "the city of paris is big",
    "jordan flew to jordan",
];

/// `K = 2` (PER, LOC), fewer than 30 vocabulary entries, one word listed
/// under both types.
pub fn toy_problem() -> ToyProblem {
    let mut kb = KnowledgeBase::new();
    for (t, s, c) in [
        ("PER", "alice", 3),
        ("PER", "bob", 1),
        ("PER", "jordan", 2),
        ("LOC", "paris", 4),
        ("LOC", "rome", 2),
        ("LOC", "jordan", 1),
    ] {
        kb.add_entity(t, s, c).expect("non-empty surface");
    }
    let tokens: Vec<Vec<String>> = TOY_SENTENCES
        .iter()
        .map(|s| crate::corpus::tokenize(s, false))
        .collect();
    let vocab = build_vocabulary(&tokens, &kb, &VocabOptions::default()).expect("non-empty corpus");
    let sentences = tokens.iter().map(|t| vocab.encode_tokens(t)).collect();
    let prior = compute_prior(&kb, &Default::default(), 1.0).expect("positive smoothing");
    ToyProblem {
        kb,
        vocab,
        sentences,
        prior,
    }
}
