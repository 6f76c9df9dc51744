//! Tokenization, vocabularies and CoNLL input.
//!
//! Embedding rows are laid out as the general vocabulary first (so the tied
//! general-type output projection is a row prefix of the embedding matrix),
//! followed by entity surfaces that are not general words, in type order.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kb::KnowledgeBase;

pub const UNK: &str = "<unk>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const SPECIALS: [&str; 3] = [UNK, BOS, EOS];

const VOCAB_MAGIC: &str = "kalm-vocab\t1";

pub fn tokenize(line: &str, lowercase: bool) -> Vec<String> {
    line.split_whitespace()
        .map(|w| if lowercase { w.to_lowercase() } else { w.to_string() })
        .collect()
}

/// Reads a one-sentence-per-line corpus. Blank lines are skipped.
pub fn read_corpus(path: impl AsRef<Path>, lowercase: bool) -> Result<Vec<Vec<String>>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| tokenize(l, lowercase))
        .filter(|t| !t.is_empty())
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VocabOptions {
    pub min_count: u64,
    pub lowercase: bool,
    /// Entity surfaces also join the general vocabulary when their corpus
    /// count reaches this value. `None` keeps them out of it entirely.
    pub entity_general_min_count: Option<u64>,
}

impl Default for VocabOptions {
    fn default() -> Self {
        VocabOptions {
            min_count: 1,
            lowercase: false,
            entity_general_min_count: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VocabularySet {
    lowercase: bool,
    general: Vec<String>,
    type_names: Vec<String>,
    type_vocabs: Vec<Vec<String>>,
    rows: Vec<String>,
    row_of: HashMap<String, usize>,
    type_index: Vec<HashMap<String, usize>>,
}

impl VocabularySet {
    fn assemble(
        lowercase: bool,
        general: Vec<String>,
        type_names: Vec<String>,
        type_vocabs: Vec<Vec<String>>,
    ) -> Result<Self> {
        let mut rows = general.clone();
        let mut row_of: HashMap<String, usize> = HashMap::with_capacity(rows.len());
        for (i, w) in rows.iter().enumerate() {
            if row_of.insert(w.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate general word {w:?}")));
            }
        }
        for s in SPECIALS {
            if !row_of.contains_key(s) {
                return Err(Error::Data(format!("general vocabulary lacks {s}")));
            }
        }
        let mut type_index = Vec::with_capacity(type_vocabs.len());
        for vocab in &type_vocabs {
            let mut idx = HashMap::with_capacity(vocab.len());
            for (i, w) in vocab.iter().enumerate() {
                if idx.insert(w.clone(), i).is_some() {
                    return Err(Error::Data(format!("duplicate entity word {w:?}")));
                }
                if !row_of.contains_key(w) {
                    row_of.insert(w.clone(), rows.len());
                    rows.push(w.clone());
                }
            }
            type_index.push(idx);
        }
        Ok(VocabularySet {
            lowercase,
            general,
            type_names,
            type_vocabs,
            rows,
            row_of,
            type_index,
        })
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    pub fn num_types(&self) -> usize {
        self.type_vocabs.len()
    }

    pub fn type_names(&self) -> &[String] {
        &self.type_names
    }

    pub fn general(&self) -> &[String] {
        &self.general
    }

    /// `V_j` for `j` in `1..=K`.
    pub fn type_vocab(&self, j: usize) -> &[String] {
        &self.type_vocabs[j - 1]
    }

    /// Vocabulary sizes `|V_0|, |V_1|, ..., |V_K|`.
    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.general.len())
            .chain(self.type_vocabs.iter().map(Vec::len))
            .collect()
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn row_surface(&self, row: usize) -> &str {
        &self.rows[row]
    }

    pub fn row(&self, surface: &str) -> Option<usize> {
        self.row_of.get(surface).copied()
    }

    pub fn unk_row(&self) -> usize {
        self.row_of[UNK]
    }

    pub fn bos_row(&self) -> usize {
        self.row_of[BOS]
    }

    pub fn eos_row(&self) -> usize {
        self.row_of[EOS]
    }

    /// Index of `surface` within `V_j` (`j >= 1`).
    pub fn type_candidate(&self, j: usize, surface: &str) -> Option<usize> {
        self.type_index[j - 1].get(surface).copied()
    }

    fn normalize<'a>(&self, surface: &'a str) -> std::borrow::Cow<'a, str> {
        if self.lowercase {
            std::borrow::Cow::Owned(surface.to_lowercase())
        } else {
            std::borrow::Cow::Borrowed(surface)
        }
    }

    /// Encodes pre-split tokens, adding the boundary symbols.
    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> EncodedSentence {
        let k = self.num_types();
        let n = tokens.len() + 2;
        let mut out = EncodedSentence {
            tokens: Vec::with_capacity(n),
            surfaces: Vec::with_capacity(n),
            candidates: Vec::with_capacity(n),
            general_size: self.general.len(),
        };
        out.push(self.bos_row(), BOS.to_string(), vec![None; k]);
        for t in tokens {
            let surface = self.normalize(t.as_ref()).into_owned();
            let cands: Vec<Option<usize>> =
                (1..=k).map(|j| self.type_candidate(j, &surface)).collect();
            let row = self.row(&surface).unwrap_or_else(|| self.unk_row());
            out.push(row, surface, cands);
        }
        out.push(self.eos_row(), EOS.to_string(), vec![None; k]);
        out
    }

    pub fn encode(&self, sentence: &str) -> EncodedSentence {
        let tokens: Vec<&str> = sentence.split_whitespace().collect();
        self.encode_tokens(&tokens)
    }

    pub fn decode(&self, rows: &[usize]) -> Vec<String> {
        rows.iter().map(|&r| self.rows[r].clone()).collect()
    }

    /// Line-oriented text form; identical vocabularies serialize to identical
    /// bytes.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{VOCAB_MAGIC}");
        let _ = writeln!(out, "lowercase\t{}", u8::from(self.lowercase));
        let _ = writeln!(out, "types\t{}", self.type_vocabs.len());
        let _ = writeln!(out, "general\t{}", self.general.len());
        for w in &self.general {
            let _ = writeln!(out, "{w}");
        }
        for (name, vocab) in self.type_names.iter().zip(&self.type_vocabs) {
            let _ = writeln!(out, "type\t{name}\t{}", vocab.len());
            for w in vocab {
                let _ = writeln!(out, "{w}");
            }
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let mut next = |what: &str| -> Result<(usize, &str)> {
            lines.next().map(|(i, l)| (i + 1, l)).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                message: format!("unexpected end of file, expected {what}"),
            })
        };
        let err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let (ln, magic) = next("header")?;
        if magic != VOCAB_MAGIC {
            return Err(err(ln, format!("not a vocabulary file (header {magic:?})")));
        }
        let field = |ln: usize, line: &str, key: &str| -> Result<usize> {
            let mut it = line.split('\t');
            match (it.next(), it.next(), it.next()) {
                (Some(k), Some(v), None) if k == key => {
                    v.parse().map_err(|e| err(ln, format!("bad {key}: {e}")))
                }
                _ => Err(err(ln, format!("expected `{key}<TAB>n`"))),
            }
        };
        let (ln, l) = next("lowercase")?;
        let lowercase = field(ln, l, "lowercase")? != 0;
        let (ln, l) = next("types")?;
        let k = field(ln, l, "types")?;
        let (ln, l) = next("general")?;
        let ng = field(ln, l, "general")?;
        let mut general = Vec::with_capacity(ng);
        for _ in 0..ng {
            general.push(next("general word")?.1.to_string());
        }
        let mut type_names = Vec::with_capacity(k);
        let mut type_vocabs = Vec::with_capacity(k);
        for _ in 0..k {
            let (ln, l) = next("type header")?;
            let cols: Vec<&str> = l.split('\t').collect();
            let [tag, name, count] = cols.as_slice() else {
                return Err(err(ln, "expected `type<TAB>name<TAB>n`".into()));
            };
            if *tag != "type" {
                return Err(err(ln, "expected a type section".into()));
            }
            let count: usize = count.parse().map_err(|e| err(ln, format!("bad count: {e}")))?;
            type_names.push(name.to_string());
            let mut vocab = Vec::with_capacity(count);
            for _ in 0..count {
                vocab.push(next("entity word")?.1.to_string());
            }
            type_vocabs.push(vocab);
        }
        if let Some((ln, extra)) = next("end").ok().filter(|(_, l)| !l.is_empty()) {
            return Err(err(ln, format!("trailing content {extra:?}")));
        }
        VocabularySet::assemble(lowercase, general, type_names, type_vocabs)
    }
}

pub fn load_vocabulary(path: impl AsRef<Path>) -> Result<VocabularySet> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    VocabularySet::parse(&text, path)
}

/// Counts tokens across sentences.
pub fn count_tokens<S: AsRef<str>>(sentences: &[Vec<S>]) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    for s in sentences {
        for t in s {
            *counts.entry(t.as_ref().to_string()).or_insert(0) += 1;
        }
    }
    counts
}

fn by_count_then_lexicographic(counts: &BTreeMap<String, u64>, words: &mut [String]) {
    words.sort_by(|a, b| {
        let ca = counts.get(a).copied().unwrap_or(0);
        let cb = counts.get(b).copied().unwrap_or(0);
        cb.cmp(&ca).then_with(|| a.cmp(b))
    });
}

/// General vocabulary from corpus words plus one list per KB type.
///
/// Every KB surface enters its type list, seen in the corpus or not. Entity
/// surfaces stay out of the general vocabulary unless
/// [`VocabOptions::entity_general_min_count`] admits them.
pub fn build_vocabulary<S: AsRef<str>>(
    sentences: &[Vec<S>],
    kb: &KnowledgeBase,
    options: &VocabOptions,
) -> Result<VocabularySet> {
    if sentences.iter().all(|s| s.is_empty()) {
        return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
    }
    let norm = |w: &str| {
        if options.lowercase {
            w.to_lowercase()
        } else {
            w.to_string()
        }
    };
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for s in sentences {
        for t in s {
            *counts.entry(norm(t.as_ref())).or_insert(0) += 1;
        }
    }

    let k = kb.num_types();
    let mut type_vocabs: Vec<Vec<String>> = Vec::with_capacity(k);
    let mut is_entity: std::collections::HashSet<String> = Default::default();
    for j in 1..=k {
        let mut words: Vec<String> = kb.entities(j).keys().map(|w| norm(w)).collect();
        words.sort();
        words.dedup();
        by_count_then_lexicographic(&counts, &mut words);
        if words.is_empty() {
            log::warn!("entity type {} has an empty vocabulary", kb.type_names()[j - 1]);
        }
        is_entity.extend(words.iter().cloned());
        type_vocabs.push(words);
    }

    let mut general: Vec<String> = counts
        .iter()
        .filter(|(w, &c)| {
            if c < options.min_count || SPECIALS.contains(&w.as_str()) {
                return false;
            }
            if is_entity.contains(*w) {
                return options.entity_general_min_count.is_some_and(|m| c >= m);
            }
            true
        })
        .map(|(w, _)| w.clone())
        .collect();
    by_count_then_lexicographic(&counts, &mut general);
    let mut with_specials: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    with_specials.extend(general);

    VocabularySet::assemble(
        options.lowercase,
        with_specials,
        kb.type_names().to_vec(),
        type_vocabs,
    )
}

/// A sentence mapped onto vocabulary rows, boundary symbols included.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSentence {
    pub tokens: Vec<usize>,
    pub surfaces: Vec<String>,
    /// Per position, for each type `1..=K`, the index in `V_j` if present.
    pub candidates: Vec<Vec<Option<usize>>>,
    general_size: usize,
}

impl EncodedSentence {
    fn push(&mut self, row: usize, surface: String, cands: Vec<Option<usize>>) {
        self.tokens.push(row);
        self.surfaces.push(surface);
        self.candidates.push(cands);
    }

    /// Length including the two boundary symbols.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Index in the general vocabulary for position `t`, if any.
    pub fn general_index(&self, t: usize) -> Option<usize> {
        let row = self.tokens[t];
        (row < self.general_size).then_some(row)
    }

    /// Positions strictly between the boundary symbols.
    pub fn interior(&self) -> std::ops::Range<usize> {
        1..self.len().saturating_sub(1).max(1)
    }

    /// The contiguous sub-sequence `range`, treated as a sentence of its own.
    pub fn window(&self, range: std::ops::Range<usize>) -> EncodedSentence {
        EncodedSentence {
            tokens: self.tokens[range.clone()].to_vec(),
            surfaces: self.surfaces[range.clone()].to_vec(),
            candidates: self.candidates[range].to_vec(),
            general_size: self.general_size,
        }
    }

    /// Copy with position `t` pointing at another row and surface. Candidate
    /// lists are left untouched.
    pub fn with_token(&self, t: usize, row: usize, surface: &str) -> EncodedSentence {
        let mut out = self.clone();
        out.tokens[t] = row;
        out.surfaces[t] = surface.to_string();
        out
    }
}

/// One sentence from a column file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaggedTokens {
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
}

/// Reads whitespace-separated column files with blank-line sentence breaks.
/// The first column is the token and the last the tag; every non-blank line
/// must have exactly `columns` fields. `-DOCSTART-` lines are skipped.
pub fn read_columns(text: &str, columns: usize, path: &Path) -> Result<Vec<TaggedTokens>> {
    let mut out = Vec::new();
    let mut current = TaggedTokens {
        tokens: Vec::new(),
        tags: Vec::new(),
    };
    let flush = |cur: &mut TaggedTokens, out: &mut Vec<TaggedTokens>| {
        if !cur.tokens.is_empty() {
            out.push(std::mem::replace(
                cur,
                TaggedTokens {
                    tokens: Vec::new(),
                    tags: Vec::new(),
                },
            ));
        }
    };
    for (lineno, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            flush(&mut current, &mut out);
            continue;
        }
        if fields[0] == "-DOCSTART-" {
            flush(&mut current, &mut out);
            continue;
        }
        if fields.len() != columns {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: format!("expected {columns} columns, found {}", fields.len()),
            });
        }
        current.tokens.push(fields[0].to_string());
        current.tags.push(fields[columns - 1].to_string());
    }
    flush(&mut current, &mut out);
    Ok(out)
}

/// CoNLL 2003 four-column file (token, POS, chunk, NE tag).
pub fn load_conll(path: impl AsRef<Path>) -> Result<Vec<TaggedTokens>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    read_columns(&text, 4, path)
}
