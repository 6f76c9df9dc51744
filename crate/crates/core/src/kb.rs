//! Typed entity lists, the word-level type prior, and KB corruption.
//!
//! KB files are UTF-8 TSV: `type<TAB>surface[<TAB>count]`. Lines starting with
//! `#` and blank lines are ignored. Multi-word surfaces are split on
//! whitespace and every word joins the type's vocabulary with the row's count.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KnowledgeBase {
    types: Vec<String>,
    /// Per type, word surface -> popularity.
    entities: Vec<BTreeMap<String, u64>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RemovedEntity {
    pub type_name: String,
    pub surface: String,
}

impl KnowledgeBase {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of entity types `K`.
    pub fn num_types(&self) -> usize {
        self.types.len()
    }

    pub fn type_names(&self) -> &[String] {
        &self.types
    }

    /// Type index `j` (1-based, `0` is the general type) for `name`.
    pub fn type_index(&self, name: &str) -> Option<usize> {
        self.types.iter().position(|t| t == name).map(|i| i + 1)
    }

    /// Entities of type `j` (1-based) with their popularity, in lexicographic order.
    pub fn entities(&self, j: usize) -> &BTreeMap<String, u64> {
        &self.entities[j - 1]
    }

    pub fn total_entities(&self) -> usize {
        self.entities.iter().map(BTreeMap::len).sum()
    }

    pub fn popularity(&self, j: usize, surface: &str) -> u64 {
        self.entities[j - 1].get(surface).copied().unwrap_or(0)
    }

    pub fn contains(&self, j: usize, surface: &str) -> bool {
        self.entities[j - 1].contains_key(surface)
    }

    /// Registers a type with no entities yet, returning its 1-based index.
    pub fn add_type(&mut self, name: &str) -> usize {
        if let Some(j) = self.type_index(name) {
            return j;
        }
        self.types.push(name.to_string());
        self.entities.push(BTreeMap::new());
        self.types.len()
    }

    /// Adds every whitespace-separated word of `surface` to type `name`.
    /// Repeated additions sum their counts.
    pub fn add_entity(&mut self, name: &str, surface: &str, count: u64) -> Result<()> {
        let words: Vec<&str> = surface.split_whitespace().collect();
        if words.is_empty() {
            return Err(Error::Data(format!("empty surface form for type {name}")));
        }
        let j = self.add_type(name);
        for w in words {
            *self.entities[j - 1].entry(w.to_string()).or_insert(0) += count;
        }
        Ok(())
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut kb = KnowledgeBase::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message,
            };
            let cols: Vec<&str> = line.split('\t').collect();
            let (type_name, surface, count) = match cols.as_slice() {
                [t, s] => (*t, *s, 1),
                [t, s, c] => {
                    let c = c
                        .trim()
                        .parse::<u64>()
                        .map_err(|e| err(format!("bad count {c:?}: {e}")))?;
                    (*t, *s, c)
                }
                _ => {
                    return Err(err(format!(
                        "expected 2 or 3 tab-separated columns, found {}",
                        cols.len()
                    )))
                }
            };
            let type_name = type_name.trim();
            if type_name.is_empty() {
                return Err(err("empty type name".into()));
            }
            if surface.trim().is_empty() {
                return Err(err("empty surface form".into()));
            }
            kb.add_entity(type_name, surface, count)?;
        }
        Ok(kb)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (name, ents) in self.types.iter().zip(&self.entities) {
            for (surface, count) in ents {
                let _ = writeln!(out, "{name}\t{surface}\t{count}");
            }
        }
        out
    }
}

pub fn load_kb(path: impl AsRef<Path>) -> Result<KnowledgeBase> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let kb = KnowledgeBase::parse(&text, path)?;
    for (name, ents) in kb.types.iter().zip(&kb.entities) {
        if ents.is_empty() {
            log::warn!("type {name} has no entities");
        }
    }
    Ok(kb)
}

/// Word-conditioned type distribution `P(type | word)`, index 0 = general.
#[derive(Clone, Debug, PartialEq)]
pub struct TypePrior {
    num_types: usize,
    table: HashMap<String, Vec<f64>>,
}

impl TypePrior {
    /// Prior with K types where every word is general.
    pub fn general_only(num_types: usize) -> Self {
        TypePrior {
            num_types,
            table: HashMap::new(),
        }
    }

    pub fn num_types(&self) -> usize {
        self.num_types
    }

    /// Distribution over `K + 1` types for `surface`.
    pub fn get(&self, surface: &str) -> std::borrow::Cow<'_, [f64]> {
        match self.table.get(surface) {
            Some(p) => std::borrow::Cow::Borrowed(p),
            None => std::borrow::Cow::Owned(self.general_vector()),
        }
    }

    fn general_vector(&self) -> Vec<f64> {
        let mut p = vec![0.0; self.num_types + 1];
        p[0] = 1.0;
        p
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    /// Sets an explicit distribution. It is renormalised.
    pub fn insert(&mut self, surface: &str, probs: Vec<f64>) -> Result<()> {
        if probs.len() != self.num_types + 1 {
            return Err(Error::dim("TypePrior::insert", self.num_types + 1, probs.len()));
        }
        let total: f64 = probs.iter().sum();
        if probs.iter().any(|&p| p < 0.0 || !p.is_finite()) || total <= 0.0 {
            return Err(Error::Data(format!("invalid prior for {surface}: {probs:?}")));
        }
        self.table
            .insert(surface.to_string(), probs.iter().map(|p| p / total).collect());
        Ok(())
    }

    /// TSV export: a `#` header naming the columns, then one row per surface
    /// in lexicographic order.
    pub fn to_tsv(&self, type_names: &[String]) -> String {
        let mut out = String::from("# surface\tO");
        for t in type_names {
            out.push('\t');
            out.push_str(t);
        }
        out.push('\n');
        let mut keys: Vec<&String> = self.table.keys().collect();
        keys.sort();
        for k in keys {
            out.push_str(k);
            for p in &self.table[k] {
                let _ = write!(out, "\t{p}");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_tsv(text: &str, num_types: usize, path: &Path) -> Result<Self> {
        let mut prior = TypePrior::general_only(num_types);
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message,
            };
            let mut cols = line.split('\t');
            let surface = cols.next().unwrap_or_default();
            let probs = cols
                .map(|c| c.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| err(e.to_string()))?;
            prior.insert(surface, probs).map_err(|e| err(e.to_string()))?;
        }
        Ok(prior)
    }
}

/// Additive-smoothed relative popularity:
/// `P(j|y) ∝ popularity(y, j) + s·[y ∈ V_j]` for entity types and
/// `P(0|y) ∝ general_count(y) + s`. Surfaces in no entity list are general
/// with probability 1.
///
/// `general_counts` should count occurrences of a word as a general word;
/// passing raw corpus counts for entity words biases them towards type 0.
pub fn compute_prior(
    kb: &KnowledgeBase,
    general_counts: &HashMap<String, u64>,
    smoothing: f64,
) -> Result<TypePrior> {
    if !(smoothing > 0.0) {
        return Err(Error::Config(format!("prior smoothing must be > 0, got {smoothing}")));
    }
    let k = kb.num_types();
    let mut prior = TypePrior::general_only(k);
    for j in 1..=k {
        for surface in kb.entities(j).keys() {
            if prior.table.contains_key(surface) {
                continue;
            }
            let mut p = vec![0.0; k + 1];
            p[0] = general_counts.get(surface).copied().unwrap_or(0) as f64 + smoothing;
            for (jj, slot) in p.iter_mut().enumerate().skip(1) {
                if let Some(&pop) = kb.entities(jj).get(surface) {
                    *slot = pop as f64 + smoothing;
                }
            }
            let total: f64 = p.iter().sum();
            for v in &mut p {
                *v /= total;
            }
            prior.table.insert(surface.clone(), p);
        }
    }
    Ok(prior)
}

/// Removes `floor(fraction · total)` uniformly chosen `(type, surface)` entries.
/// Types are kept even when their list empties.
pub fn corrupt_kb(
    kb: &KnowledgeBase,
    fraction: f64,
    seed: u64,
) -> Result<(KnowledgeBase, Vec<RemovedEntity>)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("corruption fraction {fraction} outside [0, 1]")));
    }
    let all: Vec<(usize, &String)> = (1..=kb.num_types())
        .flat_map(|j| kb.entities(j).keys().map(move |s| (j, s)))
        .collect();
    let total = all.len();
    let amount = ((fraction * total as f64) + 1e-9).floor() as usize;
    let amount = amount.min(total);
    let mut rng = rng::stream(seed, &[rng::label::CORRUPT]);
    let mut picked: Vec<usize> = sample(&mut rng, total, amount).into_vec();
    picked.sort_unstable();

    let mut out = kb.clone();
    let mut removed = Vec::with_capacity(amount);
    for idx in picked {
        let (j, surface) = all[idx];
        out.entities[j - 1].remove(surface);
        removed.push(RemovedEntity {
            type_name: kb.types[j - 1].clone(),
            surface: surface.clone(),
        });
    }
    Ok((out, removed))
}
