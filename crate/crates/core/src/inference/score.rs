use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use super::OUTSIDE;
use crate::corpus::TaggedTokens;
use crate::error::{Error, Result};

/// Half-open token range `[start, end)` carrying an entity label.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

/// Maximal runs of identical non-`O` labels.
pub fn predicted_spans<S: AsRef<str>>(tags: &[S]) -> Vec<Span> {
    let mut spans: Vec<Span> = Vec::new();
    for (i, tag) in tags.iter().enumerate() {
        let tag = tag.as_ref();
        if tag == OUTSIDE {
            continue;
        }
        match spans.last_mut() {
            Some(s) if s.end == i && s.label == tag => s.end = i + 1,
            _ => spans.push(Span {
                start: i,
                end: i + 1,
                label: tag.to_string(),
            }),
        }
    }
    spans
}

fn split_tag(tag: &str) -> (Option<char>, &str) {
    match tag.split_once('-') {
        Some((p, label)) if p == "B" || p == "I" => (p.chars().next(), label),
        _ => (None, tag),
    }
}

/// Entity spans of a gold tag sequence. `B-X` always opens a span; `I-X`
/// continues a preceding `X` span and opens one otherwise; bare labels are
/// merged like predictions.
pub fn gold_spans<S: AsRef<str>>(tags: &[S]) -> Vec<Span> {
    let mut spans: Vec<Span> = Vec::new();
    for (i, tag) in tags.iter().enumerate() {
        let tag = tag.as_ref();
        if tag == OUTSIDE {
            continue;
        }
        let (prefix, label) = split_tag(tag);
        let continues = prefix != Some('B')
            && matches!(spans.last(), Some(s) if s.end == i && s.label == label);
        if continues {
            spans.last_mut().expect("checked").end = i + 1;
        } else {
            spans.push(Span {
                start: i,
                end: i + 1,
                label: label.to_string(),
            });
        }
    }
    spans
}

/// Renames predicted KB type names into the gold label set. Types without an
/// entry keep their name; mapping a type to `O` drops it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TypeMapping {
    map: HashMap<String, String>,
}

impl TypeMapping {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, from: &str, to: &str) {
        self.map.insert(from.to_string(), to.to_string());
    }

    pub fn apply<'a>(&'a self, label: &'a str) -> &'a str {
        self.map.get(label).map(String::as_str).unwrap_or(label)
    }

    /// Two whitespace-separated columns per line: KB type, gold label.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut out = Self::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 2 {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    message: format!("expected 2 columns, found {}", fields.len()),
                });
            }
            out.insert(fields[0], fields[1]);
        }
        Ok(out)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub true_pos: usize,
    pub false_pos: usize,
    pub false_neg: usize,
}

impl Counts {
    /// Zero when nothing was predicted.
    pub fn precision(&self) -> f64 {
        ratio(self.true_pos, self.true_pos + self.false_pos)
    }

    /// Zero when there is nothing to find.
    pub fn recall(&self) -> f64 {
        ratio(self.true_pos, self.true_pos + self.false_neg)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    fn add(&mut self, other: &Counts) {
        self.true_pos += other.true_pos;
        self.false_pos += other.false_pos;
        self.false_neg += other.false_neg;
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct NerScores {
    /// Span-level counts per gold/predicted label.
    pub per_type: BTreeMap<String, Counts>,
    /// Micro-average over all span labels.
    pub overall: Counts,
    /// Token-level counts, ignoring span boundaries.
    pub token_level: Counts,
}

impl NerScores {
    pub fn f1(&self) -> f64 {
        self.overall.f1()
    }

    pub fn token_f1(&self) -> f64 {
        self.token_level.f1()
    }

    fn rows(&self) -> Vec<(&str, &Counts)> {
        self.per_type
            .iter()
            .map(|(k, v)| (k.as_str(), v))
            .chain([("overall", &self.overall), ("token-level", &self.token_level)])
            .collect()
    }

    /// Aligned plain-text table.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<12} {:>9} {:>9} {:>9} {:>6} {:>6} {:>6}\n",
            "type", "precision", "recall", "f1", "tp", "fp", "fn"
        );
        for (name, c) in self.rows() {
            let _ = writeln!(
                out,
                "{:<12} {:>9.4} {:>9.4} {:>9.4} {:>6} {:>6} {:>6}",
                name,
                c.precision(),
                c.recall(),
                c.f1(),
                c.true_pos,
                c.false_pos,
                c.false_neg
            );
        }
        out
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("type\tprecision\trecall\tf1\ttp\tfp\tfn\n");
        for (name, c) in self.rows() {
            let _ = writeln!(
                out,
                "{name}\t{}\t{}\t{}\t{}\t{}\t{}",
                c.precision(),
                c.recall(),
                c.f1(),
                c.true_pos,
                c.false_pos,
                c.false_neg
            );
        }
        out
    }
}

fn strip(tag: &str) -> &str {
    split_tag(tag).1
}

/// Exact span-and-label matching, micro-averaged, plus token-level counts.
/// Predicted labels go through `mapping` first.
pub fn score_ner(
    predicted: &[TaggedTokens],
    gold: &[TaggedTokens],
    mapping: Option<&TypeMapping>,
) -> Result<NerScores> {
    if predicted.len() != gold.len() {
        return Err(Error::Data(format!(
            "{} predicted sentences but {} gold sentences",
            predicted.len(),
            gold.len()
        )));
    }
    let mut scores = NerScores::default();
    for (i, (p, g)) in predicted.iter().zip(gold).enumerate() {
        if p.tokens != g.tokens || p.tags.len() != g.tags.len() {
            let first = g.tokens.first().map(String::as_str).unwrap_or("");
            return Err(Error::Data(format!(
                "sentence {} (starting {first:?}) is not aligned: {} predicted tokens, {} gold",
                i + 1,
                p.tokens.len(),
                g.tokens.len()
            )));
        }
        let mapped: Vec<&str> = p
            .tags
            .iter()
            .map(|t| mapping.map_or(t.as_str(), |m| m.apply(t)))
            .collect();
        let pred: BTreeSet<Span> = predicted_spans(&mapped).into_iter().collect();
        let gold_set: BTreeSet<Span> = gold_spans(&g.tags).into_iter().collect();
        for s in &pred {
            let c = scores.per_type.entry(s.label.clone()).or_default();
            if gold_set.contains(s) {
                c.true_pos += 1;
            } else {
                c.false_pos += 1;
            }
        }
        for s in gold_set.difference(&pred) {
            scores.per_type.entry(s.label.clone()).or_default().false_neg += 1;
        }
        for (pt, gt) in mapped.iter().zip(&g.tags) {
            let gt = strip(gt);
            let pt = *pt;
            if pt != OUTSIDE && pt == gt {
                scores.token_level.true_pos += 1;
                continue;
            }
            if pt != OUTSIDE {
                scores.token_level.false_pos += 1;
            }
            if gt != OUTSIDE {
                scores.token_level.false_neg += 1;
            }
        }
    }
    let mut overall = Counts::default();
    for c in scores.per_type.values() {
        overall.add(c);
    }
    scores.overall = overall;
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sent(tokens: &[&str], tags: &[&str]) -> TaggedTokens {
        TaggedTokens {
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            tags: tags.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn spans_from_runs_and_bio() {
        let p = predicted_spans(&["PER", "PER", "O", "LOC", "PER"]);
        assert_eq!(p.len(), 3);
        assert_eq!((p[0].start, p[0].end), (0, 2));
        let g = gold_spans(&["B-PER", "I-PER", "B-PER", "O", "I-LOC", "I-LOC"]);
        let got: Vec<_> = g.iter().map(|s| (s.start, s.end, s.label.as_str())).collect();
        assert_eq!(got, vec![(0, 2, "PER"), (2, 3, "PER"), (4, 6, "LOC")]);
    }

    #[test]
    fn identical_predictions_score_one() {
        let g = sent(&["a", "b", "c"], &["B-PER", "O", "B-LOC"]);
        let p = sent(&["a", "b", "c"], &["PER", "O", "LOC"]);
        let s = score_ner(&[p], &[g], None).unwrap();
        assert_eq!(s.f1(), 1.0);
        assert!(s.per_type.values().all(|c| c.f1() == 1.0));
        assert_eq!(s.token_f1(), 1.0);
    }

    #[test]
    fn all_outside_predictions_score_zero() {
        let g = sent(&["a", "b"], &["B-PER", "O"]);
        let p = sent(&["a", "b"], &["O", "O"]);
        let s = score_ner(&[p], &[g], None).unwrap();
        assert_eq!(s.overall.recall(), 0.0);
        assert_eq!(s.f1(), 0.0);
    }

    #[test]
    fn half_matched_fixture() {
        // gold: [0,2) PER and [3,4) LOC; predicted: [0,2) PER and [3,5) LOC
        let g = sent(&["a", "b", "c", "d", "e"], &["B-PER", "I-PER", "O", "B-LOC", "O"]);
        let p = sent(&["a", "b", "c", "d", "e"], &["PER", "PER", "O", "LOC", "LOC"]);
        let s = score_ner(&[p], &[g], None).unwrap();
        assert_eq!(s.overall.precision(), 0.5);
        assert_eq!(s.overall.recall(), 0.5);
        assert_eq!(s.f1(), 0.5);
    }

    #[test]
    fn mapping_renames_predictions() {
        let g = sent(&["a"], &["B-PER"]);
        let p = sent(&["a"], &["person"]);
        let mut m = TypeMapping::new();
        m.insert("person", "PER");
        assert_eq!(score_ner(&[p.clone()], &[g.clone()], Some(&m)).unwrap().f1(), 1.0);
        assert_eq!(score_ner(&[p], &[g], None).unwrap().f1(), 0.0);
    }

    #[test]
    fn misalignment_names_the_sentence() {
        let g = sent(&["a", "b"], &["O", "O"]);
        let p = sent(&["a"], &["O"]);
        let err = score_ner(&[g.clone(), p], &[g.clone(), g], None).unwrap_err();
        assert!(err.to_string().contains("sentence 2"), "{err}");
    }
}
