//! Exact-match micro precision/recall/F1 over triplets, plus the
//! triplet-count and one-to-many breakdowns.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use serde::Serialize;

use crate::corpus::{Span, Triplet};
use crate::error::{Error, Result};
use crate::extraction::SpanSets;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl EvalReport {
    pub fn from_counts(tp: usize, predicted: usize, gold: usize) -> Self {
        debug_assert!(tp <= predicted.min(gold));
        let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, gold);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        EvalReport {
            precision,
            recall,
            f1,
            tp,
            predicted,
            gold,
        }
    }

    /// `key:value` lines, each key prefixed with `prefix`.
    pub fn to_text(&self, prefix: &str) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("precision", format!("{:.6}", self.precision)),
            ("recall", format!("{:.6}", self.recall)),
            ("f1", format!("{:.6}", self.f1)),
            ("tp", self.tp.to_string()),
            ("predicted", self.predicted.to_string()),
            ("gold", self.gold.to_string()),
        ] {
            let _ = writeln!(s, "{prefix}{k}:{v}");
        }
        s
    }
}

/// Per-sentence `(tp, predicted, gold)` with set semantics on both sides.
fn counts<T: Eq + std::hash::Hash>(pred: &[T], gold: &[T]) -> (usize, usize, usize) {
    let p: HashSet<&T> = pred.iter().collect();
    let g: HashSet<&T> = gold.iter().collect();
    (p.intersection(&g).count(), p.len(), g.len())
}

fn micro<T: Eq + std::hash::Hash>(pred: &[Vec<T>], gold: &[Vec<T>]) -> Result<EvalReport> {
    if pred.len() != gold.len() {
        return Err(Error::Shape(format!(
            "{} prediction sentences for {} gold sentences",
            pred.len(),
            gold.len()
        )));
    }
    let (mut tp, mut np, mut ng) = (0, 0, 0);
    for (p, g) in pred.iter().zip(gold) {
        let (a, b, c) = counts(p, g);
        tp += a;
        np += b;
        ng += c;
    }
    Ok(EvalReport::from_counts(tp, np, ng))
}

/// A predicted triplet is a hit iff both spans and the polarity equal some
/// gold triplet of the same sentence.
pub fn score(predictions: &[Vec<Triplet>], gold: &[Vec<Triplet>]) -> Result<EvalReport> {
    micro(predictions, gold)
}

/// Stage-1 span F1: a predicted span is a hit iff its kind and boundaries
/// match a gold span.
pub fn score_spans(predictions: &[SpanSets], gold: &[SpanSets]) -> Result<EvalReport> {
    let tag = |s: &SpanSets| -> Vec<(bool, Span)> {
        s.targets
            .iter()
            .map(|t| (true, *t))
            .chain(s.opinions.iter().map(|o| (false, *o)))
            .collect()
    };
    let p: Vec<_> = predictions.iter().map(tag).collect();
    let g: Vec<_> = gold.iter().map(tag).collect();
    micro(&p, &g)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BucketReport {
    /// `"1"`, `"2"`, ... or `">=N"` for the open last bucket.
    pub bucket: String,
    pub sentences: usize,
    #[serde(flatten)]
    pub report: EvalReport,
}

/// Buckets sentences by gold triplet count: `1, 2, ..., cap-1, >=cap`.
/// Sentences without gold triplets form no bucket. Empty buckets are kept so
/// the layout is stable.
pub fn breakdown_by_triplet_count(
    gold: &[Vec<Triplet>],
    predictions: &[Vec<Triplet>],
    cap: usize,
) -> Result<Vec<BucketReport>> {
    if gold.len() != predictions.len() {
        return Err(Error::Shape(format!(
            "{} prediction sentences for {} gold sentences",
            predictions.len(),
            gold.len()
        )));
    }
    if cap < 1 {
        return Err(Error::InvalidArgument(
            "bucket cap must be at least 1".into(),
        ));
    }
    let mut acc = vec![(0usize, 0usize, 0usize, 0usize); cap];
    for (g, p) in gold.iter().zip(predictions) {
        let n = g.iter().collect::<HashSet<_>>().len();
        if n == 0 {
            continue;
        }
        let b = n.min(cap) - 1;
        let (tp, np, ng) = counts(p, g);
        acc[b].0 += 1;
        acc[b].1 += tp;
        acc[b].2 += np;
        acc[b].3 += ng;
    }
    Ok(acc
        .into_iter()
        .enumerate()
        .map(|(b, (sentences, tp, np, ng))| BucketReport {
            bucket: if b + 1 == cap {
                format!(">={cap}")
            } else {
                (b + 1).to_string()
            },
            sentences,
            report: EvalReport::from_counts(tp, np, ng),
        })
        .collect())
}

pub const DEFAULT_BUCKET_CAP: usize = 4;

/// True iff some target span or some opinion span appears in two or more
/// distinct gold triplets.
pub fn is_one_to_many(gold: &[Triplet]) -> bool {
    let unique: HashSet<&Triplet> = gold.iter().collect();
    let mut targets: HashMap<Span, usize> = HashMap::new();
    let mut opinions: HashMap<Span, usize> = HashMap::new();
    for t in unique {
        *targets.entry(t.target).or_default() += 1;
        *opinions.entry(t.opinion).or_default() += 1;
    }
    targets.values().chain(opinions.values()).any(|&c| c >= 2)
}

/// Indices of the one-to-many sentences; apply them to gold and predictions
/// alike.
pub fn one_to_many_subset(gold: &[Vec<Triplet>]) -> Vec<usize> {
    gold.iter()
        .enumerate()
        .filter(|(_, g)| is_one_to_many(g))
        .map(|(i, _)| i)
        .collect()
}

pub fn select<T: Clone>(items: &[T], indices: &[usize]) -> Vec<T> {
    indices.iter().map(|&i| items[i].clone()).collect()
}
