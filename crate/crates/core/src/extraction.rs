//! Stage 1: joint target/opinion tagging with a 9-label BIOES scheme.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotatedSentence, Span, Vocabulary};
use crate::encoder::{lookup, Dropout, Encoder, EncoderConfig, EncoderInput};
use crate::error::{Error, Result};
use crate::tensor::{cross_entropy, Array, Mask, ParamId, ParamStore, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TagLabel {
    BeginTarget,
    InsideTarget,
    EndTarget,
    SingleTarget,
    BeginOpinion,
    InsideOpinion,
    EndOpinion,
    SingleOpinion,
    Outside,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpanKind {
    Target,
    Opinion,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Part {
    Begin,
    Inside,
    End,
    Single,
}

impl TagLabel {
    pub const COUNT: usize = 9;

    pub const ALL: [TagLabel; 9] = [
        TagLabel::BeginTarget,
        TagLabel::InsideTarget,
        TagLabel::EndTarget,
        TagLabel::SingleTarget,
        TagLabel::BeginOpinion,
        TagLabel::InsideOpinion,
        TagLabel::EndOpinion,
        TagLabel::SingleOpinion,
        TagLabel::Outside,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TagLabel::BeginTarget => "B-T",
            TagLabel::InsideTarget => "I-T",
            TagLabel::EndTarget => "E-T",
            TagLabel::SingleTarget => "S-T",
            TagLabel::BeginOpinion => "B-O",
            TagLabel::InsideOpinion => "I-O",
            TagLabel::EndOpinion => "E-O",
            TagLabel::SingleOpinion => "S-O",
            TagLabel::Outside => "O",
        }
    }

    fn split(self) -> Option<(SpanKind, Part)> {
        use TagLabel::*;
        Some(match self {
            BeginTarget => (SpanKind::Target, Part::Begin),
            InsideTarget => (SpanKind::Target, Part::Inside),
            EndTarget => (SpanKind::Target, Part::End),
            SingleTarget => (SpanKind::Target, Part::Single),
            BeginOpinion => (SpanKind::Opinion, Part::Begin),
            InsideOpinion => (SpanKind::Opinion, Part::Inside),
            EndOpinion => (SpanKind::Opinion, Part::End),
            SingleOpinion => (SpanKind::Opinion, Part::Single),
            Outside => return None,
        })
    }

    fn join(kind: SpanKind, part: Part) -> Self {
        use TagLabel::*;
        match (kind, part) {
            (SpanKind::Target, Part::Begin) => BeginTarget,
            (SpanKind::Target, Part::Inside) => InsideTarget,
            (SpanKind::Target, Part::End) => EndTarget,
            (SpanKind::Target, Part::Single) => SingleTarget,
            (SpanKind::Opinion, Part::Begin) => BeginOpinion,
            (SpanKind::Opinion, Part::Inside) => InsideOpinion,
            (SpanKind::Opinion, Part::End) => EndOpinion,
            (SpanKind::Opinion, Part::Single) => SingleOpinion,
        }
    }
}

impl fmt::Display for TagLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Extracted target and opinion spans, each list sorted by start.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanSets {
    pub targets: Vec<Span>,
    pub opinions: Vec<Span>,
}

impl SpanSets {
    pub fn new(mut targets: Vec<Span>, mut opinions: Vec<Span>) -> Self {
        targets.sort();
        opinions.sort();
        SpanSets { targets, opinions }
    }

    /// Gold spans of a sentence, reduced to a taggable set: duplicates are
    /// merged, and a span overlapping an already kept span (targets first,
    /// then opinions; longest first at equal start) is dropped. Returns the
    /// number of dropped spans alongside.
    pub fn from_gold(sentence: &AnnotatedSentence) -> (Self, usize) {
        let mut dropped = 0;
        let mut kept: Vec<Span> = Vec::new();
        let mut pick = |mut spans: Vec<Span>| {
            spans.sort_by(|a, b| a.start.cmp(&b.start).then(b.end.cmp(&a.end)));
            spans.dedup();
            let mut out = Vec::new();
            for s in spans {
                if kept.iter().any(|k| k.overlaps(&s)) {
                    dropped += 1;
                } else {
                    kept.push(s);
                    out.push(s);
                }
            }
            out
        };
        let targets = pick(sentence.triplets.iter().map(|t| t.target).collect());
        let opinions = pick(sentence.triplets.iter().map(|t| t.opinion).collect());
        (SpanSets::new(targets, opinions), dropped)
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty() && self.opinions.is_empty()
    }
}

/// Gold BIOES labels for `spans` over a sentence of `len` words.
pub fn encode_spans(spans: &SpanSets, len: usize) -> Result<Vec<TagLabel>> {
    let mut labels = vec![TagLabel::Outside; len];
    let mut owner: Vec<Option<Span>> = vec![None; len];
    let all = spans
        .targets
        .iter()
        .map(|s| (SpanKind::Target, s))
        .chain(spans.opinions.iter().map(|s| (SpanKind::Opinion, s)));
    for (kind, span) in all {
        if span.start > span.end || span.end >= len {
            return Err(Error::InvalidArgument(format!(
                "span {span} invalid for length {len}"
            )));
        }
        for i in span.indices() {
            if let Some(prev) = owner[i] {
                return Err(Error::OverlappingSpans {
                    first: prev.to_string(),
                    second: span.to_string(),
                });
            }
            owner[i] = Some(*span);
            let part = if span.start == span.end {
                Part::Single
            } else if i == span.start {
                Part::Begin
            } else if i == span.end {
                Part::End
            } else {
                Part::Inside
            };
            labels[i] = TagLabel::join(kind, part);
        }
    }
    Ok(labels)
}

/// Strict decoding: only `S-x` or `B-x (I-x)* E-x` runs become spans; every
/// other fragment is discarded.
pub fn decode_spans(labels: &[TagLabel]) -> SpanSets {
    let mut out = SpanSets::default();
    let mut push = |kind, span| match kind {
        SpanKind::Target => out.targets.push(span),
        SpanKind::Opinion => out.opinions.push(span),
    };
    let mut i = 0;
    while i < labels.len() {
        match labels[i].split() {
            Some((kind, Part::Single)) => {
                push(kind, Span::single(i));
                i += 1;
            }
            Some((kind, Part::Begin)) => {
                let mut j = i + 1;
                while j < labels.len() && labels[j].split() == Some((kind, Part::Inside)) {
                    j += 1;
                }
                if j < labels.len() && labels[j].split() == Some((kind, Part::End)) {
                    push(kind, Span::new(i, j));
                    i = j + 1;
                } else {
                    // unterminated run; resume at the token that broke it
                    i = j;
                }
            }
            _ => i += 1,
        }
    }
    out
}

/// Index of the largest entry; ties go to the lowest index.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `[CLS] w_1 .. w_l [SEP]` with sequential positions, all segment 0.
pub fn sentence_input(word_ids: &[usize]) -> EncoderInput {
    let mut token_ids = Vec::with_capacity(word_ids.len() + 2);
    token_ids.push(Vocabulary::CLS_ID);
    token_ids.extend_from_slice(word_ids);
    token_ids.push(Vocabulary::SEP_ID);
    let n = token_ids.len();
    EncoderInput {
        token_ids,
        position_ids: (0..n).collect(),
        segment_ids: vec![0; n],
    }
}

/// Encoder plus a per-word linear classifier over the 9 tags.
#[derive(Clone, Debug)]
pub struct Tagger {
    pub encoder: Encoder,
    weight: ParamId,
    bias: ParamId,
}

impl Tagger {
    pub const PREFIX: &'static str = "extract";

    pub fn new<R: Rng>(config: EncoderConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let std = config.init_std;
        let d = config.hidden;
        let encoder = Encoder::new(config, store, &format!("{}.encoder", Self::PREFIX), rng)?;
        let weight = store.add_normal(
            format!("{}.head.weight", Self::PREFIX),
            &[d, TagLabel::COUNT],
            std,
            rng,
        );
        let bias = store.add_constant(
            format!("{}.head.bias", Self::PREFIX),
            &[TagLabel::COUNT],
            0.0,
        );
        Ok(Tagger {
            encoder,
            weight,
            bias,
        })
    }

    pub fn bind(config: EncoderConfig, store: &ParamStore) -> Result<Self> {
        Ok(Tagger {
            encoder: Encoder::bind(config, store, &format!("{}.encoder", Self::PREFIX))?,
            weight: lookup(store, &format!("{}.head.weight", Self::PREFIX))?,
            bias: lookup(store, &format!("{}.head.bias", Self::PREFIX))?,
        })
    }

    /// Per-word tag distributions `[l, 9]`; `[CLS]`/`[SEP]` are not classified.
    pub fn tag_distributions(
        &self,
        tape: &mut Tape,
        word_ids: &[usize],
        dropout: Option<&mut Dropout>,
    ) -> Result<Var> {
        let input = sentence_input(word_ids);
        let n = input.len();
        if n > self.encoder.config().max_len {
            return Err(Error::SequenceTooLong {
                len: n,
                max_len: self.encoder.config().max_len,
            });
        }
        let out = self
            .encoder
            .forward(tape, &input, &Mask::new(n, n, true), false, dropout)?;
        let words: Vec<usize> = (1..=word_ids.len()).collect();
        let reps = tape.gather_rows(out.hidden, &words)?;
        self.tag_logits(tape, reps)
    }

    /// `softmax(reps · W_e + b_e)` row by row.
    pub fn tag_logits(&self, tape: &mut Tape, reps: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let logits = tape.matmul(reps, w)?;
        let logits = tape.add_bias(logits, b)?;
        tape.softmax(logits)
    }

    /// Sentence loss: summed per-word cross-entropy.
    pub fn loss(
        &self,
        tape: &mut Tape,
        word_ids: &[usize],
        gold: &[TagLabel],
        dropout: Option<&mut Dropout>,
    ) -> Result<Var> {
        let dists = self.tag_distributions(tape, word_ids, dropout)?;
        extraction_loss(tape, dists, gold)
    }

    pub fn predict_labels(&self, store: &ParamStore, word_ids: &[usize]) -> Result<Vec<TagLabel>> {
        let mut tape = Tape::new(store);
        let d = self.tag_distributions(&mut tape, word_ids, None)?;
        let d = tape.value(d);
        Ok((0..d.rows())
            .map(|r| TagLabel::ALL[argmax(d.row(r))])
            .collect())
    }

    pub fn predict_spans(&self, store: &ParamStore, word_ids: &[usize]) -> Result<SpanSets> {
        Ok(decode_spans(&self.predict_labels(store, word_ids)?))
    }
}

pub fn extraction_loss(tape: &mut Tape, dists: Var, gold: &[TagLabel]) -> Result<Var> {
    let gold: Vec<usize> = gold.iter().map(|l| l.index()).collect();
    tape.cross_entropy(dists, &gold)
}

/// Summed cross-entropy of plain distributions, outside any tape.
pub fn extraction_loss_value(dists: &Array, gold: &[TagLabel]) -> Result<f64> {
    if dists.rows() != gold.len() {
        return Err(Error::Shape(format!(
            "{} distributions for {} labels",
            dists.rows(),
            gold.len()
        )));
    }
    Ok(gold
        .iter()
        .enumerate()
        .map(|(r, g)| cross_entropy(dists.row(r), g.index()))
        .sum())
}
