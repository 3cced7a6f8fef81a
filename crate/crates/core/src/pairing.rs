//! Stage-2 input construction: perceivable pairs appended after the sentence,
//! marker tokens sharing their span boundary's position id, and the
//! restricted attention field.
//!
//! Layout of one compound sequence:
//!
//! ```text
//! [CLS] w_1 .. w_l [SEP] | T-B T-E O-B O-E | T-B T-E O-B O-E | ... | [SEP]
//! segment 0              | segment 1                                      |
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::encoder::EncoderInput;
use crate::error::{Error, Result};
use crate::extraction::SpanSets;
use crate::tensor::Mask;

/// Component removals used for ablation runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ablation {
    #[default]
    #[serde(rename = "none")]
    None,
    /// (a) pairs carry only end tags; fusion uses `T-E`/`O-E`.
    #[serde(rename = "a")]
    NoStartTags,
    /// (b) pairs carry only start tags.
    #[serde(rename = "b")]
    NoEndTags,
    /// (c) no tag segment; fusion uses each span's first word.
    #[serde(rename = "c")]
    NoTags,
    /// (d) all segment ids 0.
    #[serde(rename = "d")]
    MergedSegments,
    /// (e) marker rows see the sentence and every marker.
    #[serde(rename = "e")]
    OpenTagAttention,
    /// (f) every token sees every token.
    #[serde(rename = "f")]
    OpenAttention,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Ablation::None,
        Ablation::NoStartTags,
        Ablation::NoEndTags,
        Ablation::NoTags,
        Ablation::MergedSegments,
        Ablation::OpenTagAttention,
        Ablation::OpenAttention,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoStartTags => "a",
            Ablation::NoEndTags => "b",
            Ablation::NoTags => "c",
            Ablation::MergedSegments => "d",
            Ablation::OpenTagAttention => "e",
            Ablation::OpenAttention => "f",
        }
    }

    /// Marker kinds emitted per pair, in slot order.
    pub fn marker_kinds(self) -> &'static [MarkerKind] {
        use MarkerKind::*;
        match self {
            Ablation::NoStartTags => &[TargetEnd, OpinionEnd],
            Ablation::NoEndTags => &[TargetBegin, OpinionBegin],
            Ablation::NoTags => &[],
            _ => &[TargetBegin, TargetEnd, OpinionBegin, OpinionEnd],
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.code() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown ablation mode '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MarkerKind {
    TargetBegin = 0,
    TargetEnd = 1,
    OpinionBegin = 2,
    OpinionEnd = 3,
}

impl MarkerKind {
    pub const ALL: [MarkerKind; 4] = [
        MarkerKind::TargetBegin,
        MarkerKind::TargetEnd,
        MarkerKind::OpinionBegin,
        MarkerKind::OpinionEnd,
    ];

    pub fn token_id(self) -> usize {
        match self {
            MarkerKind::TargetBegin => Vocabulary::TARGET_BEGIN_ID,
            MarkerKind::TargetEnd => Vocabulary::TARGET_END_ID,
            MarkerKind::OpinionBegin => Vocabulary::OPINION_BEGIN_ID,
            MarkerKind::OpinionEnd => Vocabulary::OPINION_END_ID,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            MarkerKind::TargetBegin => "T-B",
            MarkerKind::TargetEnd => "T-E",
            MarkerKind::OpinionBegin => "O-B",
            MarkerKind::OpinionEnd => "O-E",
        }
    }
}

/// One (target `i`, opinion `j`) combination placed in a compound sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PerceivablePair {
    /// Index into `SpanSets::targets`.
    pub target: usize,
    /// Index into `SpanSets::opinions`.
    pub opinion: usize,
    /// Compound offset of each marker, indexed by [`MarkerKind`].
    pub slots: [Option<usize>; 4],
    /// Compound offsets whose hidden states form the pair representation
    /// (target side, opinion side).
    pub fusion: (usize, usize),
}

impl PerceivablePair {
    pub fn slot(&self, kind: MarkerKind) -> Option<usize> {
        self.slots[kind as usize]
    }

    pub fn marker_slots(&self) -> impl Iterator<Item = usize> + '_ {
        self.slots.iter().flatten().copied()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CompoundInput {
    pub input: EncoderInput,
    pub mask: Mask,
    pub sentence_len: usize,
    pub pairs: Vec<PerceivablePair>,
    /// Compound offset → word index for the sentence words.
    pub word_offsets: Vec<Option<usize>>,
    pub ablation: Ablation,
}

impl CompoundInput {
    pub fn len(&self) -> usize {
        self.input.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input.is_empty()
    }

    /// `[CLS] X [SEP]` occupies offsets `0..sentence_segment_len()`.
    pub fn sentence_segment_len(&self) -> usize {
        self.sentence_len + 2
    }

    /// Number of marker tokens (the tag segment without the trailing `[SEP]`).
    pub fn tag_segment_len(&self) -> usize {
        self.len() - self.sentence_segment_len() - 1
    }
}

/// All target × opinion combinations in row-major order (every opinion for
/// target 0, then target 1, ...).
pub fn build_pairs(spans: &SpanSets) -> Vec<(usize, usize)> {
    let n = spans.opinions.len();
    (0..spans.targets.len())
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .collect()
}

/// Pairs that fit in one compound sequence next to a sentence of `len` words.
pub fn chunk_capacity(len: usize, max_len: usize, ablation: Ablation) -> Result<usize> {
    let per_pair = ablation.marker_kinds().len();
    let base = len + 3;
    if base + per_pair > max_len {
        return Err(Error::SequenceTooLong {
            len: base + per_pair,
            max_len,
        });
    }
    Ok((max_len - base).checked_div(per_pair).unwrap_or(usize::MAX))
}

/// Builds the compound sequences for `pairs`, greedily packed in order and
/// split into as many chunks as `max_len` requires. Each chunk repeats the
/// sentence and is self-contained.
pub fn build_compound(
    word_ids: &[usize],
    spans: &SpanSets,
    pairs: &[(usize, usize)],
    max_len: usize,
    ablation: Ablation,
) -> Result<Vec<CompoundInput>> {
    let l = word_ids.len();
    let capacity = chunk_capacity(l, max_len, ablation)?;
    for &(i, j) in pairs {
        let t = spans.targets.get(i).ok_or(Error::IdOutOfRange {
            kind: "target",
            id: i,
            limit: spans.targets.len(),
        })?;
        let o = spans.opinions.get(j).ok_or(Error::IdOutOfRange {
            kind: "opinion",
            id: j,
            limit: spans.opinions.len(),
        })?;
        if t.end >= l || o.end >= l {
            return Err(Error::InvalidArgument(format!(
                "span out of range for {l} words"
            )));
        }
    }
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    pairs
        .chunks(capacity.min(pairs.len()))
        .map(|chunk| Ok(build_chunk(word_ids, spans, chunk, ablation)))
        .collect()
}

fn build_chunk(
    word_ids: &[usize],
    spans: &SpanSets,
    pairs: &[(usize, usize)],
    ablation: Ablation,
) -> CompoundInput {
    let l = word_ids.len();
    let kinds = ablation.marker_kinds();
    let total = l + 3 + kinds.len() * pairs.len();
    let tag_segment = if ablation == Ablation::MergedSegments {
        0
    } else {
        1
    };

    let mut input = EncoderInput {
        token_ids: Vec::with_capacity(total),
        position_ids: Vec::with_capacity(total),
        segment_ids: Vec::with_capacity(total),
    };
    let push = |input: &mut EncoderInput, tok, pos, seg| {
        input.token_ids.push(tok);
        input.position_ids.push(pos);
        input.segment_ids.push(seg);
    };
    push(&mut input, Vocabulary::CLS_ID, 0, 0);
    for (k, &w) in word_ids.iter().enumerate() {
        push(&mut input, w, k + 1, 0);
    }
    push(&mut input, Vocabulary::SEP_ID, l + 1, 0);

    let mut table = Vec::with_capacity(pairs.len());
    for &(i, j) in pairs {
        let (t, o) = (spans.targets[i], spans.opinions[j]);
        let mut slots = [None; 4];
        for &kind in kinds {
            // marker shares the position id of its span boundary word
            let word = match kind {
                MarkerKind::TargetBegin => t.start,
                MarkerKind::TargetEnd => t.end,
                MarkerKind::OpinionBegin => o.start,
                MarkerKind::OpinionEnd => o.end,
            };
            slots[kind as usize] = Some(input.len());
            push(&mut input, kind.token_id(), word + 1, tag_segment);
        }
        let fusion = match ablation {
            Ablation::NoTags => (t.start + 1, o.start + 1),
            Ablation::NoStartTags => (
                slots[MarkerKind::TargetEnd as usize].unwrap(),
                slots[MarkerKind::OpinionEnd as usize].unwrap(),
            ),
            _ => (
                slots[MarkerKind::TargetBegin as usize].unwrap(),
                slots[MarkerKind::OpinionBegin as usize].unwrap(),
            ),
        };
        table.push(PerceivablePair {
            target: i,
            opinion: j,
            slots,
            fusion,
        });
    }
    push(&mut input, Vocabulary::SEP_ID, l + 1, tag_segment);

    let word_offsets = (0..input.len())
        .map(|p| (1..=l).contains(&p).then(|| p - 1))
        .collect();
    let mut compound = CompoundInput {
        mask: Mask::new(0, 0, false),
        input,
        sentence_len: l,
        pairs: table,
        word_offsets,
        ablation,
    };
    compound.mask = build_attention_field(&compound);
    compound
}

/// Visibility matrix of a compound sequence.
///
/// Sentence-segment rows see exactly `[CLS] X [SEP]`; each marker row sees
/// `[CLS] X [SEP]` plus the slots of its own pair; the trailing `[SEP]` sees
/// `[CLS] X [SEP]` plus itself. Ablations (e) and (f) widen this.
pub fn build_attention_field(compound: &CompoundInput) -> Mask {
    let n = compound.len();
    if compound.ablation == Ablation::OpenAttention {
        return Mask::new(n, n, true);
    }
    let base = compound.sentence_segment_len();
    let trailing = n - 1;
    let mut owner = vec![None; n];
    for (p, pair) in compound.pairs.iter().enumerate() {
        for s in pair.marker_slots() {
            owner[s] = Some(p);
        }
    }
    let mut mask = Mask::new(n, n, false);
    for (r, own) in owner.iter().enumerate() {
        for c in 0..base {
            mask.set(r, c, true);
        }
        if r == trailing {
            mask.set(r, r, true);
        } else if let Some(p) = *own {
            if compound.ablation == Ablation::OpenTagAttention {
                for c in base..trailing {
                    mask.set(r, c, true);
                }
            } else {
                for c in compound.pairs[p].marker_slots() {
                    mask.set(r, c, true);
                }
            }
        }
    }
    mask
}
