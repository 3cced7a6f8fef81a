//! Stage 2: pair representations from marker hidden states, the 4-way
//! match/polarity head, and triplet assembly.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Polarity, Triplet};
use crate::encoder::{lookup, Dropout, Encoder, EncoderConfig, EncoderOutput};
use crate::error::{Error, Result};
use crate::extraction::{argmax, SpanSets};
use crate::pairing::{build_compound, build_pairs, Ablation, CompoundInput, PerceivablePair};
use crate::tensor::{cross_entropy, Array, ParamId, ParamStore, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MatchLabel {
    Pos,
    Neu,
    Neg,
    /// The pair does not form a triplet.
    O,
}

impl MatchLabel {
    pub const COUNT: usize = 4;
    pub const ALL: [MatchLabel; 4] = [
        MatchLabel::Pos,
        MatchLabel::Neu,
        MatchLabel::Neg,
        MatchLabel::O,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn polarity(self) -> Option<Polarity> {
        match self {
            MatchLabel::Pos => Some(Polarity::Pos),
            MatchLabel::Neu => Some(Polarity::Neu),
            MatchLabel::Neg => Some(Polarity::Neg),
            MatchLabel::O => None,
        }
    }
}

impl From<Polarity> for MatchLabel {
    fn from(p: Polarity) -> Self {
        match p {
            Polarity::Pos => MatchLabel::Pos,
            Polarity::Neu => MatchLabel::Neu,
            Polarity::Neg => MatchLabel::Neg,
        }
    }
}

impl fmt::Display for MatchLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.polarity() {
            Some(p) => write!(f, "{p}"),
            None => f.write_str("O"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairPrediction {
    pub target: usize,
    pub opinion: usize,
    pub dist: [f64; 4],
    pub label: MatchLabel,
}

impl PairPrediction {
    pub fn new(target: usize, opinion: usize, row: &[f64]) -> Self {
        let dist = [row[0], row[1], row[2], row[3]];
        PairPrediction {
            target,
            opinion,
            dist,
            label: MatchLabel::ALL[argmax(&dist)],
        }
    }

    pub fn probability(&self) -> f64 {
        self.dist[self.label.index()]
    }
}

/// `[h_target_side ; h_opinion_side]` read directly from final hidden states.
pub fn pair_representation(hidden: &Array, pair: &PerceivablePair) -> Result<Vec<f64>> {
    let (a, b) = pair.fusion;
    for s in [a, b] {
        if s >= hidden.rows() {
            return Err(Error::IdOutOfRange {
                kind: "slot",
                id: s,
                limit: hidden.rows(),
            });
        }
    }
    Ok([hidden.row(a), hidden.row(b)].concat())
}

/// Row-major `targets × opinions` labels: a cell carries a polarity iff some
/// gold triplet has exactly that target span and opinion span.
pub fn gold_grid(spans: &SpanSets, triplets: &[Triplet]) -> Vec<MatchLabel> {
    build_pairs(spans)
        .into_iter()
        .map(|(i, j)| {
            triplets
                .iter()
                .find(|t| t.target == spans.targets[i] && t.opinion == spans.opinions[j])
                .map_or(MatchLabel::O, |t| t.polarity.into())
        })
        .collect()
}

/// Summed cross-entropy over a grid of distributions, outside any tape.
pub fn matching_loss_value(dists: &[[f64; 4]], grid: &[MatchLabel]) -> Result<f64> {
    if dists.len() != grid.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} grid cells",
            dists.len(),
            grid.len()
        )));
    }
    Ok(dists
        .iter()
        .zip(grid)
        .map(|(d, g)| cross_entropy(d, g.index()))
        .sum())
}

/// Non-`O` predictions become triplets; `O` pairs are dropped.
pub fn assemble_triplets(predictions: &[PairPrediction], spans: &SpanSets) -> Vec<Triplet> {
    predictions
        .iter()
        .filter_map(|p| {
            p.label
                .polarity()
                .map(|pol| Triplet::new(spans.targets[p.target], spans.opinions[p.opinion], pol))
        })
        .collect()
}

/// Encoder plus the linear 4-way head over fused pair representations.
#[derive(Clone, Debug)]
pub struct Matcher {
    pub encoder: Encoder,
    weight: ParamId,
    bias: ParamId,
}

impl Matcher {
    pub const PREFIX: &'static str = "match";

    pub fn new<R: Rng>(config: EncoderConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let (d, std) = (config.hidden, config.init_std);
        let encoder = Encoder::new(config, store, &format!("{}.encoder", Self::PREFIX), rng)?;
        let weight = store.add_normal(
            format!("{}.head.weight", Self::PREFIX),
            &[2 * d, MatchLabel::COUNT],
            std,
            rng,
        );
        let bias = store.add_constant(
            format!("{}.head.bias", Self::PREFIX),
            &[MatchLabel::COUNT],
            0.0,
        );
        Ok(Matcher {
            encoder,
            weight,
            bias,
        })
    }

    pub fn bind(config: EncoderConfig, store: &ParamStore) -> Result<Self> {
        Ok(Matcher {
            encoder: Encoder::bind(config, store, &format!("{}.encoder", Self::PREFIX))?,
            weight: lookup(store, &format!("{}.head.weight", Self::PREFIX))?,
            bias: lookup(store, &format!("{}.head.bias", Self::PREFIX))?,
        })
    }

    pub fn head_weight(&self) -> ParamId {
        self.weight
    }

    pub fn head_bias(&self) -> ParamId {
        self.bias
    }

    /// `softmax(reps · W_m + b_m)` for `[pairs, 2d]` representations.
    pub fn match_logits(&self, tape: &mut Tape, reps: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let logits = tape.matmul(reps, w)?;
        let logits = tape.add_bias(logits, b)?;
        tape.softmax(logits)
    }

    /// One encoder pass over a compound chunk and the `[pairs, 4]`
    /// distributions of every pair in it.
    pub fn forward(
        &self,
        tape: &mut Tape,
        compound: &CompoundInput,
        keep_attention: bool,
        dropout: Option<&mut Dropout>,
    ) -> Result<(EncoderOutput, Var)> {
        let out = self.encoder.forward(
            tape,
            &compound.input,
            &compound.mask,
            keep_attention,
            dropout,
        )?;
        let fusion: Vec<(usize, usize)> = compound.pairs.iter().map(|p| p.fusion).collect();
        let reps = tape.pair_concat(out.hidden, &fusion)?;
        let dists = self.match_logits(tape, reps)?;
        Ok((out, dists))
    }

    /// Sentence matching loss: cross-entropy summed over every pair of every
    /// chunk. `grid` is row-major over `(target, opinion)` with `opinions`
    /// columns. Returns `None` when there are no pairs.
    pub fn loss(
        &self,
        tape: &mut Tape,
        chunks: &[CompoundInput],
        grid: &[MatchLabel],
        opinions: usize,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<Option<Var>> {
        let mut parts = Vec::with_capacity(chunks.len());
        for c in chunks {
            let (_, dists) = self.forward(tape, c, false, dropout.as_deref_mut())?;
            let gold: Vec<usize> = c
                .pairs
                .iter()
                .map(|p| grid[p.target * opinions + p.opinion].index())
                .collect();
            parts.push(tape.cross_entropy(dists, &gold)?);
        }
        if parts.is_empty() {
            return Ok(None);
        }
        Ok(Some(tape.sum(&parts)?))
    }

    /// Distributions for every target × opinion pair, in row-major order.
    pub fn predict(
        &self,
        store: &ParamStore,
        word_ids: &[usize],
        spans: &SpanSets,
        ablation: Ablation,
    ) -> Result<Vec<PairPrediction>> {
        let pairs = build_pairs(spans);
        let chunks = build_compound(
            word_ids,
            spans,
            &pairs,
            self.encoder.config().max_len,
            ablation,
        )?;
        let mut out = Vec::with_capacity(pairs.len());
        for c in &chunks {
            let mut tape = Tape::new(store);
            let (_, dists) = self.forward(&mut tape, c, false, None)?;
            let d = tape.value(dists);
            for (k, p) in c.pairs.iter().enumerate() {
                out.push(PairPrediction::new(p.target, p.opinion, d.row(k)));
            }
        }
        Ok(out)
    }
}
