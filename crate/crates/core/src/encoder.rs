//! Transformer encoder with token, position, and segment embeddings and an
//! explicit per-pass boolean attention mask.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Array, Mask, ParamId, ParamStore, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub segments: usize,
    pub dropout: f64,
    /// Standard deviation of the normal initializer for weight matrices.
    pub init_std: f64,
}

impl EncoderConfig {
    /// d=64, 2 layers, 4 heads, FFN 256, max length 256.
    pub fn desk(vocab_size: usize) -> Self {
        EncoderConfig {
            hidden: 64,
            layers: 2,
            heads: 4,
            ffn: 256,
            max_len: 256,
            vocab_size,
            segments: 2,
            dropout: 0.1,
            init_std: 0.02,
        }
    }

    /// Small enough for exhaustive finite-difference checks.
    pub fn tiny(vocab_size: usize) -> Self {
        EncoderConfig {
            hidden: 8,
            layers: 1,
            heads: 2,
            ffn: 16,
            max_len: 64,
            vocab_size,
            segments: 2,
            dropout: 0.0,
            init_std: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return bad(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden, self.heads
            ));
        }
        if self.max_len == 0 || self.vocab_size == 0 || self.segments == 0 || self.ffn == 0 {
            return bad("encoder dimensions must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// The three parallel id sequences fed to [`Encoder::embed`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EncoderInput {
    pub token_ids: Vec<usize>,
    pub position_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
}

impl EncoderInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Inverted dropout driven by a caller-owned generator.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let mut m = Array::zeros(tape.value(x).shape());
        for v in m.data_mut() {
            *v = if self.rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            };
        }
        tape.mul_const(x, m)
    }
}

pub struct EncoderOutput {
    /// Final hidden states, `[seq, hidden]`.
    pub hidden: Var,
    /// One `[heads, seq, seq]` array per layer when retention was requested.
    pub attention: Option<Vec<Array>>,
}

#[derive(Clone, Debug)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        shape: [usize; 2],
        std: f64,
        rng: &mut R,
    ) -> Self {
        Linear {
            weight: store.add_normal(format!("{name}.weight"), &shape, std, rng),
            bias: store.add_constant(format!("{name}.bias"), &[shape[1]], 0.0),
        }
    }

    fn bind(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(Linear {
            weight: lookup(store, &format!("{name}.weight"))?,
            bias: lookup(store, &format!("{name}.bias"))?,
        })
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}

#[derive(Clone, Debug)]
struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            gamma: store.add_constant(format!("{name}.gamma"), &[d], 1.0),
            beta: store.add_constant(format!("{name}.beta"), &[d], 0.0),
        }
    }

    fn bind(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(LayerNorm {
            gamma: lookup(store, &format!("{name}.gamma"))?,
            beta: lookup(store, &format!("{name}.beta"))?,
        })
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b)
    }
}

#[derive(Clone, Debug)]
struct Layer {
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    attn_norm: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
    ffn_norm: LayerNorm,
}

pub(crate) fn lookup(store: &ParamStore, name: &str) -> Result<ParamId> {
    store
        .id(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
}

#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    token_emb: ParamId,
    position_emb: ParamId,
    segment_emb: ParamId,
    emb_norm: LayerNorm,
    layers: Vec<Layer>,
}

impl Encoder {
    /// Registers freshly initialized parameters under `prefix`.
    pub fn new<R: Rng>(
        config: EncoderConfig,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let (d, std) = (config.hidden, config.init_std);
        let token_emb = store.add_normal(
            format!("{prefix}.embeddings.token"),
            &[config.vocab_size, d],
            std,
            rng,
        );
        let position_emb = store.add_normal(
            format!("{prefix}.embeddings.position"),
            &[config.max_len, d],
            std,
            rng,
        );
        let segment_emb = store.add_normal(
            format!("{prefix}.embeddings.segment"),
            &[config.segments, d],
            std,
            rng,
        );
        let emb_norm = LayerNorm::new(store, &format!("{prefix}.embeddings.norm"), d);
        let layers = (0..config.layers)
            .map(|l| {
                let p = format!("{prefix}.layer{l}");
                Layer {
                    query: Linear::new(store, &format!("{p}.attn.query"), [d, d], std, rng),
                    key: Linear::new(store, &format!("{p}.attn.key"), [d, d], std, rng),
                    value: Linear::new(store, &format!("{p}.attn.value"), [d, d], std, rng),
                    output: Linear::new(store, &format!("{p}.attn.output"), [d, d], std, rng),
                    attn_norm: LayerNorm::new(store, &format!("{p}.attn.norm"), d),
                    ffn_in: Linear::new(store, &format!("{p}.ffn.in"), [d, config.ffn], std, rng),
                    ffn_out: Linear::new(store, &format!("{p}.ffn.out"), [config.ffn, d], std, rng),
                    ffn_norm: LayerNorm::new(store, &format!("{p}.ffn.norm"), d),
                }
            })
            .collect();
        Ok(Encoder {
            config,
            token_emb,
            position_emb,
            segment_emb,
            emb_norm,
            layers,
        })
    }

    /// Re-attaches to parameters already present in `store` (checkpoint load).
    pub fn bind(config: EncoderConfig, store: &ParamStore, prefix: &str) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.layers)
            .map(|l| {
                let p = format!("{prefix}.layer{l}");
                Ok(Layer {
                    query: Linear::bind(store, &format!("{p}.attn.query"))?,
                    key: Linear::bind(store, &format!("{p}.attn.key"))?,
                    value: Linear::bind(store, &format!("{p}.attn.value"))?,
                    output: Linear::bind(store, &format!("{p}.attn.output"))?,
                    attn_norm: LayerNorm::bind(store, &format!("{p}.attn.norm"))?,
                    ffn_in: Linear::bind(store, &format!("{p}.ffn.in"))?,
                    ffn_out: Linear::bind(store, &format!("{p}.ffn.out"))?,
                    ffn_norm: LayerNorm::bind(store, &format!("{p}.ffn.norm"))?,
                })
            })
            .collect::<Result<_>>()?;
        let enc = Encoder {
            token_emb: lookup(store, &format!("{prefix}.embeddings.token"))?,
            position_emb: lookup(store, &format!("{prefix}.embeddings.position"))?,
            segment_emb: lookup(store, &format!("{prefix}.embeddings.segment"))?,
            emb_norm: LayerNorm::bind(store, &format!("{prefix}.embeddings.norm"))?,
            layers,
            config,
        };
        let shape = store.get(enc.token_emb).value.shape();
        if shape != [enc.config.vocab_size, enc.config.hidden] {
            return Err(Error::Checkpoint(format!(
                "token embedding shape {shape:?} disagrees with config"
            )));
        }
        Ok(enc)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Sum of token, position, and segment embeddings, layer-normalized.
    pub fn embed(&self, tape: &mut Tape, input: &EncoderInput) -> Result<Var> {
        let n = input.token_ids.len();
        if input.position_ids.len() != n || input.segment_ids.len() != n {
            return Err(Error::Shape(format!(
                "id sequences of lengths {n}/{}/{}",
                input.position_ids.len(),
                input.segment_ids.len()
            )));
        }
        let check = |kind, ids: &[usize], limit| match ids.iter().find(|&&i| i >= limit) {
            Some(&id) => Err(Error::IdOutOfRange { kind, id, limit }),
            None => Ok(()),
        };
        check("token", &input.token_ids, self.config.vocab_size)?;
        check("position", &input.position_ids, self.config.max_len)?;
        check("segment", &input.segment_ids, self.config.segments)?;

        let (tok, pos, seg) = (
            tape.param(self.token_emb),
            tape.param(self.position_emb),
            tape.param(self.segment_emb),
        );
        let t = tape.gather_rows(tok, &input.token_ids)?;
        let p = tape.gather_rows(pos, &input.position_ids)?;
        let s = tape.gather_rows(seg, &input.segment_ids)?;
        let sum = tape.sum(&[t, p, s])?;
        self.emb_norm.forward(tape, sum)
    }

    /// Runs the layer stack under `mask` (`true` = query row may attend to
    /// key column).
    pub fn encode(
        &self,
        tape: &mut Tape,
        embedded: Var,
        mask: &Mask,
        keep_attention: bool,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<EncoderOutput> {
        let n = tape.value(embedded).rows();
        if mask.rows() != n || mask.cols() != n {
            return Err(Error::Shape(format!(
                "mask {}x{} for sequence of {n}",
                mask.rows(),
                mask.cols()
            )));
        }
        let mut x = embedded;
        if let Some(d) = dropout.as_deref_mut() {
            x = d.apply(tape, x)?;
        }
        let (heads, hd) = (self.config.heads, self.config.head_dim());
        let scale = 1.0 / (hd as f64).sqrt();
        let mut kept = keep_attention.then(Vec::new);

        for layer in &self.layers {
            let q = layer.query.forward(tape, x)?;
            let k = layer.key.forward(tape, x)?;
            let v = layer.value.forward(tape, x)?;
            let mut contexts = Vec::with_capacity(heads);
            let mut weights = kept.as_ref().map(|_| Vec::with_capacity(heads * n * n));
            for h in 0..heads {
                let qh = tape.slice_cols(q, h * hd, hd)?;
                let kh = tape.slice_cols(k, h * hd, hd)?;
                let vh = tape.slice_cols(v, h * hd, hd)?;
                let scores = tape.matmul_nt(qh, kh)?;
                let scores = tape.scale(scores, scale);
                let probs = tape.masked_softmax(scores, mask)?;
                if let Some(w) = weights.as_mut() {
                    w.extend_from_slice(tape.value(probs).data());
                }
                contexts.push(tape.matmul(probs, vh)?);
            }
            if let (Some(k), Some(w)) = (kept.as_mut(), weights) {
                k.push(Array::new(vec![heads, n, n], w)?);
            }
            let ctx = tape.concat_cols(&contexts)?;
            let mut attn = layer.output.forward(tape, ctx)?;
            if let Some(d) = dropout.as_deref_mut() {
                attn = d.apply(tape, attn)?;
            }
            let res = tape.add(x, attn)?;
            let h1 = layer.attn_norm.forward(tape, res)?;

            let f = layer.ffn_in.forward(tape, h1)?;
            let f = tape.gelu(f);
            let mut f = layer.ffn_out.forward(tape, f)?;
            if let Some(d) = dropout.as_deref_mut() {
                f = d.apply(tape, f)?;
            }
            let res = tape.add(h1, f)?;
            x = layer.ffn_norm.forward(tape, res)?;
        }
        Ok(EncoderOutput {
            hidden: x,
            attention: kept,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        input: &EncoderInput,
        mask: &Mask,
        keep_attention: bool,
        dropout: Option<&mut Dropout>,
    ) -> Result<EncoderOutput> {
        let e = self.embed(tape, input)?;
        self.encode(tape, e, mask, keep_attention, dropout)
    }
}

/// Attention distribution of `query` over all keys, as `[layer][head][key]`.
pub fn dump_attention(output: &EncoderOutput, query: usize) -> Result<Vec<Vec<Vec<f64>>>> {
    let layers = output
        .attention
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("attention weights were not retained".into()))?;
    layers
        .iter()
        .map(|a| {
            let (heads, n) = (a.shape()[0], a.shape()[1]);
            if query >= n {
                return Err(Error::IdOutOfRange {
                    kind: "query position",
                    id: query,
                    limit: n,
                });
            }
            Ok((0..heads)
                .map(|h| a.data()[(h * n + query) * n..(h * n + query + 1) * n].to_vec())
                .collect())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn setup(cfg: EncoderConfig) -> (ParamStore, Encoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = Encoder::new(cfg, &mut store, "enc", &mut rng).unwrap();
        (store, enc)
    }

    fn input(tokens: &[usize], positions: &[usize], segments: &[usize]) -> EncoderInput {
        EncoderInput {
            token_ids: tokens.to_vec(),
            position_ids: positions.to_vec(),
            segment_ids: segments.to_vec(),
        }
    }

    #[test]
    fn identical_ids_identical_rows() {
        let (store, enc) = setup(EncoderConfig::tiny(20));
        let mut tape = Tape::new(&store);
        let e = enc
            .embed(&mut tape, &input(&[5, 5, 6], &[2, 2, 2], &[0, 0, 1]))
            .unwrap();
        let v = tape.value(e);
        assert_eq!(v.row(0), v.row(1));
        assert_ne!(v.row(0), v.row(2));
    }

    #[test]
    fn shared_position_embedding() {
        // marker sharing a word's position id gets the same positional row
        let (store, enc) = setup(EncoderConfig::tiny(20));
        let mut tape = Tape::new(&store);
        let pos = tape.param(enc.position_emb);
        let rows = tape.gather_rows(pos, &[5, 5]).unwrap();
        let v = tape.value(rows);
        assert_eq!(v.row(0), v.row(1));
    }

    #[test]
    fn segment_delta_before_norm() {
        let (store, enc) = setup(EncoderConfig::tiny(20));
        let mut tape = Tape::new(&store);
        let (tok, pos, seg) = (
            tape.param(enc.token_emb),
            tape.param(enc.position_emb),
            tape.param(enc.segment_emb),
        );
        let t = tape.gather_rows(tok, &[4, 4]).unwrap();
        let p = tape.gather_rows(pos, &[1, 1]).unwrap();
        let s = tape.gather_rows(seg, &[0, 1]).unwrap();
        let sum = tape.sum(&[t, p, s]).unwrap();
        let v = tape.value(sum);
        let segs = &store.get(enc.segment_emb).value;
        for c in 0..8 {
            let delta = v.get(1, c) - v.get(0, c);
            assert!((delta - (segs.get(1, c) - segs.get(0, c))).abs() < 1e-12);
        }
    }

    #[test]
    fn embed_rejects_out_of_range() {
        let (store, enc) = setup(EncoderConfig::tiny(20));
        let mut tape = Tape::new(&store);
        assert!(matches!(
            enc.embed(&mut tape, &input(&[25], &[0], &[0])),
            Err(Error::IdOutOfRange { kind: "token", .. })
        ));
        assert!(matches!(
            enc.embed(&mut tape, &input(&[1], &[64], &[0])),
            Err(Error::IdOutOfRange {
                kind: "position",
                ..
            })
        ));
        assert!(matches!(
            enc.embed(&mut tape, &input(&[1], &[0], &[2])),
            Err(Error::IdOutOfRange {
                kind: "segment",
                ..
            })
        ));
        assert!(enc.embed(&mut tape, &input(&[1, 2], &[0], &[0])).is_err());
    }

    #[test]
    fn full_mask_shape() {
        let (store, enc) = setup(EncoderConfig::tiny(20));
        let mut tape = Tape::new(&store);
        let inp = input(&[2, 9, 10, 11, 3], &[0, 1, 2, 3, 4], &[0; 5]);
        let out = enc
            .forward(&mut tape, &inp, &Mask::new(5, 5, true), false, None)
            .unwrap();
        assert_eq!(tape.value(out.hidden).shape(), &[5, 8]);
        assert!(out.attention.is_none());
    }

    #[test]
    fn diagonal_mask_isolates_rows() {
        let (store, enc) = setup(EncoderConfig::tiny(20));
        let diag = Mask::from_fn(4, 4, |r, c| r == c);
        let run = |tokens: &[usize]| {
            let mut tape = Tape::new(&store);
            let out = enc
                .forward(
                    &mut tape,
                    &input(tokens, &[0, 1, 2, 3], &[0; 4]),
                    &diag,
                    false,
                    None,
                )
                .unwrap();
            tape.value(out.hidden).clone()
        };
        let a = run(&[5, 6, 7, 8]);
        let b = run(&[5, 12, 13, 8]);
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(3), b.row(3));
        assert_ne!(a.row(1), b.row(1));
    }

    #[test]
    fn attention_dump_respects_mask() {
        let (store, enc) = setup(EncoderConfig::desk(30));
        let mask = Mask::from_fn(6, 6, |r, c| c < 3 || c == r);
        let mut tape = Tape::new(&store);
        let inp = input(
            &[2, 9, 3, 4, 5, 6],
            &[0, 1, 2, 1, 1, 2],
            &[0, 0, 0, 1, 1, 1],
        );
        let out = enc.forward(&mut tape, &inp, &mask, true, None).unwrap();
        let rows = dump_attention(&out, 4).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].len(), 4);
        for head in rows.iter().flatten() {
            assert!((head.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert_eq!(head[3], 0.0);
            assert_eq!(head[5], 0.0);
        }
        assert!(dump_attention(&out, 6).is_err());
    }

    #[test]
    fn dropout_is_seeded() {
        let mut cfg = EncoderConfig::tiny(20);
        cfg.dropout = 0.3;
        let (store, enc) = setup(cfg);
        let inp = input(&[2, 9, 10, 3], &[0, 1, 2, 3], &[0; 4]);
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut d = Dropout {
                rate: 0.3,
                rng: &mut rng,
            };
            let mut tape = Tape::new(&store);
            let out = enc
                .forward(&mut tape, &inp, &Mask::new(4, 4, true), false, Some(&mut d))
                .unwrap();
            tape.value(out.hidden).clone()
        };
        assert_eq!(run(1), run(1));
        assert_ne!(run(1), run(2));
    }

    #[test]
    fn bind_finds_all_parameters() {
        let (store, enc) = setup(EncoderConfig::tiny(20));
        let bound = Encoder::bind(enc.config().clone(), &store, "enc").unwrap();
        assert_eq!(bound.layers.len(), 1);
        assert!(Encoder::bind(enc.config().clone(), &store, "other").is_err());
    }
}
