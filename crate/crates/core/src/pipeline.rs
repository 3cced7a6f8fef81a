//! Two-stage training, prediction, evaluation, attention inspection, and
//! corpus statistics. The CLI is a thin layer over these functions.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Stage, TrainingMeta};
use crate::corpus::{
    build_vocab, encode_tokens, load_split, AnnotatedSentence, Polarity, Span, SplitStats, Triplet,
    Vocabulary, REFERENCE_STATS,
};
use crate::encoder::{dump_attention, Dropout, EncoderConfig};
use crate::error::{Error, Result};
use crate::evaluation::{
    breakdown_by_triplet_count, one_to_many_subset, score, score_spans, select, BucketReport,
    EvalReport,
};
use crate::extraction::{encode_spans, SpanSets, TagLabel, Tagger};
use crate::matching::{assemble_triplets, gold_grid, MatchLabel, Matcher, PairPrediction};
use crate::pairing::{build_compound, build_pairs, Ablation, CompoundInput, MarkerKind};
use crate::par::Exec;
use crate::tensor::{adam_step, AdamConfig, AdamState, Gradients, ParamStore, Tape, Var};

/// Seeds of the reference protocol.
pub const REFERENCE_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// `vocab_size` and `max_len` are overwritten at training time.
    pub encoder: EncoderConfig,
    pub extract_epochs: usize,
    pub match_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_len: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub output_dir: PathBuf,
    /// Words seen fewer times in the training split map to `[UNK]`.
    pub min_freq: usize,
    #[serde(skip)]
    pub exec: Exec,
}

impl RunConfig {
    /// lr 5e-5, batch 8, max length 256, 3 + 10 epochs, seed 1, desk encoder.
    pub fn reference() -> Self {
        RunConfig {
            train: None,
            dev: None,
            test: None,
            encoder: EncoderConfig::desk(0),
            extract_epochs: 3,
            match_epochs: 10,
            lr: 5e-5,
            batch_size: 8,
            max_len: 256,
            seed: 1,
            ablation: Ablation::None,
            output_dir: PathBuf::from("runs"),
            min_freq: 1,
            exec: Exec::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "bad learning rate {}",
                self.lr
            )));
        }
        self.encoder_for(1).validate()
    }

    fn encoder_for(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            max_len: self.max_len,
            ..self.encoder.clone()
        }
    }

    pub fn extract_checkpoint_path(&self) -> PathBuf {
        self.output_dir.join("extract.ckpt")
    }

    pub fn match_checkpoint_path(&self) -> PathBuf {
        self.output_dir.join("match.ckpt")
    }
}

/// Corpus splits held in memory.
#[derive(Clone, Debug, Default)]
pub struct Splits {
    pub train: Vec<AnnotatedSentence>,
    pub dev: Vec<AnnotatedSentence>,
    pub test: Vec<AnnotatedSentence>,
}

impl Splits {
    /// Loads whichever split paths the config names.
    pub fn load(config: &RunConfig) -> Result<Self> {
        let load = |p: &Option<PathBuf>| -> Result<Vec<AnnotatedSentence>> {
            match p {
                Some(p) => Ok(load_split(p)?.0),
                None => Ok(Vec::new()),
            }
        };
        Ok(Splits {
            train: load(&config.train)?,
            dev: load(&config.dev)?,
            test: load(&config.test)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub dev_metric: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochLog>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce5_e9b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic stream seed for a tuple such as (seed, epoch, step, item).
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5eed, |acc, &p| splitmix(acc ^ splitmix(p)))
}

/// The dev split, or the training split when no dev data is given.
fn selection_set(splits: &Splits) -> &[AnnotatedSentence] {
    if splits.dev.is_empty() {
        &splits.train
    } else {
        &splits.dev
    }
}

/// One optimizer step over a batch: per-item tapes run through `exec`,
/// gradients are merged in input order and averaged. Returns the batch loss
/// sum; items whose loss is `None` contribute nothing.
fn batch_step<T, F>(
    params: &mut ParamStore,
    adam: &mut AdamState,
    cfg: &AdamConfig,
    exec: Exec,
    batch: &[T],
    step: usize,
    loss_fn: F,
) -> Result<f64>
where
    T: Sync,
    F: Fn(usize, &T, &mut Tape) -> Result<Option<Var>> + Sync + Send,
{
    let store: &ParamStore = params;
    let results = exec.try_map(batch, |k, item| -> Result<Option<(f64, Gradients)>> {
        let mut tape = Tape::new(store);
        let Some(loss) = loss_fn(k, item, &mut tape)? else {
            return Ok(None);
        };
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step}")));
        }
        Ok(Some((value, tape.backward(loss)?)))
    })?;
    let mut merged = Gradients::default();
    let mut total = 0.0;
    for (v, g) in results.into_iter().flatten() {
        total += v;
        merged.merge(g);
    }
    params.accumulate(&merged, 1.0 / batch.len() as f64);
    adam_step(params, adam, cfg);
    Ok(total)
}

fn shuffled(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[
        seed,
        epoch as u64,
        0xa11,
    ])));
    order
}

struct TaggingExample {
    ids: Vec<usize>,
    labels: Vec<TagLabel>,
}

/// Stage-1 span F1 of `tagger` on `sentences`.
pub fn span_f1(
    tagger: &Tagger,
    params: &ParamStore,
    vocab: &Vocabulary,
    sentences: &[AnnotatedSentence],
    exec: Exec,
) -> Result<EvalReport> {
    let max_len = tagger.encoder.config().max_len;
    let pairs = exec.try_map(sentences, |_, s| -> Result<(SpanSets, SpanSets)> {
        let gold = SpanSets::from_gold(s).0;
        let pred = if s.len() + 2 > max_len {
            SpanSets::default()
        } else {
            tagger.predict_spans(params, &encode_tokens(s, vocab))?
        };
        Ok((pred, gold))
    })?;
    let (pred, gold): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    score_spans(&pred, &gold)
}

/// Trains the target/opinion tagger. The returned checkpoint holds the
/// weights of the epoch with the best dev span-F1 (later epochs win ties);
/// with zero epochs it holds the initial weights.
pub fn train_extraction(config: &RunConfig, splits: &Splits) -> Result<TrainOutcome> {
    config.validate()?;
    let vocab = build_vocab(&splits.train, config.min_freq);
    let enc = config.encoder_for(vocab.len());
    let mut params = ParamStore::new();
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let tagger = Tagger::new(enc.clone(), &mut params, &mut init_rng)?;

    let mut examples = Vec::with_capacity(splits.train.len());
    let mut skipped = 0;
    for s in &splits.train {
        if s.len() + 2 > config.max_len {
            skipped += 1;
            continue;
        }
        let (spans, dropped) = SpanSets::from_gold(s);
        if dropped > 0 {
            warn!("dropped {dropped} overlapping gold spans in {:?}", s.text());
        }
        examples.push(TaggingExample {
            ids: encode_tokens(s, &vocab),
            labels: encode_spans(&spans, s.len())?,
        });
    }
    if skipped > 0 {
        warn!(
            "skipped {skipped} training sentences longer than {}",
            config.max_len
        );
    }

    let select_on = selection_set(splits);
    let adam_cfg = AdamConfig::with_lr(config.lr);
    let mut adam = AdamState::new(&params);
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut step = 0;
    for epoch in 1..=config.extract_epochs {
        let order = shuffled(examples.len(), config.seed, epoch);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let items: Vec<&TaggingExample> = batch.iter().map(|&i| &examples[i]).collect();
            loss_sum += batch_step(
                &mut params,
                &mut adam,
                &adam_cfg,
                config.exec,
                &items,
                step,
                |k, ex, tape| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
                        config.seed,
                        epoch as u64,
                        step as u64,
                        k as u64,
                    ]));
                    let mut dropout = Dropout {
                        rate: enc.dropout,
                        rng: &mut rng,
                    };
                    tagger
                        .loss(tape, &ex.ids, &ex.labels, Some(&mut dropout))
                        .map(Some)
                },
            )?;
            step += 1;
        }
        let dev = span_f1(&tagger, &params, &vocab, select_on, config.exec)?.f1;
        let mean_loss = loss_sum / examples.len().max(1) as f64;
        info!("extract epoch {epoch}: loss {mean_loss:.6}, dev span-F1 {dev:.4}");
        history.push(EpochLog {
            epoch,
            mean_loss,
            dev_metric: dev,
        });
        if best.as_ref().is_none_or(|(_, b, _)| dev >= *b) {
            best = Some((epoch, dev, params.clone()));
        }
    }
    let (epoch, dev_metric, params) = match best {
        Some(b) => b,
        None => {
            let dev = span_f1(&tagger, &params, &vocab, select_on, config.exec)?.f1;
            (0, dev, params)
        }
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            stage: Stage::Extract,
            config: enc,
            vocab,
            meta: TrainingMeta {
                epoch,
                dev_metric,
                seed: config.seed,
                ablation: config.ablation,
            },
            params,
        },
        history,
    })
}

struct MatchingExample {
    chunks: Vec<CompoundInput>,
    grid: Vec<MatchLabel>,
    opinions: usize,
}

/// Trains the pair classifier on gold spans. Selection uses end-to-end dev
/// triplet-F1 with `extract` supplying the spans.
pub fn train_matching(
    config: &RunConfig,
    extract: &Checkpoint,
    splits: &Splits,
) -> Result<TrainOutcome> {
    config.validate()?;
    if extract.stage != Stage::Extract {
        return Err(Error::Checkpoint(
            "train-match needs an extract checkpoint".into(),
        ));
    }
    let vocab = extract.vocab.clone();
    let enc = config.encoder_for(vocab.len());
    let mut params = ParamStore::new();
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, 2]));
    let matcher = Matcher::new(enc.clone(), &mut params, &mut init_rng)?;
    let tagger = Tagger::bind(extract.config.clone(), &extract.params)?;

    let mut examples = Vec::new();
    let mut skipped = 0;
    for s in &splits.train {
        let spans = SpanSets::from_gold(s).0;
        let pairs = build_pairs(&spans);
        if pairs.is_empty() {
            continue;
        }
        let ids = encode_tokens(s, &vocab);
        match build_compound(&ids, &spans, &pairs, config.max_len, config.ablation) {
            Ok(chunks) => examples.push(MatchingExample {
                chunks,
                grid: gold_grid(&spans, &s.triplets),
                opinions: spans.opinions.len(),
            }),
            Err(Error::SequenceTooLong { .. }) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if skipped > 0 {
        warn!(
            "skipped {skipped} training sentences longer than {}",
            config.max_len
        );
    }

    let select_on = selection_set(splits);
    let dev_f1 = |params: &ParamStore| -> Result<f64> {
        let p = Pipeline {
            vocab: vocab.clone(),
            tagger: tagger.clone(),
            extract_params: extract.params.clone(),
            matcher: matcher.clone(),
            match_params: params.clone(),
            ablation: config.ablation,
        };
        Ok(p.evaluate(select_on, config.exec, &Breakdowns::default())?
            .overall
            .f1)
    };

    let adam_cfg = AdamConfig::with_lr(config.lr);
    let mut adam = AdamState::new(&params);
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut step = 0;
    for epoch in 1..=config.match_epochs {
        let order = shuffled(examples.len(), derive_seed(&[config.seed, 2]), epoch);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let items: Vec<&MatchingExample> = batch.iter().map(|&i| &examples[i]).collect();
            loss_sum += batch_step(
                &mut params,
                &mut adam,
                &adam_cfg,
                config.exec,
                &items,
                step,
                |k, ex, tape| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
                        config.seed,
                        2,
                        epoch as u64,
                        step as u64,
                        k as u64,
                    ]));
                    let mut dropout = Dropout {
                        rate: enc.dropout,
                        rng: &mut rng,
                    };
                    matcher.loss(tape, &ex.chunks, &ex.grid, ex.opinions, Some(&mut dropout))
                },
            )?;
            step += 1;
        }
        let dev = dev_f1(&params)?;
        let mean_loss = loss_sum / examples.len().max(1) as f64;
        info!("match epoch {epoch}: loss {mean_loss:.6}, dev triplet-F1 {dev:.4}");
        history.push(EpochLog {
            epoch,
            mean_loss,
            dev_metric: dev,
        });
        if best.as_ref().is_none_or(|(_, b, _)| dev >= *b) {
            best = Some((epoch, dev, params.clone()));
        }
    }
    let (epoch, dev_metric, params) = match best {
        Some(b) => b,
        None => (0, dev_f1(&params)?, params),
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            stage: Stage::Match,
            config: enc,
            vocab,
            meta: TrainingMeta {
                epoch,
                dev_metric,
                seed: config.seed,
                ablation: config.ablation,
            },
            params,
        },
        history,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredTriplet {
    pub target: Span,
    pub opinion: Span,
    pub polarity: Polarity,
    pub probability: f64,
}

impl ScoredTriplet {
    pub fn triplet(&self) -> Triplet {
        Triplet::new(self.target, self.opinion, self.polarity)
    }
}

/// One line of a predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub index: usize,
    pub tokens: Vec<String>,
    pub triplets: Vec<ScoredTriplet>,
    /// The sentence did not fit the maximum sequence length.
    pub skipped: bool,
}

impl PredictionRecord {
    pub fn triplets(&self) -> Vec<Triplet> {
        self.triplets.iter().map(ScoredTriplet::triplet).collect()
    }
}

pub fn write_predictions(path: impl AsRef<Path>, records: &[PredictionRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: n + 1,
            cause: e.to_string(),
        })?);
    }
    Ok(records)
}

/// Which breakdowns [`Pipeline::evaluate`] computes besides the overall report.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Breakdowns {
    /// Bucket cap for the triplet-count breakdown.
    pub triplet_count: Option<usize>,
    pub one_to_many: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvaluationOutput {
    pub overall: EvalReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub triplet_count: Option<Vec<BucketReport>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub one_to_many: Option<BucketReport>,
}

impl EvaluationOutput {
    /// `key:value` lines.
    pub fn to_text(&self) -> String {
        let mut s = self.overall.to_text("overall.");
        for b in self.triplet_count.iter().flatten() {
            s.push_str(&format!("triplets{}.sentences:{}\n", b.bucket, b.sentences));
            s.push_str(&b.report.to_text(&format!("triplets{}.", b.bucket)));
        }
        if let Some(b) = &self.one_to_many {
            s.push_str(&format!("one_to_many.sentences:{}\n", b.sentences));
            s.push_str(&b.report.to_text("one_to_many."));
        }
        s
    }

    /// One JSON object per line: overall first, then each bucket.
    pub fn to_json_lines(&self) -> String {
        let mut rows = vec![serde_json::json!({"bucket": "overall", "report": self.overall})];
        for b in self.triplet_count.iter().flatten() {
            rows.push(serde_json::json!({"breakdown": "triplet-count", "bucket": b}));
        }
        if let Some(b) = &self.one_to_many {
            rows.push(serde_json::json!({"breakdown": "one-to-many", "bucket": b}));
        }
        rows.iter().map(|r| format!("{r}\n")).collect()
    }
}

/// Scores triplet sets aligned with `gold`, applying the requested breakdowns.
pub fn evaluate_triplets(
    predictions: &[Vec<Triplet>],
    gold: &[Vec<Triplet>],
    breakdowns: &Breakdowns,
) -> Result<EvaluationOutput> {
    let overall = score(predictions, gold)?;
    let triplet_count = breakdowns
        .triplet_count
        .map(|cap| breakdown_by_triplet_count(gold, predictions, cap))
        .transpose()?;
    let one_to_many = if breakdowns.one_to_many {
        let idx = one_to_many_subset(gold);
        Some(BucketReport {
            bucket: "one-to-many".into(),
            sentences: idx.len(),
            report: score(&select(predictions, &idx), &select(gold, &idx))?,
        })
    } else {
        None
    };
    Ok(EvaluationOutput {
        overall,
        triplet_count,
        one_to_many,
    })
}

/// Scores a predictions file against gold sentences; records are matched by
/// `index`, missing records count as empty predictions.
pub fn evaluate_records(
    records: &[PredictionRecord],
    gold: &[AnnotatedSentence],
    breakdowns: &Breakdowns,
) -> Result<EvaluationOutput> {
    let mut preds = vec![Vec::new(); gold.len()];
    for r in records {
        let slot = preds.get_mut(r.index).ok_or(Error::IdOutOfRange {
            kind: "prediction index",
            id: r.index,
            limit: gold.len(),
        })?;
        *slot = r.triplets();
    }
    let gold: Vec<Vec<Triplet>> = gold.iter().map(|s| s.triplets.clone()).collect();
    evaluate_triplets(&preds, &gold, breakdowns)
}

/// Both trained stages bound to their parameters.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub vocab: Vocabulary,
    pub tagger: Tagger,
    pub extract_params: ParamStore,
    pub matcher: Matcher,
    pub match_params: ParamStore,
    pub ablation: Ablation,
}

/// Everything the pipeline produced for one sentence.
#[derive(Clone, Debug)]
pub struct SentencePrediction {
    pub spans: SpanSets,
    pub pairs: Vec<PairPrediction>,
    pub triplets: Vec<ScoredTriplet>,
}

impl Pipeline {
    pub fn from_checkpoints(extract: Checkpoint, matching: Checkpoint) -> Result<Self> {
        let extract = extract.expect_stage(Stage::Extract)?;
        let matching = matching.expect_stage(Stage::Match)?;
        if extract.vocab.tokens() != matching.vocab.tokens() {
            return Err(Error::Checkpoint(
                "extract and match checkpoints use different vocabularies".into(),
            ));
        }
        Ok(Pipeline {
            tagger: Tagger::bind(extract.config, &extract.params)?,
            matcher: Matcher::bind(matching.config, &matching.params)?,
            vocab: extract.vocab,
            extract_params: extract.params,
            match_params: matching.params,
            ablation: matching.meta.ablation,
        })
    }

    pub fn load(extract: impl AsRef<Path>, matching: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoints(Checkpoint::load(extract)?, Checkpoint::load(matching)?)
    }

    pub fn predict_sentence(&self, tokens: &[String]) -> Result<SentencePrediction> {
        let s = AnnotatedSentence {
            tokens: tokens.to_vec(),
            triplets: Vec::new(),
        };
        let ids = encode_tokens(&s, &self.vocab);
        let spans = self.tagger.predict_spans(&self.extract_params, &ids)?;
        let pairs = self
            .matcher
            .predict(&self.match_params, &ids, &spans, self.ablation)?;
        let triplets = assemble_triplets(&pairs, &spans)
            .into_iter()
            .zip(pairs.iter().filter(|p| p.label != MatchLabel::O))
            .map(|(t, p)| ScoredTriplet {
                target: t.target,
                opinion: t.opinion,
                polarity: t.polarity,
                probability: p.probability(),
            })
            .collect();
        Ok(SentencePrediction {
            spans,
            pairs,
            triplets,
        })
    }

    /// One record per sentence, in input order. Over-long sentences become
    /// skipped records instead of errors.
    pub fn predict(
        &self,
        sentences: &[AnnotatedSentence],
        exec: Exec,
    ) -> Result<Vec<PredictionRecord>> {
        exec.try_map(sentences, |index, s| {
            let (triplets, skipped) = match self.predict_sentence(&s.tokens) {
                Ok(p) => (p.triplets, false),
                Err(Error::SequenceTooLong { .. }) => (Vec::new(), true),
                Err(e) => return Err(e),
            };
            Ok(PredictionRecord {
                index,
                tokens: s.tokens.clone(),
                triplets,
                skipped,
            })
        })
    }

    pub fn evaluate(
        &self,
        sentences: &[AnnotatedSentence],
        exec: Exec,
        breakdowns: &Breakdowns,
    ) -> Result<EvaluationOutput> {
        let records = self.predict(sentences, exec)?;
        evaluate_records(&records, sentences, breakdowns)
    }
}

/// Attention rows of a target's first sentence word and of its pair's
/// leading marker, per layer and head.
#[derive(Clone, Debug, Serialize)]
pub struct AttentionCase {
    /// Display label of every key position.
    pub columns: Vec<String>,
    pub word_query: usize,
    pub marker_query: usize,
    pub marker: String,
    /// `[layer][head]` → (word row, marker row).
    pub rows: Vec<Vec<(Vec<f64>, Vec<f64>)>>,
}

impl AttentionCase {
    /// Tab-separated table: one line per key position and layer/head.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "layer\thead\tkey\tword@{}\t{}@{}\n",
            self.word_query, self.marker, self.marker_query
        );
        for (l, heads) in self.rows.iter().enumerate() {
            for (h, (w, m)) in heads.iter().enumerate() {
                for (k, col) in self.columns.iter().enumerate() {
                    s.push_str(&format!("{l}\t{h}\t{col}\t{:.6}\t{:.6}\n", w[k], m[k]));
                }
            }
        }
        s
    }
}

/// Encodes `sentence` with its gold spans under a trained matcher and dumps
/// the attention rows for pair `pair_index` (row-major over targets ×
/// opinions).
pub fn dump_attention_case(
    matching: &Checkpoint,
    sentence: &AnnotatedSentence,
    pair_index: usize,
) -> Result<AttentionCase> {
    if matching.stage != Stage::Match {
        return Err(Error::Checkpoint(
            "dump-attention needs a match checkpoint".into(),
        ));
    }
    let matcher = Matcher::bind(matching.config.clone(), &matching.params)?;
    let ablation = matching.meta.ablation;
    let spans = SpanSets::from_gold(sentence).0;
    let pairs = build_pairs(&spans);
    let &(ti, oi) = pairs.get(pair_index).ok_or(Error::IdOutOfRange {
        kind: "pair",
        id: pair_index,
        limit: pairs.len(),
    })?;
    let ids = encode_tokens(sentence, &matching.vocab);
    let chunks = build_compound(&ids, &spans, &pairs, matching.config.max_len, ablation)?;
    let (chunk, pair) = chunks
        .iter()
        .find_map(|c| {
            c.pairs
                .iter()
                .find(|p| p.target == ti && p.opinion == oi)
                .map(|p| (c, p))
        })
        .expect("every pair is placed in some chunk");
    let (marker_query, marker) = MarkerKind::ALL
        .iter()
        .find_map(|&k| pair.slot(k).map(|s| (s, k.label().to_string())))
        .ok_or_else(|| Error::InvalidArgument(format!("ablation {ablation} has no markers")))?;
    let word_query = spans.targets[ti].start + 1;

    let mut tape = Tape::new(&matching.params);
    let (out, _) = matcher.forward(&mut tape, chunk, true, None)?;
    let word = dump_attention(&out, word_query)?;
    let mark = dump_attention(&out, marker_query)?;
    let rows = word
        .into_iter()
        .zip(mark)
        .map(|(wl, ml)| wl.into_iter().zip(ml).collect())
        .collect();

    let mut columns = Vec::with_capacity(chunk.len());
    columns.push("[CLS]".to_string());
    columns.extend(sentence.tokens.iter().cloned());
    columns.push("[SEP]".to_string());
    let mut tags = vec![String::new(); chunk.len() - columns.len()];
    for p in &chunk.pairs {
        for k in MarkerKind::ALL {
            if let Some(s) = p.slot(k) {
                tags[s - sentence.len() - 2] = format!("{}({},{})", k.label(), p.target, p.opinion);
            }
        }
    }
    if let Some(last) = tags.last_mut() {
        *last = "[SEP]".to_string();
    }
    columns.extend(tags);
    Ok(AttentionCase {
        columns,
        word_query,
        marker_query,
        marker,
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StatsRow {
    pub dataset: String,
    pub split: String,
    pub stats: SplitStats,
    pub reference: Option<SplitStats>,
}

impl StatsRow {
    pub fn matches_reference(&self) -> Option<bool> {
        self.reference.map(|r| r == self.stats)
    }
}

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

/// Statistics of `<dir>/<dataset>/<split>_triplets.txt` for every dataset
/// directory present, each row paired with the published counts when known.
pub fn dataset_stats(dir: impl AsRef<Path>) -> Result<Vec<StatsRow>> {
    let dir = dir.as_ref();
    let mut datasets: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    datasets.sort();
    let mut rows = Vec::new();
    for ds in datasets {
        for split in SPLITS {
            let path = dir.join(&ds).join(format!("{split}_triplets.txt"));
            if !path.exists() {
                continue;
            }
            rows.push(stats_row(&ds, split, &path)?);
        }
    }
    Ok(rows)
}

pub fn stats_row(dataset: &str, split: &str, path: &Path) -> Result<StatsRow> {
    let (_, stats) = load_split(path)?;
    let reference = REFERENCE_STATS
        .iter()
        .find(|(d, s, _)| *d == dataset && *s == split)
        .map(|(_, _, r)| *r);
    Ok(StatsRow {
        dataset: dataset.to_string(),
        split: split.to_string(),
        stats,
        reference,
    })
}

pub fn format_stats(rows: &[StatsRow], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "dataset\tsplit\tsentences\tpos\tneu\tneg\treference")?;
    for r in rows {
        let verdict = match r.matches_reference() {
            Some(true) => "match".to_string(),
            Some(false) => {
                let e = r.reference.expect("present");
                format!(
                    "MISMATCH (expected {} {} {} {})",
                    e.sentences, e.pos, e.neu, e.neg
                )
            }
            None => "-".to_string(),
        };
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.dataset, r.split, r.stats.sentences, r.stats.pos, r.stats.neu, r.stats.neg, verdict
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub dev_f1: f64,
    pub test: EvalReport,
}

/// Trains both stages once per seed and scores each on the test split.
/// Returns every run plus the index of the best test F1 (first on ties).
pub fn seed_sweep(
    config: &RunConfig,
    splits: &Splits,
    seeds: &[u64],
) -> Result<(Vec<SeedResult>, Option<usize>)> {
    let mut results = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let cfg = RunConfig {
            seed,
            ..config.clone()
        };
        let ex = train_extraction(&cfg, splits)?.checkpoint;
        let m = train_matching(&cfg, &ex, splits)?.checkpoint;
        let dev_f1 = m.meta.dev_metric;
        let pipeline = Pipeline::from_checkpoints(ex, m)?;
        let test = pipeline
            .evaluate(&splits.test, cfg.exec, &Breakdowns::default())?
            .overall;
        info!("seed {seed}: dev F1 {dev_f1:.4}, test F1 {:.4}", test.f1);
        results.push(SeedResult { seed, dev_f1, test });
    }
    let best = results
        .iter()
        .enumerate()
        .fold(None, |acc: Option<(usize, f64)>, (i, r)| match acc {
            Some((_, f)) if f >= r.test.f1 => acc,
            _ => Some((i, r.test.f1)),
        })
        .map(|(i, _)| i);
    Ok((results, best))
}
