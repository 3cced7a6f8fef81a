//! Acceptance suite. Runs every criterion, prints one PASS/FAIL/SKIP line
//! each, and exits nonzero if any criterion fails.

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use aste::corpus::{load_split, Polarity, Span, Triplet, Vocabulary, REFERENCE_STATS};
use aste::encoder::EncoderConfig;
use aste::evaluation::{breakdown_by_triplet_count, score};
use aste::extraction::{decode_spans, encode_spans, SpanSets, TagLabel, Tagger};
use aste::matching::{gold_grid, MatchLabel, Matcher};
use aste::pairing::{
    build_attention_field, build_compound, build_pairs, Ablation, CompoundInput, MarkerKind,
};
use aste::par::Exec;
use aste::pipeline::{
    dataset_stats, seed_sweep, train_extraction, train_matching, Pipeline, RunConfig, Splits,
};
use aste::tensor::{grad_check, ParamStore, Tape};

enum Verdict {
    Pass(String),
    Skip(String),
}

type Check = fn() -> Result<Verdict, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn toy_path() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/toy.txt")
}

/// Random non-overlapping spans over `len` words, each randomly a target or
/// an opinion. With `need_both`, retries until both kinds are present.
fn random_spans(rng: &mut ChaCha8Rng, len: usize, need_both: bool) -> SpanSets {
    loop {
        let (mut targets, mut opinions) = (Vec::new(), Vec::new());
        let mut i = 0;
        while i < len {
            if rng.random_bool(0.45) {
                let w = rng.random_range(1..=3).min(len - i);
                let s = Span::new(i, i + w - 1);
                if rng.random_bool(0.5) {
                    targets.push(s);
                } else {
                    opinions.push(s);
                }
                i += w;
            } else {
                i += 1;
            }
        }
        if !need_both || (!targets.is_empty() && !opinions.is_empty()) {
            return SpanSets::new(targets, opinions);
        }
    }
}

fn random_words(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|_| rng.random_range(8..vocab)).collect()
}

// ---------------------------------------------------------------- criterion 1

fn table_stats() -> Result<Verdict, String> {
    let Ok(dir) = std::env::var("ASTE_DATA_DIR") else {
        return Ok(Verdict::Skip(
            "set ASTE_DATA_DIR to a directory of <dataset>/<split>_triplets.txt".into(),
        ));
    };
    let start = Instant::now();
    let rows = dataset_stats(&dir).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    for (ds, split, expected) in REFERENCE_STATS.iter() {
        let row = rows
            .iter()
            .find(|r| r.dataset == *ds && r.split == *split)
            .ok_or_else(|| format!("{ds}/{split} missing under {dir}"))?;
        ensure(row.stats == *expected, || {
            format!("{ds}/{split}: got {:?}, expected {:?}", row.stats, expected)
        })?;
    }
    ensure(elapsed < Duration::from_secs(1), || {
        format!("took {elapsed:?}")
    })?;
    Ok(Verdict::Pass(format!("12 splits exact in {elapsed:.2?}")))
}

// ------------------------------------------------------------- criteria 2 & 8

struct EquivalenceStats {
    instances: usize,
    multi_pair: usize,
    max_diff: f64,
}

/// Compares every pair's marker states, sentence states, and distribution
/// between the all-pairs encoding and a one-pair encoding, until
/// `multi_pair` instances with two or more pairs have been seen.
fn compound_vs_solo(
    ablation: Ablation,
    multi_pair: usize,
    seed: u64,
) -> Result<EquivalenceStats, String> {
    const VOCAB: usize = 40;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let matcher = Matcher::new(EncoderConfig::tiny(VOCAB), &mut store, &mut rng)
        .map_err(|e| e.to_string())?;
    let mut stats = EquivalenceStats {
        instances: 0,
        multi_pair: 0,
        max_diff: 0.0,
    };
    while stats.multi_pair < multi_pair {
        let len = rng.random_range(2..=12);
        let words = random_words(&mut rng, len, VOCAB);
        let spans = random_spans(&mut rng, len, true);
        let pairs = build_pairs(&spans);
        // small budgets force several chunks
        let max_len = if rng.random_bool(0.3) {
            len + 3 + 8
        } else {
            64
        };
        let compound =
            build_compound(&words, &spans, &pairs, max_len, ablation).map_err(|e| e.to_string())?;
        let encode = |c: &CompoundInput| {
            let mut tape = Tape::new(&store);
            let (out, dists) = matcher.forward(&mut tape, c, false, None).expect("forward");
            (tape.value(out.hidden).clone(), tape.value(dists).clone())
        };
        for c in &compound {
            let (hidden, dists) = encode(c);
            for (k, p) in c.pairs.iter().enumerate() {
                let solo = build_compound(&words, &spans, &[(p.target, p.opinion)], 64, ablation)
                    .map_err(|e| e.to_string())?;
                let s = &solo[0];
                let (sh, sd) = encode(s);
                let sp = &s.pairs[0];
                let mut diff: f64 = 0.0;
                for (a, b) in dists.row(k).iter().zip(sd.row(0)) {
                    diff = diff.max((a - b).abs());
                }
                for kind in MarkerKind::ALL {
                    if let (Some(x), Some(y)) = (p.slot(kind), sp.slot(kind)) {
                        for (a, b) in hidden.row(x).iter().zip(sh.row(y)) {
                            diff = diff.max((a - b).abs());
                        }
                    }
                }
                for r in 0..len + 2 {
                    for (a, b) in hidden.row(r).iter().zip(sh.row(r)) {
                        diff = diff.max((a - b).abs());
                    }
                }
                stats.max_diff = stats.max_diff.max(diff);
            }
        }
        stats.instances += 1;
        if pairs.len() > 1 {
            stats.multi_pair += 1;
        }
    }
    Ok(stats)
}

fn compound_equivalence() -> Result<Verdict, String> {
    let start = Instant::now();
    let s = compound_vs_solo(Ablation::None, 100, 11)?;
    let elapsed = start.elapsed();
    ensure(s.max_diff <= 1e-6, || {
        format!("max abs diff {:e}", s.max_diff)
    })?;
    ensure(elapsed < Duration::from_secs(30), || {
        format!("took {elapsed:?}")
    })?;
    Ok(Verdict::Pass(format!(
        "{} instances ({} multi-pair), max abs diff {:e}, {elapsed:.2?}",
        s.instances, s.multi_pair, s.max_diff
    )))
}

fn ablation_effect() -> Result<Verdict, String> {
    let open = compound_vs_solo(Ablation::OpenAttention, 30, 12)?;
    ensure(open.max_diff > 1e-6, || {
        format!(
            "all-true mask left pairs independent (max diff {:e})",
            open.max_diff
        )
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..200 {
        let len = rng.random_range(2..=12);
        let words = random_words(&mut rng, len, 40);
        let spans = random_spans(&mut rng, len, true);
        let pairs = build_pairs(&spans);
        let build = |a| build_compound(&words, &spans, &pairs, 128, a).map_err(|e| e.to_string());
        for c in build(Ablation::NoTags)? {
            ensure(c.tag_segment_len() == 0, || {
                "mode c kept marker tokens".into()
            })?;
            ensure(
                c.pairs.iter().all(|p| p.marker_slots().next().is_none()),
                || "mode c pair has marker slots".into(),
            )?;
        }
        for c in build(Ablation::MergedSegments)? {
            ensure(c.input.segment_ids.iter().all(|&s| s == 0), || {
                "mode d segment id not 0".into()
            })?;
        }
        for c in build(Ablation::OpenAttention)? {
            let m = build_attention_field(&c);
            ensure(m.count_true() == c.len() * c.len(), || {
                "mode f mask not all-true".into()
            })?;
        }
    }
    Ok(Verdict::Pass(format!(
        "mode f breaks equivalence (max diff {:.3e}); mode c empty tag segment; mode d single segment",
        open.max_diff
    )))
}

// ---------------------------------------------------------------- criterion 3

fn mask_oracle() -> Result<Verdict, String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut cases = 0;
    let mut cells = 0usize;
    while cases < 1000 {
        let len = rng.random_range(2..=15);
        let words = random_words(&mut rng, len, 40);
        let spans = random_spans(&mut rng, len, true);
        let pairs = build_pairs(&spans);
        let max_len = rng.random_range(len + 7..=len + 40);
        let chunks = build_compound(&words, &spans, &pairs, max_len, Ablation::None)
            .map_err(|e| e.to_string())?;
        for c in &chunks {
            // layout by arithmetic: [CLS] X [SEP], then 4 markers per pair in
            // order, then one trailing [SEP]
            let sentence: Vec<usize> = (0..len + 2).collect();
            let n_pairs = c.pairs.len();
            let n = len + 2 + 4 * n_pairs + 1;
            ensure(c.len() == n, || {
                format!("compound length {} != {n}", c.len())
            })?;
            let trailing = n - 1;
            let group = |pos: usize| -> Option<Vec<usize>> {
                (pos >= len + 2 && pos < trailing).then(|| {
                    let k = (pos - len - 2) / 4;
                    (len + 2 + 4 * k..len + 2 + 4 * k + 4).collect()
                })
            };
            let mask = build_attention_field(c);
            for r in 0..n {
                let mut field = sentence.clone();
                if r == trailing {
                    field.push(r);
                } else if let Some(g) = group(r) {
                    field.extend(g);
                }
                for col in 0..n {
                    let expected = field.contains(&col);
                    cells += 1;
                    ensure(mask.get(r, col) == expected, || {
                        format!(
                            "row {r} col {col}: mask {} oracle {expected}",
                            mask.get(r, col)
                        )
                    })?;
                }
            }
            // marker identities follow the same arithmetic
            for (k, p) in c.pairs.iter().enumerate() {
                let spans_k = (&spans.targets[p.target], &spans.opinions[p.opinion]);
                let expect = [
                    (Vocabulary::TARGET_BEGIN_ID, spans_k.0.start),
                    (Vocabulary::TARGET_END_ID, spans_k.0.end),
                    (Vocabulary::OPINION_BEGIN_ID, spans_k.1.start),
                    (Vocabulary::OPINION_END_ID, spans_k.1.end),
                ];
                for (m, (tok, word)) in expect.into_iter().enumerate() {
                    let pos = len + 2 + 4 * k + m;
                    ensure(c.input.token_ids[pos] == tok, || {
                        format!("slot {pos} token")
                    })?;
                    ensure(c.input.position_ids[pos] == word + 1, || {
                        format!("slot {pos} position")
                    })?;
                }
            }
        }
        cases += 1;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(10), || {
        format!("took {elapsed:?}")
    })?;
    Ok(Verdict::Pass(format!(
        "{cases} span sets, {cells} cells identical, {elapsed:.2?}"
    )))
}

// ---------------------------------------------------------------- criterion 4

fn gradient_checks() -> Result<Verdict, String> {
    let start = Instant::now();
    let cfg = EncoderConfig {
        max_len: 16,
        ..EncoderConfig::tiny(12)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);

    let mut store = ParamStore::new();
    let tagger = Tagger::new(cfg.clone(), &mut store, &mut rng).map_err(|e| e.to_string())?;
    let words = [8, 9, 10, 11, 8];
    let spans = SpanSets::new(vec![Span::new(0, 1)], vec![Span::single(3)]);
    let labels = encode_spans(&spans, words.len()).map_err(|e| e.to_string())?;
    let ext = grad_check(&mut store, 1e-5, |t| tagger.loss(t, &words, &labels, None))
        .map_err(|e| e.to_string())?;
    ensure(ext.entries_checked == store.value_count(), || {
        "extraction check skipped entries".into()
    })?;
    ensure(ext.max_rel_error < 1e-4, || {
        format!(
            "extraction rel error {:e} at {:?}",
            ext.max_rel_error, ext.worst
        )
    })?;

    let mut store = ParamStore::new();
    let matcher = Matcher::new(cfg, &mut store, &mut rng).map_err(|e| e.to_string())?;
    let spans = SpanSets::new(
        vec![Span::single(0), Span::single(4)],
        vec![Span::new(1, 2)],
    );
    let pairs = build_pairs(&spans);
    let chunks =
        build_compound(&words, &spans, &pairs, 16, Ablation::None).map_err(|e| e.to_string())?;
    let triplets = vec![Triplet::new(
        Span::single(4),
        Span::new(1, 2),
        Polarity::Neg,
    )];
    let grid = gold_grid(&spans, &triplets);
    let mat = grad_check(&mut store, 1e-5, |t| {
        Ok(matcher
            .loss(t, &chunks, &grid, 1, None)?
            .expect("pairs present"))
    })
    .map_err(|e| e.to_string())?;
    ensure(mat.entries_checked == store.value_count(), || {
        "matching check skipped entries".into()
    })?;
    ensure(mat.max_rel_error < 1e-4, || {
        format!(
            "matching rel error {:e} at {:?}",
            mat.max_rel_error, mat.worst
        )
    })?;

    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(60), || {
        format!("took {elapsed:?}")
    })?;
    Ok(Verdict::Pass(format!(
        "extraction {:.2e} over {} entries, matching {:.2e} over {} entries, {elapsed:.2?}",
        ext.max_rel_error, ext.entries_checked, mat.max_rel_error, mat.entries_checked
    )))
}

// ---------------------------------------------------------------- criterion 5

fn bioes_round_trip() -> Result<Verdict, String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..1000 {
        let len = rng.random_range(1..=30);
        let spans = random_spans(&mut rng, len, false);
        let labels = encode_spans(&spans, len).map_err(|e| e.to_string())?;
        ensure(decode_spans(&labels) == spans, || {
            format!("round trip failed on case {case}")
        })?;
    }
    let mut decoded = 0;
    for _ in 0..10_000 {
        let len = rng.random_range(0..=30);
        let labels: Vec<TagLabel> = (0..len)
            .map(|_| TagLabel::ALL[rng.random_range(0..TagLabel::COUNT)])
            .collect();
        let s = decode_spans(&labels);
        ensure(
            s.targets.iter().chain(&s.opinions).all(|sp| sp.end < len),
            || "decoded span out of range".into(),
        )?;
        decoded += 1;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(10), || {
        format!("took {elapsed:?}")
    })?;
    Ok(Verdict::Pass(format!(
        "1000 round trips, {decoded} random decodes, {elapsed:.2?}"
    )))
}

// ---------------------------------------------------------------- criterion 6

fn scorer_oracle() -> Result<Verdict, String> {
    let t = |a: usize, b: usize, p: Polarity| Triplet::new(Span::single(a), Span::single(b), p);
    let t1 = t(0, 1, Polarity::Pos);
    let t2 = t(3, 2, Polarity::Neg);
    let err = |e: aste::Error| e.to_string();

    let r = score(&[vec![t1, t2]], &[vec![t1, t2]]).map_err(err)?;
    ensure((r.precision, r.recall, r.f1) == (1.0, 1.0, 1.0), || {
        format!("identity {r:?}")
    })?;

    let r = score(&[vec![t1]], &[vec![t1, t2]]).map_err(err)?;
    ensure(
        (r.precision, r.recall, r.f1) == (1.0, 0.5, 2.0 / 3.0),
        || format!("partial {r:?}"),
    )?;

    // right spans, wrong polarity: a false positive and a missed gold
    let r = score(&[vec![t(0, 1, Polarity::Neu)]], &[vec![t1]]).map_err(err)?;
    ensure(
        (r.tp, r.predicted, r.gold) == (0, 1, 1) && r.f1 == 0.0,
        || format!("polarity {r:?}"),
    )?;

    // two sentences: tp 2, predicted 4, gold 3 -> P 1/2, R 2/3, F1 4/7
    let pred = vec![
        vec![t1, t(5, 6, Polarity::Pos)],
        vec![t2, t(3, 2, Polarity::Pos)],
    ];
    let gold = vec![vec![t1], vec![t2, t(7, 8, Polarity::Neu)]];
    let r = score(&pred, &gold).map_err(err)?;
    ensure(
        (r.tp, r.predicted, r.gold) == (2, 4, 3) && r.precision == 0.5 && r.recall == 2.0 / 3.0,
        || format!("micro {r:?}"),
    )?;
    ensure((r.f1 - 4.0 / 7.0).abs() < 1e-15, || {
        format!("micro f1 {}", r.f1)
    })?;

    // bucket 1: tp 1, predicted 2, gold 1 -> P 1/2, R 1, F1 2/3
    // bucket 2: tp 1, predicted 2, gold 2 -> P 1/2, R 1/2, F1 1/2
    let b = breakdown_by_triplet_count(&gold, &pred, 4).map_err(err)?;
    let b1 = &b[0].report;
    let b2 = &b[1].report;
    ensure(
        (b1.precision, b1.recall, b1.f1) == (0.5, 1.0, 2.0 / 3.0)
            && (b2.precision, b2.recall, b2.f1) == (0.5, 0.5, 0.5),
        || format!("buckets {b:?}"),
    )?;
    Ok(Verdict::Pass("5 hand-scored fixtures exact".into()))
}

// ---------------------------------------------------------------- criterion 7

fn toy_config() -> RunConfig {
    RunConfig {
        encoder: EncoderConfig {
            hidden: 16,
            ffn: 32,
            dropout: 0.0,
            ..EncoderConfig::tiny(0)
        },
        extract_epochs: 50,
        match_epochs: 50,
        lr: 1e-2,
        batch_size: 4,
        max_len: 64,
        seed: 7,
        exec: Exec::Parallel,
        ..RunConfig::reference()
    }
}

fn overfit_probe() -> Result<Verdict, String> {
    let start = Instant::now();
    let (train, _) = load_split(toy_path()).map_err(|e| e.to_string())?;
    let splits = Splits {
        dev: train.clone(),
        test: train.clone(),
        train,
    };
    let cfg = toy_config();
    let ex = train_extraction(&cfg, &splits)
        .map_err(|e| e.to_string())?
        .checkpoint;
    let m = train_matching(&cfg, &ex, &splits)
        .map_err(|e| e.to_string())?
        .checkpoint;
    let pipeline = Pipeline::from_checkpoints(ex, m).map_err(|e| e.to_string())?;
    let report = pipeline
        .evaluate(&splits.train, cfg.exec, &Default::default())
        .map_err(|e| e.to_string())?
        .overall;
    ensure(report.f1 >= 0.95, || {
        format!("train triplet-F1 {:.4}", report.f1)
    })?;

    // "High price and service": one opinion, two targets, opposite polarities
    let shared = &splits.train[0];
    let pred = pipeline
        .predict_sentence(&shared.tokens)
        .map_err(|e| e.to_string())?;
    let polarity_of = |target: usize| {
        pred.triplets
            .iter()
            .find(|t| t.target == Span::single(target) && t.opinion == Span::single(0))
            .map(|t| t.polarity)
    };
    let (price, service) = (polarity_of(1), polarity_of(3));
    ensure(
        price == Some(Polarity::Neg) && service == Some(Polarity::Pos),
        || format!("collocations resolved to {price:?} / {service:?}"),
    )?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(300), || {
        format!("took {elapsed:?}")
    })?;
    Ok(Verdict::Pass(format!(
        "train triplet-F1 {:.4}, high price NEG / high service POS, {elapsed:.2?}",
        report.f1
    )))
}

// ---------------------------------------------------------------- criterion 9

fn reference_config_runs() -> Result<Verdict, String> {
    let start = Instant::now();
    let (sample, _) = load_split(toy_path()).map_err(|e| e.to_string())?;
    let splits = Splits {
        train: sample[..14].to_vec(),
        dev: sample[14..17].to_vec(),
        test: sample[17..].to_vec(),
    };
    let cfg = RunConfig::reference();
    let seeds = [1, 2, 3, 4, 5];
    let (results, best) = seed_sweep(&cfg, &splits, &seeds).map_err(|e| e.to_string())?;
    ensure(results.len() == 5 && best.is_some(), || {
        "sweep incomplete".into()
    })?;
    ensure(
        results
            .iter()
            .all(|r| r.dev_f1.is_finite() && r.test.f1.is_finite()),
        || "non-finite metric".into(),
    )?;
    Ok(Verdict::Pass(format!(
        "lr 5e-5, batch 8, max len 256, 3+10 epochs, seeds 1-5 ran in {:.2?}",
        start.elapsed()
    )))
}

fn main() {
    // grid label order is part of the checkpoint contract
    assert_eq!(MatchLabel::ALL.map(MatchLabel::index), [0, 1, 2, 3]);

    let checks: [(&str, &str, Check); 9] = [
        ("1", "table statistics", table_stats),
        ("2", "compound equivalence", compound_equivalence),
        ("3", "mask oracle", mask_oracle),
        ("4", "gradient checks", gradient_checks),
        ("5", "BIOES round trip", bioes_round_trip),
        ("6", "scorer oracle", scorer_oracle),
        ("7", "overfit probe", overfit_probe),
        ("8", "ablation effect", ablation_effect),
        ("9", "reference configuration", reference_config_runs),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (id, name, check) in checks {
        if !filter.is_empty() && !filter.iter().any(|f| f == id || name.contains(f.as_str())) {
            continue;
        }
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(Verdict::Pass(d)) => println!("criterion {id} {name}: PASS ({d})"),
            Ok(Verdict::Skip(d)) => println!("criterion {id} {name}: SKIP ({d})"),
            Err(d) => {
                failed += 1;
                println!("criterion {id} {name}: FAIL ({d})");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
