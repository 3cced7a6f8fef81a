use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aste::checkpoint::{Checkpoint, Stage};
use aste::corpus::{load_split, parse_line, AnnotatedSentence};
use aste::encoder::EncoderConfig;
use aste::evaluation::DEFAULT_BUCKET_CAP;
use aste::pairing::Ablation;
use aste::par::Exec;
use aste::pipeline::{
    dataset_stats, dump_attention_case, evaluate_records, format_stats, read_predictions,
    seed_sweep, stats_row, train_extraction, train_matching, write_predictions, Breakdowns,
    Pipeline, RunConfig, Splits, REFERENCE_SEEDS,
};
use aste::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "aste",
    version,
    about = "Two-stage aspect sentiment triplet extraction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the target/opinion tagger.
    TrainExtract(TrainArgs),
    /// Train the pair matcher on top of an extract checkpoint.
    TrainMatch {
        #[command(flatten)]
        train: TrainArgs,
        /// Defaults to `<output-dir>/extract.ckpt`.
        #[arg(long)]
        extract: Option<PathBuf>,
    },
    /// Train both stages for several seeds and report dev/test F1 per seed.
    Sweep {
        #[command(flatten)]
        train: TrainArgs,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_values_t = REFERENCE_SEEDS)]
        seeds: Vec<u64>,
    },
    /// Write one JSON record of extracted triplets per input sentence.
    Predict {
        #[command(flatten)]
        models: ModelArgs,
        /// One sentence per line; `####` annotations are ignored.
        #[arg(long)]
        input: PathBuf,
        /// Defaults to stdout.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        sequential: bool,
    },
    /// Score the pipeline, or a predictions file, against annotated sentences.
    Evaluate {
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long)]
        test: PathBuf,
        /// Score this predictions file instead of running the models.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long, value_enum)]
        breakdown: Vec<BreakdownKind>,
        /// Sentences with at least this many gold triplets share the last bucket.
        #[arg(long, default_value_t = DEFAULT_BUCKET_CAP)]
        bucket_cap: usize,
        /// Emit JSON lines instead of key:value text.
        #[arg(long)]
        json: bool,
        #[arg(long)]
        sequential: bool,
    },
    /// Show attention of a target word next to its pair's leading marker.
    DumpAttention {
        #[arg(long = "match")]
        matching: PathBuf,
        /// An annotated line `tokens####[triplets]`; its gold spans form the pairs.
        #[arg(long)]
        sentence: String,
        /// Row-major index over targets × opinions.
        #[arg(long, default_value_t = 0)]
        pair: usize,
        #[arg(long)]
        json: bool,
    },
    /// Sentence and polarity counts per split, checked against published counts.
    Stats {
        /// Directory holding `<dataset>/<split>_triplets.txt`.
        #[arg(long, conflicts_with = "files")]
        data_dir: Option<PathBuf>,
        /// Individual split files, named `<dataset>/<split>_triplets.txt` when
        /// the reference comparison is wanted.
        files: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BreakdownKind {
    TripletCount,
    OneToMany,
}

#[derive(Clone, Copy, ValueEnum)]
enum EncoderSize {
    Desk,
    Tiny,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    extract: Option<PathBuf>,
    #[arg(long = "match")]
    matching: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, default_value = "runs")]
    output_dir: PathBuf,
    #[arg(long, value_enum, default_value = "desk")]
    encoder: EncoderSize,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ffn: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Epochs for this stage; defaults to 3 for extraction and 10 for matching.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 5e-5)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 256)]
    max_len: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "none")]
    ablation: Ablation,
    #[arg(long, default_value_t = 1)]
    min_freq: usize,
    /// Disable data-parallel batch execution.
    #[arg(long)]
    sequential: bool,
}

impl TrainArgs {
    fn config(&self) -> RunConfig {
        let mut encoder = match self.encoder {
            EncoderSize::Desk => EncoderConfig::desk(0),
            EncoderSize::Tiny => EncoderConfig::tiny(0),
        };
        encoder.hidden = self.hidden.unwrap_or(encoder.hidden);
        encoder.layers = self.layers.unwrap_or(encoder.layers);
        encoder.heads = self.heads.unwrap_or(encoder.heads);
        encoder.ffn = self.ffn.unwrap_or(encoder.ffn);
        encoder.dropout = self.dropout.unwrap_or(encoder.dropout);
        let reference = RunConfig::reference();
        RunConfig {
            train: Some(self.train.clone()),
            dev: self.dev.clone(),
            test: self.test.clone(),
            encoder,
            extract_epochs: self.epochs.unwrap_or(reference.extract_epochs),
            match_epochs: self.epochs.unwrap_or(reference.match_epochs),
            lr: self.lr,
            batch_size: self.batch_size,
            max_len: self.max_len,
            seed: self.seed,
            ablation: self.ablation,
            output_dir: self.output_dir.clone(),
            min_freq: self.min_freq,
            exec: exec(self.sequential),
        }
    }
}

fn exec(sequential: bool) -> Exec {
    if sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn out_err(e: io::Error) -> Error {
    Error::Io {
        path: PathBuf::from("<stdout>"),
        source: e,
    }
}

fn load_pipeline(models: &ModelArgs) -> Result<Pipeline> {
    let need = |p: &Option<PathBuf>, flag: &str| {
        p.clone()
            .ok_or_else(|| Error::InvalidArgument(format!("--{flag} is required")))
    };
    Pipeline::load(
        need(&models.extract, "extract")?,
        need(&models.matching, "match")?,
    )
}

fn read_sentences(path: &Path) -> Result<Vec<AnnotatedSentence>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let words = l.split_once("####").map_or(l, |(w, _)| w);
            AnnotatedSentence::unannotated(words)
        })
        .collect())
}

fn run(cli: Cli) -> Result<()> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::TrainExtract(args) => {
            let config = args.config();
            let splits = Splits::load(&config)?;
            let outcome = train_extraction(&config, &splits)?;
            create_dir(&config.output_dir)?;
            let path = config.extract_checkpoint_path();
            outcome.checkpoint.save(&path)?;
            for e in &outcome.history {
                writeln!(
                    out,
                    "epoch:{} loss:{:.6} dev_span_f1:{:.6}",
                    e.epoch, e.mean_loss, e.dev_metric
                )
                .map_err(out_err)?;
            }
            writeln!(
                out,
                "selected_epoch:{}\ncheckpoint:{}",
                outcome.checkpoint.meta.epoch,
                path.display()
            )
            .map_err(out_err)?;
        }
        Command::TrainMatch { train, extract } => {
            let config = train.config();
            let splits = Splits::load(&config)?;
            let extract = extract.unwrap_or_else(|| config.extract_checkpoint_path());
            let ex = Checkpoint::load(&extract)?.expect_stage(Stage::Extract)?;
            let outcome = train_matching(&config, &ex, &splits)?;
            create_dir(&config.output_dir)?;
            let path = config.match_checkpoint_path();
            outcome.checkpoint.save(&path)?;
            for e in &outcome.history {
                writeln!(
                    out,
                    "epoch:{} loss:{:.6} dev_triplet_f1:{:.6}",
                    e.epoch, e.mean_loss, e.dev_metric
                )
                .map_err(out_err)?;
            }
            writeln!(
                out,
                "selected_epoch:{}\ncheckpoint:{}",
                outcome.checkpoint.meta.epoch,
                path.display()
            )
            .map_err(out_err)?;
        }
        Command::Sweep { train, seeds } => {
            let config = train.config();
            let splits = Splits::load(&config)?;
            let (results, best) = seed_sweep(&config, &splits, &seeds)?;
            for r in &results {
                writeln!(
                    out,
                    "seed:{} dev_f1:{:.6} test_precision:{:.6} test_recall:{:.6} test_f1:{:.6}",
                    r.seed, r.dev_f1, r.test.precision, r.test.recall, r.test.f1
                )
                .map_err(out_err)?;
            }
            if let Some(b) = best {
                let r = &results[b];
                writeln!(out, "best_seed:{} best_test_f1:{:.6}", r.seed, r.test.f1)
                    .map_err(out_err)?;
            }
        }
        Command::Predict {
            models,
            input,
            output,
            sequential,
        } => {
            let pipeline = load_pipeline(&models)?;
            let sentences = read_sentences(&input)?;
            let records = pipeline.predict(&sentences, exec(sequential))?;
            match output {
                Some(p) => write_predictions(p, &records)?,
                None => {
                    for r in &records {
                        let line = serde_json::to_string(r)
                            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
                        writeln!(out, "{line}").map_err(out_err)?;
                    }
                }
            }
        }
        Command::Evaluate {
            models,
            test,
            predictions,
            breakdown,
            bucket_cap,
            json,
            sequential,
        } => {
            let (gold, _) = load_split(&test)?;
            let mut b = Breakdowns::default();
            for k in breakdown {
                match k {
                    BreakdownKind::TripletCount => b.triplet_count = Some(bucket_cap),
                    BreakdownKind::OneToMany => b.one_to_many = true,
                }
            }
            let report = match predictions {
                Some(p) => evaluate_records(&read_predictions(p)?, &gold, &b)?,
                None => load_pipeline(&models)?.evaluate(&gold, exec(sequential), &b)?,
            };
            let text = if json {
                report.to_json_lines()
            } else {
                report.to_text()
            };
            out.write_all(text.as_bytes()).map_err(out_err)?;
        }
        Command::DumpAttention {
            matching,
            sentence,
            pair,
            json,
        } => {
            let ck = Checkpoint::load(&matching)?;
            let case = dump_attention_case(&ck, &parse_line(&sentence)?, pair)?;
            let text = if json {
                serde_json::to_string(&case).map_err(|e| Error::InvalidArgument(e.to_string()))?
                    + "\n"
            } else {
                case.to_text()
            };
            out.write_all(text.as_bytes()).map_err(out_err)?;
        }
        Command::Stats { data_dir, files } => {
            let rows = match data_dir {
                Some(dir) => dataset_stats(dir)?,
                None if files.is_empty() => {
                    return Err(Error::InvalidArgument(
                        "give --data-dir or at least one split file".into(),
                    ))
                }
                None => files
                    .iter()
                    .map(|f| {
                        let dataset = f
                            .parent()
                            .and_then(|p| p.file_name())
                            .map_or(String::new(), |n| n.to_string_lossy().into_owned());
                        let split = f
                            .file_name()
                            .map(|n| n.to_string_lossy())
                            .map_or(String::new(), |n| {
                                n.trim_end_matches("_triplets.txt").to_string()
                            });
                        stats_row(&dataset, &split, f)
                    })
                    .collect::<Result<_>>()?,
            };
            format_stats(&rows, &mut out).map_err(out_err)?;
            if rows.iter().any(|r| r.matches_reference() == Some(false)) {
                return Err(Error::InvalidArgument(
                    "counts differ from the published statistics".into(),
                ));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
