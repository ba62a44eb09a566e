//! Command line interface: corpus generation, training, decoding,
//! evaluation, and the self-verification batteries.
//!
//! Exit codes: 0 success, 1 selftest failure, 2 usage or input error,
//! 3 numerical divergence.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{generate_corpus, load_dataset, save_dataset, GrammarSpec, Vocabulary};
use crate::decoding::{greedy_decode, semantic_beam_search, BeamConfig, StreamingSession};
use crate::metrics::relative_reduction;
use crate::model::{load_checkpoint, ModelConfig, ModelParams};
use crate::numerics::Tensor;
use crate::selftest::{run_all, SelftestOptions};
use crate::trainer::{evaluate, train, CheckpointPaths, TrainConfig, TrainError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_SELFTEST: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Diverged(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Diverged(_) => EXIT_DIVERGED,
        }
    }
}

fn usage(err: impl std::fmt::Display) -> CliError {
    CliError::Usage(err.to_string())
}

#[derive(Parser)]
#[command(
    name = "smrt",
    about = "Multi-task semantic transducer: joint word-piece, slot, and intent prediction",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic spoken-language-understanding corpus from a
    /// grammar file. Writes the dataset JSONL to --out and the vocabulary
    /// to "<out>.vocab.json". Reruns with equal arguments are
    /// byte-identical.
    GenData {
        /// Grammar JSON: templates, slot fillers, and feature settings.
        #[arg(long)]
        grammar: PathBuf,
        /// Output dataset path (JSON Lines).
        #[arg(long)]
        out: PathBuf,
        /// Number of utterances to draw.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model. Writes the final checkpoint to --out, the best
    /// held-out checkpoint to "<out>.best", per-epoch snapshots to
    /// "<out>.epochN", and a JSONL epoch log to "<out>.log.jsonl".
    Train {
        /// Dataset JSONL produced by gen-data (vocabulary is read from
        /// "<data>.vocab.json").
        #[arg(long)]
        data: PathBuf,
        /// Optional JSON config: {"model": {..}, "train": {..}}, both
        /// sections optional; absent fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a dataset, writing one JSON line per utterance with the
    /// n-best label sequences and the predicted intent.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Beam widths "B_wp,B_slot,B_local,B_beam".
        #[arg(long, default_value = "2,2,4,8")]
        beam: String,
        /// Greedy decoding (equivalent to beam widths 1,1,1,1).
        #[arg(long, conflicts_with = "stream")]
        greedy: bool,
        /// Also decode incrementally in chunks of this many frames and
        /// require the streamed result to match the batch result.
        #[arg(long, value_name = "CHUNK")]
        stream: Option<usize>,
        /// Output path (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint: word error rate, semantic error rate, and
    /// interpretation/intent error rates, optionally with relative
    /// reductions against a baseline report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Beam widths "B_wp,B_slot,B_local,B_beam".
        #[arg(long, default_value = "2,2,4,8")]
        beam: String,
        /// Earlier eval report JSON to compute error reductions against.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Output path (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the verification batteries and report one PASS/FAIL line each.
    Selftest {
        /// Debug hook: negate analytic gradients so the gradient battery
        /// must fail; demonstrates the batteries can detect a defect.
        #[arg(long)]
        flip_gradient_sign: bool,
    },
}

/// Vocabulary path convention shared by gen-data and the consumers.
fn vocab_path(data: &Path) -> PathBuf {
    let mut name = data.as_os_str().to_os_string();
    name.push(".vocab.json");
    PathBuf::from(name)
}

/// Parses "B_wp,B_slot,B_local,B_beam" into a beam configuration.
fn parse_beam(text: &str) -> Result<BeamConfig, CliError> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 4 {
        return Err(usage(format!(
            "--beam expects \"B_wp,B_slot,B_local,B_beam\", got \"{text}\""
        )));
    }
    let mut widths = [0usize; 4];
    for (slot, part) in widths.iter_mut().zip(&parts) {
        *slot = part.trim().parse().map_err(|_| {
            usage(format!(
                "--beam expects four positive integers, got \"{text}\""
            ))
        })?;
    }
    let config = BeamConfig {
        b_wp: widths[0],
        b_slot: widths[1],
        b_local: widths[2],
        b_beam: widths[3],
        max_emits_per_frame: BeamConfig::default().max_emits_per_frame,
    };
    config.validate().map_err(usage)?;
    Ok(config)
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    #[serde(default)]
    model: ModelConfig,
    #[serde(default)]
    train: TrainConfig,
}

#[derive(Serialize)]
struct NBestRecord {
    tokens: Vec<String>,
    slots: Vec<String>,
    score: f64,
}

#[derive(Serialize)]
struct DecodeRecord {
    index: usize,
    intent: String,
    intent_logprob: f64,
    n_best: Vec<NBestRecord>,
}

#[derive(Serialize)]
struct Reductions {
    wer: Option<f64>,
    semer: Option<f64>,
    irer: Option<f64>,
    icer: Option<f64>,
}

#[derive(Deserialize)]
struct BaselineRates {
    wer: f64,
    semer: f64,
    irer: f64,
    icer: f64,
}

/// Parses arguments and runs one command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.exit_code() == 0 { EXIT_OK } else { EXIT_USAGE };
            let _ = err.print();
            return code;
        }
    };
    let stdout = io::stdout();
    match dispatch(cli, &mut stdout.lock()) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            err.code()
        }
    }
}

fn dispatch(cli: Cli, out: &mut impl Write) -> Result<i32, CliError> {
    match cli.command {
        Command::GenData {
            grammar,
            out: out_path,
            n,
            seed,
        } => cmd_gen_data(&grammar, &out_path, n, seed, out),
        Command::Train { data, config, out: out_path } => cmd_train(&data, config.as_deref(), &out_path, out),
        Command::Decode {
            ckpt,
            data,
            beam,
            greedy,
            stream,
            out: out_path,
        } => cmd_decode(&ckpt, &data, &beam, greedy, stream, out_path.as_deref(), out),
        Command::Eval {
            ckpt,
            data,
            beam,
            baseline,
            out: out_path,
        } => cmd_eval(&ckpt, &data, &beam, baseline.as_deref(), out_path.as_deref(), out),
        Command::Selftest { flip_gradient_sign } => {
            let opts = SelftestOptions { flip_gradient_sign };
            let ok = run_all(&opts, out).map_err(usage)?;
            Ok(if ok { EXIT_OK } else { EXIT_SELFTEST })
        }
    }
}

fn cmd_gen_data(
    grammar_path: &Path,
    out_path: &Path,
    n: usize,
    seed: u64,
    out: &mut impl Write,
) -> Result<i32, CliError> {
    let grammar = GrammarSpec::load(grammar_path).map_err(usage)?;
    let (utterances, vocab) = generate_corpus(&grammar, n, seed).map_err(usage)?;
    save_dataset(out_path, &utterances, &vocab).map_err(usage)?;
    let vpath = vocab_path(out_path);
    vocab.save(&vpath).map_err(usage)?;

    let frames: usize = utterances.iter().map(|u| u.features.shape()[0]).sum();
    let tokens: usize = utterances.iter().map(|u| u.tokens.len()).sum();
    let denom = utterances.len().max(1) as f64;
    writeln!(out, "wrote {} utterances to {}", utterances.len(), out_path.display())
        .map_err(usage)?;
    writeln!(
        out,
        "vocabulary: {} word pieces, {} slot tags, {} intents ({})",
        vocab.n_wp(),
        vocab.n_slot(),
        vocab.n_intent(),
        vpath.display()
    )
    .map_err(usage)?;
    writeln!(
        out,
        "mean raw frames per utterance: {:.1}, mean tokens: {:.1}",
        frames as f64 / denom,
        tokens as f64 / denom
    )
    .map_err(usage)?;
    Ok(EXIT_OK)
}

fn load_pair(data: &Path) -> Result<(Vec<crate::data::Utterance>, Vocabulary), CliError> {
    let vocab = Vocabulary::load(&vocab_path(data)).map_err(usage)?;
    let utterances = load_dataset(data, &vocab).map_err(usage)?;
    Ok((utterances, vocab))
}

fn cmd_train(
    data: &Path,
    config: Option<&Path>,
    ckpt_out: &Path,
    out: &mut impl Write,
) -> Result<i32, CliError> {
    let (utterances, vocab) = load_pair(data)?;
    let file: TrainFile = match config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| usage(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => TrainFile::default(),
    };
    let model_cfg = file.model.fill_vocab(&vocab);
    model_cfg.validate().map_err(usage)?;

    let outcome = train(&model_cfg, &utterances, &vocab, &file.train, Some(ckpt_out)).map_err(
        |e| match e {
            TrainError::Diverged { .. } => CliError::Diverged(e.to_string()),
            other => usage(other),
        },
    )?;

    let last = outcome.log.last().expect("at least one epoch");
    writeln!(
        out,
        "trained {} epochs on {} utterances (seed {})",
        outcome.log.len(),
        utterances.len(),
        file.train.seed
    )
    .map_err(usage)?;
    write!(
        out,
        "final mean loss {:.4} (wp {:.4}, slot {:.4}, intent {:.4})",
        last.total_loss, last.wp_loss, last.slot_loss, last.intent_loss
    )
    .map_err(usage)?;
    match (last.held_out_wer, last.held_out_icer) {
        (Some(wer), Some(icer)) => {
            writeln!(out, ", held-out WER {wer:.3}, ICER {icer:.3}").map_err(usage)?
        }
        _ => writeln!(out, ", no held-out split").map_err(usage)?,
    }
    let paths = CheckpointPaths::new(ckpt_out);
    writeln!(
        out,
        "checkpoint {}, best epoch {} at {}, log {}",
        paths.out.display(),
        outcome.best_epoch,
        paths.best.display(),
        paths.log.display()
    )
    .map_err(usage)?;
    Ok(EXIT_OK)
}

fn cmd_decode(
    ckpt: &Path,
    data: &Path,
    beam: &str,
    greedy: bool,
    stream: Option<usize>,
    out_path: Option<&Path>,
    out: &mut impl Write,
) -> Result<i32, CliError> {
    let config = parse_beam(beam)?;
    if let Some(chunk) = stream {
        if chunk == 0 {
            return Err(usage("--stream expects a positive chunk size"));
        }
    }
    let params = load_checkpoint(ckpt).map_err(usage)?;
    let (utterances, vocab) = load_pair(data)?;

    let mut file_sink = out_path
        .map(|p| fs::File::create(p).map_err(|e| usage(format!("{}: {e}", p.display()))))
        .transpose()?;
    for (index, utt) in utterances.iter().enumerate() {
        let features = crate::data::feature_pipeline(&utt.features).map_err(usage)?;
        let result = if greedy {
            greedy_decode(&params, &features).map_err(usage)?
        } else {
            semantic_beam_search(&params, &features, &config).map_err(usage)?
        };
        let result = match stream {
            None => result,
            Some(chunk) => {
                let streamed = decode_streamed(&params, &features, &config, chunk)?;
                let same = result.n_best.len() == streamed.n_best.len()
                    && result.n_best.iter().zip(&streamed.n_best).all(|(a, b)| {
                        a.tokens == b.tokens
                            && a.slots == b.slots
                            && a.score.to_bits() == b.score.to_bits()
                    });
                if !same {
                    return Err(CliError::Diverged(format!(
                        "utterance {index}: streamed decode differs from batch decode"
                    )));
                }
                streamed
            }
        };
        let record = DecodeRecord {
            index,
            intent: vocab.intents[result.intent].clone(),
            intent_logprob: result.intent_logprobs[result.intent],
            n_best: result
                .n_best
                .iter()
                .map(|h| NBestRecord {
                    tokens: h.tokens.iter().map(|&t| vocab.word_pieces[t].clone()).collect(),
                    slots: h.slots.iter().map(|&s| vocab.slot_tags[s].clone()).collect(),
                    score: h.score,
                })
                .collect(),
        };
        let line = serde_json::to_string(&record).expect("record serializes");
        match &mut file_sink {
            Some(sink) => writeln!(sink, "{line}").map_err(usage)?,
            None => writeln!(out, "{line}").map_err(usage)?,
        }
    }
    if stream.is_some() {
        eprintln!("streamed and batch decodes agree on all {} utterances", utterances.len());
    }
    Ok(EXIT_OK)
}

fn decode_streamed(
    params: &ModelParams,
    features: &Tensor,
    config: &BeamConfig,
    chunk: usize,
) -> Result<crate::decoding::DecodeResult, CliError> {
    let t_len = features.shape()[0];
    let dim = features.shape()[1];
    let mut session = StreamingSession::new(params, *config).map_err(usage)?;
    let mut sent = 0;
    while sent < t_len {
        let take = chunk.min(t_len - sent);
        let piece = Tensor::new(
            vec![take, dim],
            features.values()[sent * dim..(sent + take) * dim].to_vec(),
        )
        .expect("counted values");
        session.push_frames(&piece).map_err(usage)?;
        sent += take;
    }
    session.finalize().map_err(usage)
}

fn cmd_eval(
    ckpt: &Path,
    data: &Path,
    beam: &str,
    baseline: Option<&Path>,
    out_path: Option<&Path>,
    out: &mut impl Write,
) -> Result<i32, CliError> {
    let config = parse_beam(beam)?;
    let params = load_checkpoint(ckpt).map_err(usage)?;
    let (utterances, vocab) = load_pair(data)?;
    let report = evaluate(&params, &utterances, &vocab, &config).map_err(usage)?;

    let reductions = match baseline {
        None => None,
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| usage(format!("{}: {e}", path.display())))?;
            let base: BaselineRates =
                serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            let reduce = |name: &str, baseline: f64, candidate: f64| -> Option<f64> {
                match relative_reduction(baseline, candidate) {
                    Ok(r) => Some(r),
                    Err(_) => {
                        eprintln!(
                            "warning: baseline {name} is {baseline}; relative reduction undefined"
                        );
                        None
                    }
                }
            };
            Some(Reductions {
                wer: reduce("wer", base.wer, report.wer),
                semer: reduce("semer", base.semer, report.semer),
                irer: reduce("irer", base.irer, report.irer),
                icer: reduce("icer", base.icer, report.icer),
            })
        }
    };

    #[derive(Serialize)]
    struct EvalOutput {
        #[serde(flatten)]
        report: crate::metrics::EvalReport,
        #[serde(skip_serializing_if = "Option::is_none")]
        reductions: Option<Reductions>,
    }
    let output = EvalOutput { report, reductions };
    let text = serde_json::to_string_pretty(&output).expect("report serializes");
    match out_path {
        Some(p) => {
            fs::write(p, format!("{text}\n")).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            writeln!(
                out,
                "wer {:.4} semer {:.4} irer {:.4} icer {:.4} ({} utterances) -> {}",
                output.report.wer,
                output.report.semer,
                output.report.irer,
                output.report.icer,
                output.report.utterances,
                p.display()
            )
            .map_err(usage)?;
        }
        None => writeln!(out, "{text}").map_err(usage)?,
    }
    Ok(EXIT_OK)
}
