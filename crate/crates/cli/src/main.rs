//! `basr`: generate data, train the three stages, decode and evaluate.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
//! `BASR_THREADS` caps decoding workers; 0 or 1 runs single-threaded.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use bert_asr::acoustic::EncoderKind;
use bert_asr::decoding::write_jsonl;
use bert_asr::metrics::score_records;
use bert_asr::pipeline::{
    decode_split, evaluate, load_normalized, load_trained, parse_split, run_stage, run_trends, strategy, system_name,
    RunConfig, StrategyKind,
};
use bert_asr::synth::{generate, save_dataset, SynthSpec};
use bert_asr::training::Stage;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "basr",
    version,
    about = "Acoustic-conditioned BERT speech recognition on synthetic data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus from a spec file.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Masked-LM pretraining on training transcripts.
    Pretrain(StageArgs),
    /// Next-token fine-tuning of the text-only model.
    FinetuneLm(StageArgs),
    /// Fine-tuning with the acoustic encoder attached.
    FinetuneAsr(StageArgs),
    /// Beam-search decoding of one split.
    Decode(DecodeArgs),
    /// PPL, CER and SER of the trained systems.
    Eval(EvalArgs),
    /// Train every stage and encoder in the config, then evaluate and compare.
    Trends {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// Run config (JSON); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for initialization and every stage.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long)]
    report_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum EncoderArg {
    Average,
    #[value(name = "conv1d_resnet")]
    Conv1dResnet,
}

#[derive(Args)]
struct EncoderSel {
    /// Acoustic encoder; the config's choice when omitted.
    #[arg(long, value_enum)]
    encoder: Option<EncoderArg>,
    /// Residual blocks of conv1d_resnet (default 1).
    #[arg(long)]
    blocks: Option<usize>,
}

#[derive(Args)]
struct StageArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    enc: EncoderSel,
    /// Start from fresh weights instead of the previous stage's checkpoint.
    #[arg(long)]
    from_scratch: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Oracle,
    Equal,
}

#[derive(Args)]
struct DecodeArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    enc: EncoderSel,
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
    /// Beam size [default: 10]
    #[arg(long)]
    beam: Option<usize>,
    /// Fraction of each reference forced as a known prefix.
    #[arg(long)]
    prefix_ratio: Option<f64>,
    /// Segment width for equal-length alignment; the train average when omitted.
    #[arg(long)]
    frames_per_word: Option<usize>,
    #[arg(long)]
    split: Option<String>,
    /// Output JSONL; defaults to a file in the report directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated encoders such as `average,conv1d_resnet2`; the config's encoder when omitted.
    #[arg(long, value_delimiter = ',')]
    encoders: Vec<String>,
    /// Comma-separated splits; the decode split when omitted.
    #[arg(long, value_delimiter = ',')]
    splits: Vec<String>,
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "{m}"),
            Failure::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<bert_asr::Error> for Failure {
    fn from(e: bert_asr::Error) -> Self {
        match e {
            bert_asr::Error::Config(_) | bert_asr::Error::Vocabulary(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn threads() -> CliResult<usize> {
    match std::env::var("BASR_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Failure::Usage(format!("BASR_THREADS={v:?} is not a non-negative integer"))),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn load_config(c: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::from_file(p).map_err(|e| Failure::Usage(e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.set_seed(s);
    }
    if let Some(p) = &c.data_dir {
        cfg.data_dir = p.clone();
    }
    if let Some(p) = &c.checkpoint_dir {
        cfg.checkpoint_dir = p.clone();
    }
    if let Some(p) = &c.report_dir {
        cfg.report_dir = p.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn encoder(sel: &EncoderSel, cfg: &RunConfig) -> CliResult<EncoderKind> {
    Ok(match (sel.encoder, sel.blocks) {
        (Some(EncoderArg::Average), Some(_)) => {
            return Err(Failure::Usage(
                "--blocks only applies to --encoder conv1d_resnet".into(),
            ))
        }
        (Some(EncoderArg::Average), None) => EncoderKind::Average,
        (Some(EncoderArg::Conv1dResnet), b) | (None, b @ Some(_)) => {
            EncoderKind::Conv1dResnet { blocks: b.unwrap_or(1) }
        }
        (None, None) => cfg.encoder,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let text = serde_json::to_string_pretty(value).context("serializing output")?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn gen_data(spec: &Path, out: &Path, seed: Option<u64>) -> CliResult<()> {
    let text = std::fs::read_to_string(spec)
        .map_err(|e| Failure::Usage(format!("cannot read spec {}: {e}", spec.display())))?;
    let mut spec: SynthSpec =
        serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("invalid spec {}: {e}", spec.display())))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    let ds = generate(&spec)?;
    save_dataset(&ds, out)?;
    println!(
        "wrote {} train, {} dev, {} test utterances to {}",
        ds.train.len(),
        ds.dev.len(),
        ds.test.len(),
        out.display()
    );
    Ok(())
}

fn train(stage: Stage, args: &StageArgs) -> CliResult<()> {
    let cfg = load_config(&args.common)?;
    let enc = match stage {
        Stage::FinetuneAsr => Some(encoder(&args.enc, &cfg)?),
        _ if args.enc.encoder.is_some() || args.enc.blocks.is_some() => {
            return Err(Failure::Usage(format!("{stage} takes no encoder")))
        }
        _ => None,
    };
    let ds = load_normalized(&cfg.data_dir)?;
    let summary = run_stage(&cfg, &ds, stage, enc, args.from_scratch)?;
    let dev: Vec<_> = summary.curve.split("dev").collect();
    let first = dev.first().map_or(f64::NAN, |p| p.loss);
    let last = dev.last().map_or(f64::NAN, |p| p.loss);
    println!(
        "# config {}\n{} ({}): dev loss {first:.4} -> {last:.4} over {} epochs",
        summary.fingerprint,
        stage,
        system_name(enc),
        cfg.stage_config(stage).epochs
    );
    Ok(())
}

fn decode(args: &DecodeArgs, threads: usize) -> CliResult<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(s) = args.strategy {
        cfg.decode.strategy = match s {
            StrategyArg::Oracle => StrategyKind::Oracle,
            StrategyArg::Equal => StrategyKind::Equal,
        };
    }
    if let Some(b) = args.beam {
        cfg.decode.beam_size = b;
    }
    if args.prefix_ratio.is_some() {
        cfg.decode.prefix_ratio = args.prefix_ratio;
    }
    if args.frames_per_word.is_some() {
        cfg.decode.frames_per_word = args.frames_per_word;
    }
    if let Some(s) = &args.split {
        cfg.decode.split = s.clone();
    }
    cfg.validate()?;
    let enc = encoder(&args.enc, &cfg)?;
    let split = parse_split(&cfg.decode.split)?;
    let ds = load_normalized(&cfg.data_dir)?;
    let strat = strategy(&cfg, &ds, cfg.decode.strategy)?;
    let built = load_trained(&cfg, &ds, Some(enc))?;
    let records = decode_split(
        &built,
        &ds,
        split,
        strat,
        cfg.decode.beam_size,
        cfg.decode.prefix_ratio,
        threads,
    )?;
    let out = args.out.clone().unwrap_or_else(|| {
        cfg.report_dir.join(format!(
            "decode.{}.{}.{}.jsonl",
            enc.label(),
            split.name(),
            strat.label()
        ))
    });
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    write_jsonl(&records, &out)?;
    let (cer, ser) = score_records(&records, &ds.vocab)?;
    let mut meta = out.as_os_str().to_owned();
    meta.push(".meta.json");
    write_json(
        Path::new(&meta),
        &serde_json::json!({
            "fingerprint": cfg.fingerprint(),
            "system": system_name(Some(enc)),
            "split": split.name(),
            "strategy": strat.to_string(),
            "beam_size": cfg.decode.beam_size,
            "prefix_ratio": cfg.decode.prefix_ratio,
            "cer": cer,
            "ser": ser,
        }),
    )?;
    println!(
        "# config {}\n{} {} {}: CER {:.1} SER {:.1} -> {}",
        cfg.fingerprint(),
        system_name(Some(enc)),
        split.name(),
        strat,
        100.0 * cer,
        100.0 * ser,
        out.display()
    );
    Ok(())
}

fn eval(args: &EvalArgs, threads: usize) -> CliResult<()> {
    let cfg = load_config(&args.common)?;
    let encoders = if args.encoders.is_empty() {
        vec![cfg.encoder]
    } else {
        args.encoders
            .iter()
            .map(|s| s.parse::<EncoderKind>())
            .collect::<bert_asr::Result<Vec<_>>>()
            .map_err(|e| Failure::Usage(e.to_string()))?
    };
    let split_names = if args.splits.is_empty() {
        vec![cfg.decode.split.clone()]
    } else {
        args.splits.clone()
    };
    let splits = split_names
        .iter()
        .map(|s| parse_split(s))
        .collect::<bert_asr::Result<Vec<_>>>()?;
    let ds = load_normalized(&cfg.data_dir)?;
    let report = evaluate(&cfg, &ds, &encoders, &splits, threads)?;
    let table = report.to_table();
    write_json(&cfg.report_dir.join("eval.json"), &report)?;
    write_text(&cfg.report_dir.join("eval.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn trends(common: &Common, threads: usize) -> CliResult<()> {
    let cfg = load_config(common)?;
    let ds = load_normalized(&cfg.data_dir)?;
    let outcome = run_trends(&cfg, &ds, threads)?;
    let text = outcome.to_text();
    write_json(&cfg.report_dir.join("trends.json"), &outcome)?;
    write_text(&cfg.report_dir.join("trends.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let threads = threads()?;
    match &cli.command {
        Command::GenData { spec, out, seed } => gen_data(spec, out, *seed),
        Command::Pretrain(a) => train(Stage::PretrainMlm, a),
        Command::FinetuneLm(a) => train(Stage::FinetuneLm, a),
        Command::FinetuneAsr(a) => train(Stage::FinetuneAsr, a),
        Command::Decode(a) => decode(a, threads),
        Command::Eval(a) => eval(a, threads),
        Command::Trends { common } => trends(common, threads),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(match f {
                Failure::Usage(_) => 2,
                Failure::Runtime(_) => 1,
            })
        }
    }
}
