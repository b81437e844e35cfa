//! End-to-end experiment plumbing shared by the command-line tool and the
//! acceptance harness: run configs, checkpoints between stages, decoding
//! and evaluation of whole splits, and the results matrix.
//!
//! Every stage reads its starting point from and writes its result to the
//! checkpoint directory, so running stages in one process or across several
//! invocations gives the same numbers.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acoustic::{AcousticEncoder, EncoderKind, ENCODER_PREFIX};
use crate::decoding::{decode_utterances, AlignmentStrategy, DecodeOptions, DecodeRecord, Decoder};
use crate::error::{Error, Result};
use crate::metrics::{perplexity, score_records, EvalReport, UtteranceScore};
use crate::model::{Bert, ModelConfig};
use crate::nn::ParamStore;
use crate::synth::{average_frames_per_word, load_dataset, Dataset, Split, Utterance};
use crate::training::{train_stage, LossCurve, Networks, Stage, TrainConfig};

/// Model hyperparameters; the vocabulary size comes from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelShape {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub dropout_rate: f64,
}

impl Default for ModelShape {
    fn default() -> Self {
        ModelShape {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_positions: 64,
            dropout_rate: 0.1,
        }
    }
}

impl ModelShape {
    pub fn with_vocab(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_positions: self.max_positions,
            vocab_size,
            dropout_rate: self.dropout_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Oracle,
    Equal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub strategy: StrategyKind,
    pub beam_size: usize,
    pub prefix_ratio: Option<f64>,
    /// Overrides the train-split average for equal-length segments.
    pub frames_per_word: Option<usize>,
    pub split: String,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            strategy: StrategyKind::Oracle,
            beam_size: 10,
            prefix_ratio: None,
            frames_per_word: None,
            split: "dev".into(),
        }
    }
}

/// The results matrix: text-only model plus one fused model per encoder,
/// under both alignment strategies, and the prefix-forcing table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrendsConfig {
    pub encoders: Vec<EncoderKind>,
    pub splits: Vec<String>,
    pub prefix_ratios: Vec<f64>,
    /// Encoder used for the prefix table; the first listed when absent.
    pub prefix_encoder: Option<EncoderKind>,
}

impl Default for TrendsConfig {
    fn default() -> Self {
        TrendsConfig {
            encoders: vec![
                EncoderKind::Average,
                EncoderKind::Conv1dResnet { blocks: 1 },
                EncoderKind::Conv1dResnet { blocks: 2 },
                EncoderKind::Conv1dResnet { blocks: 3 },
                EncoderKind::Conv1dResnet { blocks: 4 },
            ],
            splits: vec!["dev".into(), "test".into()],
            prefix_ratios: vec![0.0, 1.0 / 3.0, 0.5],
            prefix_encoder: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
    pub seed: u64,
    pub model: ModelShape,
    pub pretrain: TrainConfig,
    pub finetune_lm: TrainConfig,
    pub finetune_asr: TrainConfig,
    pub encoder: EncoderKind,
    pub decode: DecodeConfig,
    pub trends: TrendsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_dir: "data".into(),
            checkpoint_dir: "runs/checkpoints".into(),
            report_dir: "runs/reports".into(),
            seed: 1,
            model: ModelShape::default(),
            pretrain: TrainConfig {
                epochs: 20,
                batch_size: 32,
                ..TrainConfig::default()
            },
            finetune_lm: TrainConfig {
                epochs: 8,
                ..TrainConfig::default()
            },
            finetune_asr: TrainConfig {
                epochs: 20,
                batch_size: 32,
                ..TrainConfig::default()
            },
            encoder: EncoderKind::Average,
            decode: DecodeConfig::default(),
            trends: TrendsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Data {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })
    }

    /// Makes `seed` the initialization seed and every stage's seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        for c in [&mut self.pretrain, &mut self.finetune_lm, &mut self.finetune_asr] {
            c.seed = seed;
        }
    }

    pub fn stage_config(&self, stage: Stage) -> &TrainConfig {
        match stage {
            Stage::PretrainMlm => &self.pretrain,
            Stage::FinetuneLm => &self.finetune_lm,
            Stage::FinetuneAsr => &self.finetune_asr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.with_vocab(crate::text::NUM_SPECIALS + 1).validate()?;
        for s in Stage::ALL {
            self.stage_config(s)
                .validate()
                .map_err(|e| Error::Config(format!("{s}: {e}")))?;
        }
        if self.decode.beam_size == 0 {
            return Err(Error::Config("decode.beam_size must be at least 1".into()));
        }
        if let Some(r) = self.decode.prefix_ratio {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("decode.prefix_ratio {r} outside [0, 1]")));
            }
            if self.decode.strategy != StrategyKind::Oracle {
                return Err(Error::Config("decode.prefix_ratio needs the oracle strategy".into()));
            }
        }
        if self.decode.frames_per_word == Some(0) {
            return Err(Error::Config("decode.frames_per_word must be at least 1".into()));
        }
        parse_split(&self.decode.split)?;
        for s in &self.trends.splits {
            parse_split(s)?;
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

pub fn parse_split(s: &str) -> Result<Split> {
    Split::ALL
        .into_iter()
        .find(|x| x.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown split {s:?} (train, dev or test)")))
}

/// Loads the dataset and applies its normalization statistics.
pub fn load_normalized(dir: &Path) -> Result<Dataset> {
    let mut ds = load_dataset(dir)?;
    ds.normalize();
    Ok(ds)
}

/// Display name of a system in reports.
pub fn system_name(encoder: Option<EncoderKind>) -> String {
    match encoder {
        None => "BERT-LM".into(),
        Some(k) => k.to_string(),
    }
}

pub fn checkpoint_stem(stage: Stage, encoder: Option<EncoderKind>) -> String {
    match (stage, encoder) {
        (Stage::FinetuneAsr, Some(k)) => format!("{}.{}", stage.name(), k.label()),
        _ => stage.name().to_string(),
    }
}

/// Parameters plus the networks addressing them.
#[derive(Debug, Clone)]
pub struct Built {
    pub store: ParamStore,
    pub model: Bert,
    pub encoder: Option<AcousticEncoder>,
}

impl Built {
    /// Fresh parameters. The text model is registered first, so its
    /// initialization does not depend on the encoder choice.
    pub fn new(cfg: &RunConfig, ds: &Dataset, encoder: Option<EncoderKind>) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = Bert::new(cfg.model.with_vocab(ds.vocab.len()), &mut store, &mut rng)?;
        let feature_dim = ds
            .train
            .first()
            .map(|u| u.features.dim())
            .ok_or_else(|| Error::Config("empty training split".into()))?;
        let encoder = encoder.map(|k| AcousticEncoder::new(k, feature_dim, cfg.model.d_model, &mut store, &mut rng));
        Ok(Built { store, model, encoder })
    }

    pub fn networks(&self) -> Networks<'_> {
        Networks {
            model: &self.model,
            encoder: self.encoder.as_ref(),
        }
    }

    pub fn decoder(&self) -> Decoder<'_> {
        Decoder {
            store: &self.store,
            model: &self.model,
            encoder: self.encoder.as_ref(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageSummary {
    pub fingerprint: String,
    pub stage: Stage,
    pub encoder: Option<EncoderKind>,
    pub from_scratch: bool,
    pub train_config: TrainConfig,
    pub model: ModelConfig,
    pub curve: LossCurve,
}

/// Trains one stage and writes `<stem>.ckpt`, `<stem>.loss.csv` and
/// `<stem>.json` into the checkpoint directory.
pub fn run_stage(
    cfg: &RunConfig,
    ds: &Dataset,
    stage: Stage,
    encoder: Option<EncoderKind>,
    from_scratch: bool,
) -> Result<StageSummary> {
    let encoder = if stage == Stage::FinetuneAsr {
        Some(encoder.ok_or_else(|| Error::Config(format!("{stage} needs an encoder")))?)
    } else {
        None
    };
    let mut built = Built::new(cfg, ds, encoder)?;
    if let (Some(prev), false) = (stage.previous(), from_scratch) {
        let path = cfg.checkpoint_dir.join(format!("{}.ckpt", checkpoint_stem(prev, None)));
        if !path.exists() {
            return Err(Error::MissingCheckpoint {
                stage: stage.name().into(),
                needed: prev.name().into(),
                path,
            });
        }
        built
            .store
            .load_matching(&path, false, |name| !name.starts_with(ENCODER_PREFIX))?;
    }
    let train_cfg = cfg.stage_config(stage);
    let nets = Networks {
        model: &built.model,
        encoder: built.encoder.as_ref(),
    };
    let curve = train_stage(stage, nets, &mut built.store, &ds.train, &ds.dev, train_cfg)?;
    std::fs::create_dir_all(&cfg.checkpoint_dir)?;
    let stem = cfg.checkpoint_dir.join(checkpoint_stem(stage, encoder));
    built.store.save(&path_with_suffix(&stem, ".ckpt"))?;
    curve.write_csv(&path_with_suffix(&stem, ".loss.csv"))?;
    let summary = StageSummary {
        fingerprint: cfg.fingerprint(),
        stage,
        encoder,
        from_scratch,
        train_config: train_cfg.clone(),
        model: built.model.config.clone(),
        curve,
    };
    std::fs::write(
        path_with_suffix(&stem, ".json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(summary)
}

fn path_with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// The text-only model after its fine-tuning stage, or the fused model
/// for `encoder`.
pub fn load_trained(cfg: &RunConfig, ds: &Dataset, encoder: Option<EncoderKind>) -> Result<Built> {
    let stage = if encoder.is_some() {
        Stage::FinetuneAsr
    } else {
        Stage::FinetuneLm
    };
    let path = cfg
        .checkpoint_dir
        .join(format!("{}.ckpt", checkpoint_stem(stage, encoder)));
    if !path.exists() {
        return Err(Error::MissingCheckpoint {
            stage: "evaluation".into(),
            needed: checkpoint_stem(stage, encoder),
            path,
        });
    }
    let mut built = Built::new(cfg, ds, encoder)?;
    built.store.load(&path, false)?;
    Ok(built)
}

pub fn frames_per_word(cfg: &RunConfig, ds: &Dataset) -> Result<usize> {
    match cfg.decode.frames_per_word {
        Some(w) => Ok(w),
        None => average_frames_per_word(&ds.train),
    }
}

pub fn strategy(cfg: &RunConfig, ds: &Dataset, kind: StrategyKind) -> Result<AlignmentStrategy> {
    Ok(match kind {
        StrategyKind::Oracle => AlignmentStrategy::Oracle,
        StrategyKind::Equal => AlignmentStrategy::EqualLength {
            frames_per_word: frames_per_word(cfg, ds)?,
        },
    })
}

fn check_alignments(utts: &[Utterance], strategy: AlignmentStrategy, split: &str) -> Result<()> {
    if strategy == AlignmentStrategy::Oracle {
        if let Some(u) = utts.iter().find(|u| u.alignment.is_none()) {
            return Err(Error::Alignment(format!(
                "oracle decoding needs alignments, but {split} utterance {} has none",
                u.id
            )));
        }
    }
    Ok(())
}

/// Decodes one split with a trained system.
pub fn decode_split(
    built: &Built,
    ds: &Dataset,
    split: Split,
    strategy: AlignmentStrategy,
    beam_size: usize,
    prefix_ratio: Option<f64>,
    threads: usize,
) -> Result<Vec<DecodeRecord>> {
    if built.encoder.is_none() {
        return Err(Error::Decode("decoding needs a model with an acoustic encoder".into()));
    }
    let utts = ds.split(split);
    check_alignments(utts, strategy, split.name())?;
    let opts = DecodeOptions {
        strategy,
        beam_size,
        prefix_ratio,
        threads,
    };
    decode_utterances(&built.decoder(), &ds.vocab, utts, &opts)
}

/// PPL of the text-only model and PPL, CER and SER (oracle and practical)
/// of each fused model, on every requested split.
pub fn evaluate(
    cfg: &RunConfig,
    ds: &Dataset,
    encoders: &[EncoderKind],
    splits: &[Split],
    threads: usize,
) -> Result<EvalReport> {
    let mut report = EvalReport {
        fingerprint: cfg.fingerprint(),
        ..Default::default()
    };
    let lm = load_trained(cfg, ds, None)?;
    let bs = cfg.finetune_lm.batch_size;
    for &split in splits {
        report.row_mut(&system_name(None), split.name()).ppl =
            Some(perplexity(&lm.store, lm.networks(), ds.split(split), bs)?);
    }
    let practical = strategy(cfg, ds, StrategyKind::Equal)?;
    for &enc in encoders {
        let built = load_trained(cfg, ds, Some(enc))?;
        let name = system_name(Some(enc));
        for &split in splits {
            let ppl = perplexity(&built.store, built.networks(), ds.split(split), bs)?;
            let oracle = decode_split(
                &built,
                ds,
                split,
                AlignmentStrategy::Oracle,
                cfg.decode.beam_size,
                None,
                threads,
            )?;
            let equal = decode_split(&built, ds, split, practical, cfg.decode.beam_size, None, threads)?;
            let (co, so) = score_records(&oracle, &ds.vocab)?;
            let (cp, sp) = score_records(&equal, &ds.vocab)?;
            let row = report.row_mut(&name, split.name());
            row.ppl = Some(ppl);
            row.cer_oracle = Some(co);
            row.ser_oracle = Some(so);
            row.cer_practical = Some(cp);
            row.ser_practical = Some(sp);
            for r in oracle.iter().chain(&equal) {
                report
                    .utterances
                    .push(UtteranceScore::from_record(&name, split.name(), r, &ds.vocab));
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixRow {
    pub ratio: f64,
    pub cer: f64,
    pub ser: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixTable {
    pub fingerprint: String,
    pub system: String,
    pub split: String,
    pub rows: Vec<PrefixRow>,
}

impl PrefixTable {
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "# config {} | {} | {} | oracle alignment, forced prefix scored\nratio |   CER |   SER\n------|-------|------\n",
            self.fingerprint, self.system, self.split
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:>5.3} | {:>5.1} | {:>5.1}\n",
                r.ratio,
                100.0 * r.cer,
                100.0 * r.ser
            ));
        }
        out
    }
}

pub fn prefix_table(
    cfg: &RunConfig,
    ds: &Dataset,
    encoder: EncoderKind,
    split: Split,
    ratios: &[f64],
    threads: usize,
) -> Result<PrefixTable> {
    let built = load_trained(cfg, ds, Some(encoder))?;
    let mut rows = Vec::new();
    for &ratio in ratios {
        let recs = decode_split(
            &built,
            ds,
            split,
            AlignmentStrategy::Oracle,
            cfg.decode.beam_size,
            Some(ratio),
            threads,
        )?;
        let (cer, ser) = score_records(&recs, &ds.vocab)?;
        rows.push(PrefixRow { ratio, cer, ser });
    }
    Ok(PrefixTable {
        fingerprint: cfg.fingerprint(),
        system: system_name(Some(encoder)),
        split: split.name().into(),
        rows,
    })
}

/// A directional comparison between two entries of the results matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub claim: String,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

impl Comparison {
    fn less(claim: String, lhs: f64, rhs: f64) -> Self {
        Comparison {
            claim,
            lhs,
            rhs,
            holds: lhs < rhs,
        }
    }
}

/// The orderings the results matrix is expected to show on `split`.
pub fn trend_comparisons(report: &EvalReport, encoders: &[EncoderKind], split: &str) -> Vec<Comparison> {
    let mut out = Vec::new();
    let lm_ppl = report.row(&system_name(None), split).and_then(|r| r.ppl);
    let avg = report.row(&system_name(Some(EncoderKind::Average)), split).cloned();
    for &enc in encoders {
        let name = system_name(Some(enc));
        let Some(row) = report.row(&name, split) else { continue };
        if let (Some(a), Some(b)) = (row.ppl, lm_ppl) {
            out.push(Comparison::less(format!("PPL {name} < PPL BERT-LM"), a, b));
        }
        if let (Some(a), Some(b)) = (row.cer_oracle, row.cer_practical) {
            out.push(Comparison::less(format!("{name}: CER oracle < CER practical"), a, b));
        }
        if let (Some(a), Some(b)) = (row.ser_oracle, row.cer_oracle) {
            out.push(Comparison::less(format!("{name}: SER oracle < CER oracle"), a, b));
        }
        if let (EncoderKind::Conv1dResnet { .. }, Some(avg)) = (enc, &avg) {
            if let (Some(a), Some(b)) = (row.cer_oracle, avg.cer_oracle) {
                out.push(Comparison::less(
                    format!("CER oracle {name} < CER oracle Average"),
                    a,
                    b,
                ));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrendsOutcome {
    pub report: EvalReport,
    pub prefix: PrefixTable,
    pub comparisons: Vec<Comparison>,
}

impl TrendsOutcome {
    pub fn to_text(&self) -> String {
        let mut out = self.report.to_table();
        out.push('\n');
        out.push_str(&self.prefix.to_table());
        out.push('\n');
        for c in &self.comparisons {
            out.push_str(&format!(
                "[{}] {} ({:.4} vs {:.4})\n",
                if c.holds { "holds" } else { "fails" },
                c.claim,
                c.lhs,
                c.rhs
            ));
        }
        out
    }
}

/// Trains every stage for every configured encoder, then evaluates.
pub fn run_trends(cfg: &RunConfig, ds: &Dataset, threads: usize) -> Result<TrendsOutcome> {
    let encoders = &cfg.trends.encoders;
    if encoders.is_empty() {
        return Err(Error::Config("trends.encoders is empty".into()));
    }
    run_stage(cfg, ds, Stage::PretrainMlm, None, false)?;
    run_stage(cfg, ds, Stage::FinetuneLm, None, false)?;
    for &enc in encoders {
        run_stage(cfg, ds, Stage::FinetuneAsr, Some(enc), false)?;
    }
    let splits: Vec<Split> = cfg
        .trends
        .splits
        .iter()
        .map(|s| parse_split(s))
        .collect::<Result<_>>()?;
    let report = evaluate(cfg, ds, encoders, &splits, threads)?;
    let first = splits.first().copied().unwrap_or(Split::Dev);
    let prefix_enc = cfg.trends.prefix_encoder.unwrap_or(encoders[0]);
    let prefix = prefix_table(cfg, ds, prefix_enc, first, &cfg.trends.prefix_ratios, threads)?;
    let comparisons = trend_comparisons(&report, encoders, first.name());
    Ok(TrendsOutcome {
        report,
        prefix,
        comparisons,
    })
}
