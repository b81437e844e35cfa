//! The three-stage recipe: MLM pretraining, next-token fine-tuning over
//! exhaustively enumerated prefixes, and fine-tuning with acoustic fusion.

use std::fmt;
use std::io::Write;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acoustic::{AcousticEncoder, AcousticFeatures, Alignment};
use crate::error::{Error, Result};
use crate::model::{Bert, InputBatch, ENCODER_STACK_PREFIX};
use crate::nn::{Gradients, Graph, ParamStore, Tensor, Var};
use crate::synth::Utterance;
use crate::text::{Transcript, CLS, MASK};

/// One next-token prediction problem: `([CLS], y_1..y_{t-1}) -> y_t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LmSample {
    pub context: Vec<usize>,
    pub target: usize,
    /// Index of the source utterance in the corpus slice it came from.
    pub utterance: usize,
    /// 1-based step `t`; equals `context.len()`.
    pub step: usize,
}

/// An [`LmSample`] plus the acoustic source of its embeddings. Position 0
/// pairs with segment `t`, position `i >= 1` with segment `i`.
#[derive(Debug, Clone, Copy)]
pub struct AsrSample<'a> {
    pub lm: &'a LmSample,
    pub features: &'a AcousticFeatures,
    pub alignment: &'a Alignment,
}

pub fn enumerate_lm_samples(t: &Transcript, utterance: usize) -> Vec<LmSample> {
    let y = &t.token_ids;
    (1..=y.len())
        .map(|step| {
            let mut context = Vec::with_capacity(step);
            context.push(CLS);
            context.extend_from_slice(&y[..step - 1]);
            LmSample {
                context,
                target: y[step - 1],
                utterance,
                step,
            }
        })
        .collect()
}

pub fn enumerate_corpus(utts: &[Utterance]) -> Vec<LmSample> {
    utts.iter()
        .enumerate()
        .flat_map(|(i, u)| enumerate_lm_samples(&u.transcript, i))
        .collect()
}

pub fn asr_samples<'a>(utts: &'a [Utterance], samples: &'a [LmSample]) -> Result<Vec<AsrSample<'a>>> {
    samples
        .iter()
        .map(|s| {
            let u = &utts[s.utterance];
            let alignment = u.alignment()?;
            if alignment.num_segments() < s.step {
                return Err(Error::Alignment(format!(
                    "utterance {} has {} segments, sample needs {}",
                    u.id,
                    alignment.num_segments(),
                    s.step
                )));
            }
            Ok(AsrSample {
                lm: s,
                features: &u.features,
                alignment,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub mask_fraction: f64,
    pub mask_replace: f64,
    pub mask_random: f64,
    pub mask_keep: f64,
    pub seed: u64,
    pub warmup_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Keep embeddings and transformer layers fixed; only heads and the
    /// acoustic encoder learn.
    pub freeze_encoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 10,
            mask_fraction: 0.15,
            mask_replace: 0.8,
            mask_random: 0.1,
            mask_keep: 0.1,
            seed: 1,
            warmup_fraction: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            freeze_encoder: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let split = self.mask_replace + self.mask_random + self.mask_keep;
        if (split - 1.0).abs() > 1e-9 {
            return bad(format!("mask_replace + mask_random + mask_keep = {split}, expected 1"));
        }
        for (name, v) in [
            ("mask_fraction", self.mask_fraction),
            ("mask_replace", self.mask_replace),
            ("mask_random", self.mask_random),
            ("mask_keep", self.mask_keep),
            ("warmup_fraction", self.warmup_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSequence {
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Selects each position with probability `mask_fraction` (forcing one
/// when none is drawn) and corrupts the selection 80/10/10.
pub fn mlm_mask(seq: &[usize], cfg: &TrainConfig, regular: Range<usize>, rng: &mut ChaCha8Rng) -> MaskedSequence {
    let mut positions: Vec<usize> = (0..seq.len())
        .filter(|_| rng.gen::<f64>() < cfg.mask_fraction)
        .collect();
    if positions.is_empty() && !seq.is_empty() {
        positions.push(rng.gen_range(0..seq.len()));
    }
    let mut tokens = seq.to_vec();
    let targets = positions.iter().map(|&p| seq[p]).collect();
    for &p in &positions {
        let u: f64 = rng.gen();
        if u < cfg.mask_replace {
            tokens[p] = MASK;
        } else if u < cfg.mask_replace + cfg.mask_random {
            tokens[p] = rng.gen_range(regular.clone());
        }
    }
    MaskedSequence {
        tokens,
        positions,
        targets,
    }
}

pub fn lm_batch(samples: &[&LmSample]) -> Result<InputBatch> {
    let contexts: Vec<&[usize]> = samples.iter().map(|s| s.context.as_slice()).collect();
    let targets: Vec<usize> = samples.iter().map(|s| s.target).collect();
    InputBatch::from_contexts(&contexts, &targets)
}

/// Builds the padded batch and sums the acoustic embeddings into it.
pub fn asr_batch(g: &mut Graph, encoder: &AcousticEncoder, samples: &[AsrSample]) -> Result<InputBatch> {
    let lm: Vec<&LmSample> = samples.iter().map(|s| s.lm).collect();
    let batch = lm_batch(&lm)?;
    // encode each distinct utterance once
    let mut sources: Vec<(&AcousticFeatures, &Alignment)> = Vec::new();
    let mut offsets: Vec<(usize, usize)> = Vec::new();
    let mut rows_so_far = 0;
    let mut slot = Vec::with_capacity(samples.len());
    for s in samples {
        let found = offsets.iter().position(|&(u, _)| u == s.lm.utterance);
        let idx = match found {
            Some(i) => i,
            None => {
                sources.push((s.features, s.alignment));
                offsets.push((s.lm.utterance, rows_so_far));
                rows_so_far += s.alignment.num_segments();
                offsets.len() - 1
            }
        };
        slot.push(offsets[idx].1);
    }
    let ae = encoder.forward(g, &sources)?;
    let mut rows = vec![None; batch.batch * batch.seq];
    for (b, (s, &base)) in samples.iter().zip(&slot).enumerate() {
        let t = s.lm.step;
        rows[b * batch.seq] = Some(base + t - 1);
        for i in 1..t {
            rows[b * batch.seq + i] = Some(base + i - 1);
        }
    }
    let placed = g.gather_rows(ae, &rows)?;
    Ok(batch.with_acoustic(placed))
}

/// Mean negative log-likelihood of the targets given their contexts.
pub fn lm_loss(g: &mut Graph, model: &Bert, samples: &[&LmSample], dropout: Option<&mut ChaCha8Rng>) -> Result<Var> {
    let batch = lm_batch(samples)?;
    let logits = model.cls_next_token_logits(g, &batch, dropout)?;
    g.cross_entropy(logits, &batch.target_ids)
}

/// [`lm_loss`] with acoustic embeddings added to the input.
pub fn asr_loss(
    g: &mut Graph,
    model: &Bert,
    encoder: &AcousticEncoder,
    samples: &[AsrSample],
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let batch = asr_batch(g, encoder, samples)?;
    let logits = model.cls_next_token_logits(g, &batch, dropout)?;
    g.cross_entropy(logits, &batch.target_ids)
}

/// Mean cross-entropy at the masked positions of `[CLS]`-prefixed sequences.
pub fn mlm_loss(
    g: &mut Graph,
    model: &Bert,
    masked: &[&MaskedSequence],
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let contexts: Vec<Vec<usize>> = masked
        .iter()
        .map(|m| std::iter::once(CLS).chain(m.tokens.iter().copied()).collect())
        .collect();
    let batch = InputBatch::from_contexts(&contexts, &[])?;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (b, m) in masked.iter().enumerate() {
        rows.extend(m.positions.iter().map(|p| b * batch.seq + p + 1));
        targets.extend_from_slice(&m.targets);
    }
    let logits = model.mlm_logits_at(g, &batch, &rows, dropout)?;
    g.cross_entropy(logits, &targets)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    PretrainMlm,
    FinetuneLm,
    FinetuneAsr,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::PretrainMlm, Stage::FinetuneLm, Stage::FinetuneAsr];

    pub fn name(self) -> &'static str {
        match self {
            Stage::PretrainMlm => "pretrain-mlm",
            Stage::FinetuneLm => "finetune-lm",
            Stage::FinetuneAsr => "finetune-asr",
        }
    }

    /// The stage whose checkpoint this one starts from.
    pub fn previous(self) -> Option<Stage> {
        match self {
            Stage::PretrainMlm => None,
            Stage::FinetuneLm => Some(Stage::PretrainMlm),
            Stage::FinetuneAsr => Some(Stage::FinetuneLm),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub ppl: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub points: Vec<LossPoint>,
}

impl LossCurve {
    fn push(&mut self, epoch: usize, split: &str, loss: f64) {
        self.points.push(LossPoint {
            epoch,
            split: split.to_string(),
            loss,
            ppl: loss.exp(),
        });
    }

    pub fn split(&self, split: &str) -> impl Iterator<Item = &LossPoint> {
        let split = split.to_string();
        self.points.iter().filter(move |p| p.split == split)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,split,loss,ppl\n");
        for p in &self.points {
            s.push_str(&format!("{},{},{},{}\n", p.epoch, p.split, p.loss, p.ppl));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

/// Adam with linear warmup; parameters without a gradient are left alone.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    warmup_steps: usize,
    step: usize,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, total_steps: usize) -> Self {
        Adam {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            warmup_steps: (cfg.warmup_fraction * total_steps as f64).ceil() as usize,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn current_lr(&self) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * ((self.step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, trainable: &[bool]) {
        let lr = self.current_lr();
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        self.m.resize(store.len(), None);
        self.v.resize(store.len(), None);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            if !trainable[i] {
                continue;
            }
            let Some(g) = grads.param(id) else { continue };
            let shape = g.shape().to_vec();
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(&shape));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(&shape));
            let p = store.get_mut(id).tensor.data_mut();
            for (((p, g), m), v) in p.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// The networks a stage trains; parameters live in the accompanying store.
#[derive(Debug, Clone, Copy)]
pub struct Networks<'a> {
    pub model: &'a Bert,
    /// Required by the acoustic stage, ignored by the others.
    pub encoder: Option<&'a AcousticEncoder>,
}

enum Examples<'a> {
    Mlm(Vec<MaskedSequence>),
    Lm(Vec<&'a LmSample>),
    Asr(Vec<AsrSample<'a>>),
}

impl Examples<'_> {
    fn len(&self) -> usize {
        match self {
            Examples::Mlm(v) => v.len(),
            Examples::Lm(v) => v.len(),
            Examples::Asr(v) => v.len(),
        }
    }

    fn seq_len(&self, i: usize) -> usize {
        match self {
            Examples::Mlm(v) => v[i].tokens.len(),
            Examples::Lm(v) => v[i].step,
            Examples::Asr(v) => v[i].lm.step,
        }
    }

    /// Loss and its weight (number of predicted tokens) for a batch.
    fn loss(
        &self,
        g: &mut Graph,
        nets: Networks,
        idx: &[usize],
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, usize)> {
        match self {
            Examples::Mlm(v) => {
                let batch: Vec<&MaskedSequence> = idx.iter().map(|&i| &v[i]).collect();
                let n = batch.iter().map(|m| m.positions.len()).sum();
                Ok((mlm_loss(g, nets.model, &batch, dropout)?, n))
            }
            Examples::Lm(v) => {
                let batch: Vec<&LmSample> = idx.iter().map(|&i| v[i]).collect();
                Ok((lm_loss(g, nets.model, &batch, dropout)?, idx.len()))
            }
            Examples::Asr(v) => {
                let batch: Vec<AsrSample> = idx.iter().map(|&i| v[i]).collect();
                let enc = nets.encoder.expect("checked by train_stage");
                Ok((asr_loss(g, nets.model, enc, &batch, dropout)?, idx.len()))
            }
        }
    }
}

const BUCKET_BATCHES: usize = 50;

/// Groups of example indices that must share a batch. Acoustic examples
/// stay with the rest of their utterance so each utterance is encoded once
/// per batch; everything else is grouped singly.
fn units(ex: &Examples) -> Vec<Vec<usize>> {
    match ex {
        Examples::Asr(v) => {
            let mut out: Vec<Vec<usize>> = Vec::new();
            for (i, s) in v.iter().enumerate() {
                match out.last_mut() {
                    Some(u) if v[u[0]].lm.utterance == s.lm.utterance => u.push(i),
                    _ => out.push(vec![i]),
                }
            }
            out
        }
        _ => (0..ex.len()).map(|i| vec![i]).collect(),
    }
}

/// Packs units in order into batches of at least `batch_size` examples
/// (the last may be smaller).
fn pack(units: &[&Vec<usize>], batch_size: usize) -> Vec<Vec<usize>> {
    let mut batches = Vec::new();
    let mut cur = Vec::new();
    for u in units {
        cur.extend_from_slice(u);
        if cur.len() >= batch_size {
            batches.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches
}

/// Shuffled batches of similar sequence length: shuffle, sort within
/// windows of `BUCKET_BATCHES` batches, then shuffle the batch order.
fn make_batches(ex: &Examples, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let all = units(ex);
    let per_unit = ex.len().div_ceil(all.len().max(1)).max(1);
    let mut order: Vec<&Vec<usize>> = all.iter().collect();
    order.shuffle(rng);
    let window = (batch_size * BUCKET_BATCHES).div_ceil(per_unit).max(1);
    let mut batches = Vec::new();
    for w in order.chunks_mut(window) {
        w.sort_by_key(|u| u.iter().map(|&i| ex.seq_len(i)).max().unwrap_or(0));
        batches.extend(pack(w, batch_size));
    }
    batches.shuffle(rng);
    batches
}

fn sequential_batches(ex: &Examples, batch_size: usize) -> Vec<Vec<usize>> {
    let all = units(ex);
    pack(&all.iter().collect::<Vec<_>>(), batch_size)
}

/// Token-weighted mean loss without dropout or parameter updates.
fn evaluate(store: &ParamStore, nets: Networks, ex: &Examples, batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for idx in sequential_batches(ex, batch_size) {
        let mut g = Graph::new(store);
        let (loss, n) = ex.loss(&mut g, nets, &idx, None)?;
        total += g.value(loss).item() * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::Config("nothing to evaluate".into()));
    }
    Ok(total / count as f64)
}

fn stage_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn masked_corpus(
    utts: &[Utterance],
    cfg: &TrainConfig,
    regular: Range<usize>,
    rng: &mut ChaCha8Rng,
) -> Examples<'static> {
    Examples::Mlm(
        utts.iter()
            .map(|u| mlm_mask(&u.transcript.token_ids, cfg, regular.clone(), rng))
            .collect(),
    )
}

fn build_examples<'a>(
    stage: Stage,
    utts: &'a [Utterance],
    lm: &'a [LmSample],
    cfg: &TrainConfig,
    regular: Range<usize>,
    masking: &mut ChaCha8Rng,
) -> Result<Examples<'a>> {
    Ok(match stage {
        Stage::PretrainMlm => masked_corpus(utts, cfg, regular, masking),
        Stage::FinetuneLm => Examples::Lm(lm.iter().collect()),
        Stage::FinetuneAsr => Examples::Asr(asr_samples(utts, lm)?),
    })
}

/// Runs one training stage, updating `store` in place. The curve holds
/// the dev loss before training (epoch 0) and per-epoch train/dev losses.
pub fn train_stage(
    stage: Stage,
    nets: Networks,
    store: &mut ParamStore,
    train: &[Utterance],
    dev: &[Utterance],
    cfg: &TrainConfig,
) -> Result<LossCurve> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config(format!("{stage}: empty training split")));
    }
    if stage == Stage::FinetuneAsr && nets.encoder.is_none() {
        return Err(Error::Config(format!("{stage} needs an acoustic encoder")));
    }
    let regular = crate::text::NUM_SPECIALS..nets.model.config.vocab_size;
    let trainable: Vec<bool> = store
        .iter()
        .map(|(_, p)| !(cfg.freeze_encoder && p.name.starts_with(ENCODER_STACK_PREFIX)))
        .collect();

    let train_lm = enumerate_corpus(train);
    let dev_lm = enumerate_corpus(dev);
    let examples = |utts, lm, masking: &mut ChaCha8Rng| build_examples(stage, utts, lm, cfg, regular.clone(), masking);
    let dev_loss = |store: &ParamStore| -> Result<Option<f64>> {
        if dev.is_empty() {
            return Ok(None);
        }
        // dev masks are redrawn from the same stream each time
        let ex = examples(dev, &dev_lm, &mut stage_rng(cfg.seed, 4))?;
        evaluate(store, nets, &ex, cfg.batch_size).map(Some)
    };

    let mut curve = LossCurve::default();
    if let Some(l) = dev_loss(store)? {
        curve.push(0, "dev", l);
    }

    let mut shuffle_rng = stage_rng(cfg.seed, 1);
    let mut dropout_rng = stage_rng(cfg.seed, 2);
    let mut mask_rng = stage_rng(cfg.seed, 3);
    let fixed = examples(train, &train_lm, &mut mask_rng)?;
    let steps_per_epoch = fixed.len().div_ceil(cfg.batch_size);
    let mut adam = Adam::new(cfg, steps_per_epoch * cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let remasked;
        let ex = if stage == Stage::PretrainMlm && epoch > 1 {
            remasked = examples(train, &train_lm, &mut mask_rng)?;
            &remasked
        } else {
            &fixed
        };
        let mut total = 0.0;
        let mut count = 0;
        for (step, idx) in make_batches(ex, cfg.batch_size, &mut shuffle_rng)
            .into_iter()
            .enumerate()
        {
            let mut g = Graph::new(store);
            let (loss, n) = ex.loss(&mut g, nets, &idx, Some(&mut dropout_rng))?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Divergence {
                    stage: stage.name().to_string(),
                    epoch,
                    step,
                    loss: value,
                });
            }
            let grads = g.backward(loss)?;
            drop(g);
            adam.step(store, &grads, &trainable);
            total += value * n as f64;
            count += n;
        }
        curve.push(epoch, "train", total / count as f64);
        if let Some(l) = dev_loss(store)? {
            if !l.is_finite() {
                return Err(Error::Divergence {
                    stage: stage.name().to_string(),
                    epoch,
                    step: steps_per_epoch,
                    loss: l,
                });
            }
            curve.push(epoch, "dev", l);
        }
    }
    Ok(curve)
}

/// Sum of per-token negative log-likelihoods and the token count, under
/// the text-only model or, with an encoder, the acoustically fused one.
pub fn corpus_nll(store: &ParamStore, nets: Networks, utts: &[Utterance], batch_size: usize) -> Result<(f64, usize)> {
    let lm = enumerate_corpus(utts);
    let ex = match nets.encoder {
        None => Examples::Lm(lm.iter().collect()),
        Some(_) => Examples::Asr(asr_samples(utts, &lm)?),
    };
    let mut total = 0.0;
    let mut count = 0;
    for idx in sequential_batches(&ex, batch_size.max(1)) {
        let mut g = Graph::new(store);
        let (loss, n) = ex.loss(&mut g, nets, &idx, None)?;
        total += g.value(loss).item() * n as f64;
        count += n;
    }
    Ok((total, count))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acoustic::EncoderKind;
    use crate::model::ModelConfig;
    use crate::synth::{generate, SynthSpec};
    use crate::text::NUM_SPECIALS;

    fn tiny_model(vocab: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Bert {
        let cfg = ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 24,
            max_positions: 20,
            vocab_size: vocab,
            dropout_rate: 0.1,
        };
        Bert::new(cfg, store, rng).unwrap()
    }

    fn toy_data(n: usize) -> crate::synth::Dataset {
        let mut ds = generate(&SynthSpec {
            n_train: n,
            n_dev: 10,
            n_test: 2,
            duration_range: [3, 6],
            ..SynthSpec::default()
        })
        .unwrap();
        ds.normalize();
        ds
    }

    #[test]
    fn enumeration_examples() {
        let t = Transcript::new(vec![7, 8, 9]).unwrap();
        let s = enumerate_lm_samples(&t, 4);
        assert_eq!(s.len(), 3);
        assert_eq!(s[0].context, vec![CLS]);
        assert_eq!(s[1].context, vec![CLS, 7]);
        assert_eq!(s[2].context, vec![CLS, 7, 8]);
        assert_eq!(s.iter().map(|x| x.target).collect::<Vec<_>>(), vec![7, 8, 9]);
        assert!(s.iter().all(|x| x.utterance == 4 && x.step == x.context.len()));
        let one = enumerate_lm_samples(&Transcript::new(vec![5]).unwrap(), 0);
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].context, vec![CLS]);
    }

    #[test]
    fn mask_forces_a_selection() {
        let cfg = TrainConfig {
            mask_fraction: 0.0,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let m = mlm_mask(&[5, 6, 7], &cfg, 5..10, &mut rng);
            assert_eq!(m.positions.len(), 1);
            assert_eq!(m.targets[0], [5, 6, 7][m.positions[0]]);
        }
        let a = mlm_mask(
            &[5; 30],
            &TrainConfig::default(),
            5..10,
            &mut ChaCha8Rng::seed_from_u64(9),
        );
        let b = mlm_mask(
            &[5; 30],
            &TrainConfig::default(),
            5..10,
            &mut ChaCha8Rng::seed_from_u64(9),
        );
        assert_eq!(a, b);
    }

    #[test]
    fn mask_split_must_sum_to_one() {
        let cfg = TrainConfig {
            mask_keep: 0.2,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("mask_keep"));
    }

    #[test]
    fn uniform_model_loss_is_log_v() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = tiny_model(12, &mut store, &mut rng);
        model.zero_classifier(&mut store);
        let samples = enumerate_lm_samples(&Transcript::new(vec![5, 6, 7, 8]).unwrap(), 0);
        let refs: Vec<&LmSample> = samples.iter().collect();
        let mut g = Graph::new(&store);
        let l = lm_loss(&mut g, &model, &refs, None).unwrap();
        assert!((g.value(l).item() - 12f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_model_loss_near_zero() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = tiny_model(8, &mut store, &mut rng);
        model.zero_classifier(&mut store);
        let b = store.by_name("cls_head.b").unwrap();
        store.get_mut(b).tensor.data_mut()[6] = 1e3;
        let s = LmSample {
            context: vec![CLS, 5],
            target: 6,
            utterance: 0,
            step: 2,
        };
        let mut g = Graph::new(&store);
        let l = lm_loss(&mut g, &model, &[&s], None).unwrap();
        assert!(g.value(l).item() < 1e-12);
    }

    #[test]
    fn batch_loss_is_mean_of_sample_losses() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = tiny_model(12, &mut store, &mut rng);
        let samples = enumerate_lm_samples(&Transcript::new(vec![5, 9, 6, 11, 7]).unwrap(), 0);
        let refs: Vec<&LmSample> = samples.iter().collect();
        let mut g = Graph::new(&store);
        let l = lm_loss(&mut g, &model, &refs, None).unwrap();
        let batched = g.value(l).item();
        let looped: f64 = samples
            .iter()
            .map(|s| {
                let mut g = Graph::new(&store);
                let l = lm_loss(&mut g, &model, &[s], None).unwrap();
                g.value(l).item()
            })
            .sum::<f64>()
            / samples.len() as f64;
        assert!((batched - looped).abs() < 1e-12, "{batched} vs {looped}");
    }

    #[test]
    fn asr_placement_pairs_cls_with_current_segment() {
        let ds = toy_data(3);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let vocab = ds.vocab.len();
        let _model = tiny_model(vocab, &mut store, &mut rng);
        let enc = AcousticEncoder::new(EncoderKind::Average, 16, 16, &mut store, &mut rng);
        let lm = enumerate_corpus(&ds.train);
        let asr = asr_samples(&ds.train, &lm).unwrap();
        let picked = [asr[2], asr[lm.len() - 1]];
        let mut g = Graph::new(&store);
        let batch = asr_batch(&mut g, &enc, &picked).unwrap();
        let placed = g.value(batch.acoustic_embeddings.unwrap()).clone();
        for (b, s) in picked.iter().enumerate() {
            let ae = enc.embed(&store, s.features, s.alignment).unwrap().embeddings;
            let d = 16;
            let row = |r: usize| &placed.data()[r * d..(r + 1) * d];
            assert_eq!(row(b * batch.seq), ae.row(s.lm.step - 1));
            for i in 1..s.lm.step {
                assert_eq!(row(b * batch.seq + i), ae.row(i - 1));
            }
            for i in s.lm.step..batch.seq {
                assert!(row(b * batch.seq + i).iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn zero_encoder_asr_loss_equals_lm_loss_bitwise() {
        let ds = toy_data(4);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = tiny_model(ds.vocab.len(), &mut store, &mut rng);
        let enc = AcousticEncoder::new(EncoderKind::Conv1dResnet { blocks: 1 }, 16, 16, &mut store, &mut rng);
        for id in enc.param_ids() {
            store.get_mut(id).tensor.data_mut().fill(0.0);
        }
        let lm = enumerate_corpus(&ds.train);
        let asr = asr_samples(&ds.train, &lm).unwrap();
        let refs: Vec<&LmSample> = lm.iter().collect();
        let mut g1 = Graph::new(&store);
        let a = lm_loss(&mut g1, &model, &refs, None).unwrap();
        let mut g2 = Graph::new(&store);
        let b = asr_loss(&mut g2, &model, &enc, &asr, None).unwrap();
        assert_eq!(g1.value(a).item().to_bits(), g2.value(b).item().to_bits());
    }

    #[test]
    fn asr_loss_gradients_match_finite_differences() {
        let ds = toy_data(2);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 8,
            max_positions: 16,
            vocab_size: ds.vocab.len(),
            dropout_rate: 0.0,
        };
        let model = Bert::new(cfg, &mut store, &mut rng).unwrap();
        let enc = AcousticEncoder::new(EncoderKind::Conv1dResnet { blocks: 1 }, 16, 8, &mut store, &mut rng);
        // larger weights keep every gradient well above finite-difference roundoff
        let normal = rand_distr::Normal::new(0.0, 0.3).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            for v in store.get_mut(id).tensor.data_mut() {
                *v = rand_distr::Distribution::sample(&normal, &mut rng);
            }
        }
        let lm: Vec<LmSample> = enumerate_corpus(&ds.train[..1]).into_iter().take(3).collect();
        let utts = &ds.train[..1];
        let err = crate::nn::grad_check(
            &mut store,
            |g| {
                let asr = asr_samples(utts, &lm)?;
                asr_loss(g, &model, &enc, &asr, None)
            },
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn adam_warmup_ramps_linearly() {
        let cfg = TrainConfig {
            learning_rate: 1.0,
            ..TrainConfig::default()
        };
        let mut adam = Adam::new(&cfg, 100);
        assert_eq!(adam.warmup_steps, 5);
        let mut store = ParamStore::new();
        let id = store.zeros("p", &[1]);
        let mut lrs = Vec::new();
        for _ in 0..7 {
            lrs.push(adam.current_lr());
            let mut g = Graph::new(&store);
            let p = g.param(id);
            let l = g.sum(p);
            let grads = g.backward(l).unwrap();
            adam.step(&mut store, &grads, &[true]);
        }
        assert_eq!(lrs, vec![0.2, 0.4, 0.6, 0.8, 1.0, 1.0, 1.0]);
        // Adam's first step moves by lr regardless of gradient scale
        let mut adam = Adam::new(
            &TrainConfig {
                warmup_fraction: 0.0,
                ..cfg
            },
            10,
        );
        let mut store = ParamStore::new();
        let id = store.filled("p", &[1], 3.0);
        let mut g = Graph::new(&store);
        let p = g.param(id);
        let l = g.scale(p, 1e-3);
        let l = g.sum(l);
        let grads = g.backward(l).unwrap();
        adam.step(&mut store, &grads, &[true]);
        assert!((store.value(id).data()[0] - 2.0).abs() < 1e-4);
    }

    fn lm_run(seed: u64) -> (LossCurve, ParamStore) {
        let ds = toy_data(50);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = tiny_model(ds.vocab.len(), &mut store, &mut rng);
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 32,
            ..TrainConfig::default()
        };
        let nets = Networks {
            model: &model,
            encoder: None,
        };
        let curve = train_stage(Stage::FinetuneLm, nets, &mut store, &ds.train, &ds.dev, &cfg).unwrap();
        (curve, store)
    }

    #[test]
    fn lm_finetuning_reduces_dev_loss_and_is_reproducible() {
        let (curve, store) = lm_run(7);
        let dev: Vec<f64> = curve.split("dev").map(|p| p.loss).collect();
        assert_eq!(dev.len(), 6);
        assert!(dev[5] < dev[0], "{dev:?}");
        for w in dev.windows(2) {
            assert!(w[1] < w[0], "dev loss rose: {dev:?}");
        }
        let (again, store2) = lm_run(7);
        assert_eq!(curve.to_csv(), again.to_csv());
        for ((_, a), (_, b)) in store.iter().zip(store2.iter()) {
            assert_eq!(a.tensor, b.tensor);
        }
        let csv = curve.to_csv();
        assert!(csv.starts_with("epoch,split,loss,ppl\n0,dev,"));
    }

    #[test]
    fn mlm_stage_trains_and_freeze_keeps_stack_fixed() {
        let ds = toy_data(20);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = tiny_model(ds.vocab.len(), &mut store, &mut rng);
        let nets = Networks {
            model: &model,
            encoder: None,
        };
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let before = store.clone();
        let curve = train_stage(Stage::PretrainMlm, nets, &mut store, &ds.train, &ds.dev, &cfg).unwrap();
        assert_eq!(curve.split("train").count(), 3);
        let tok = store.by_name("bert.embeddings.token").unwrap();
        assert_ne!(store.value(tok), before.value(tok));
        // the next-token head receives no gradient from the MLM objective
        let cls = store.by_name("cls_head.w").unwrap();
        assert_eq!(store.value(cls), before.value(cls));

        let frozen_cfg = TrainConfig {
            freeze_encoder: true,
            epochs: 1,
            ..cfg
        };
        let snapshot = store.clone();
        train_stage(Stage::FinetuneLm, nets, &mut store, &ds.train, &ds.dev, &frozen_cfg).unwrap();
        assert_eq!(store.value(tok), snapshot.value(tok));
        assert_ne!(store.value(cls), snapshot.value(cls));
    }

    #[test]
    fn divergence_is_reported() {
        let ds = toy_data(10);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = tiny_model(ds.vocab.len(), &mut store, &mut rng);
        let b = store.by_name("cls_head.b").unwrap();
        store.get_mut(b).tensor.data_mut()[NUM_SPECIALS] = f64::NAN;
        let nets = Networks {
            model: &model,
            encoder: None,
        };
        let err = train_stage(
            Stage::FinetuneLm,
            nets,
            &mut store,
            &ds.train,
            &[],
            &TrainConfig::default(),
        )
        .unwrap_err();
        match err {
            Error::Divergence { stage, epoch, step, .. } => {
                assert_eq!((stage.as_str(), epoch, step), ("finetune-lm", 1, 0));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn corpus_nll_matches_lm_loss_mean() {
        let ds = toy_data(5);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let model = tiny_model(ds.vocab.len(), &mut store, &mut rng);
        let nets = Networks {
            model: &model,
            encoder: None,
        };
        let (sum, n) = corpus_nll(&store, nets, &ds.dev, 7).unwrap();
        let lm = enumerate_corpus(&ds.dev);
        let refs: Vec<&LmSample> = lm.iter().collect();
        let mut g = Graph::new(&store);
        let l = lm_loss(&mut g, &model, &refs, None).unwrap();
        assert_eq!(n, lm.len());
        assert!((sum / n as f64 - g.value(l).item()).abs() < 1e-12);
    }
}
