//! Synthetic paired text/feature corpus with oracle alignments, and the
//! on-disk dataset format.
//!
//! Each syllable class owns a prototype vector; a word's frames repeat its
//! class prototype for a random duration, plus Gaussian noise. Homophones
//! (tokens sharing a class) produce identically distributed frames, so only
//! the bigram context can tell them apart.
//!
//! Directory layout:
//!
//! ```text
//! vocab.json                 symbols, specials, syllable classes
//! {split}.jsonl              {id, tokens, boundaries, features_file, row_offset}
//! {split}.features.bin       little-endian f32 frames, row-major
//! {split}.index.json         id -> {offset, frames, dim}
//! norm_stats.json            per-dimension mean/std of the train split
//! synth_spec.json            generator settings
//! ```

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::acoustic::{AcousticFeatures, Alignment, NormStats};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::text::{decode, encode, Transcript, Vocabulary, NUM_SPECIALS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub vocab_size: usize,
    pub n_syllable_classes: usize,
    pub feature_dim: usize,
    pub duration_range: [usize; 2],
    pub noise_sigma: f64,
    pub lm_order: usize,
    /// Softmax temperature of the random bigram logits; lower is sharper.
    pub temperature: f64,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub utterance_length_range: [usize; 2],
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            vocab_size: 40,
            n_syllable_classes: 20,
            feature_dim: 16,
            duration_range: [15, 35],
            noise_sigma: 0.3,
            lm_order: 2,
            temperature: 0.3,
            n_train: 2000,
            n_dev: 200,
            n_test: 200,
            utterance_length_range: [5, 15],
            seed: 1,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 {
            return bad("vocab_size must be at least 1".into());
        }
        if self.n_syllable_classes == 0 {
            return bad("n_syllable_classes must be at least 1".into());
        }
        if self.n_syllable_classes > self.vocab_size {
            return bad(format!(
                "n_syllable_classes ({}) exceeds vocab_size ({})",
                self.n_syllable_classes, self.vocab_size
            ));
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be at least 1".into());
        }
        let [dmin, dmax] = self.duration_range;
        if dmin < 1 || dmin > dmax {
            return bad(format!("duration_range [{dmin}, {dmax}] needs 1 <= min <= max"));
        }
        let [lmin, lmax] = self.utterance_length_range;
        if lmin < 1 || lmin > lmax {
            return bad(format!("utterance_length_range [{lmin}, {lmax}] needs 1 <= min <= max"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be finite and >= 0", self.noise_sigma));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        if !(1..=2).contains(&self.lm_order) {
            return bad(format!("lm_order {} unsupported (1 or 2)", self.lm_order));
        }
        if self.n_train == 0 {
            return bad("n_train must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub transcript: Transcript,
    pub features: AcousticFeatures,
    /// `None` when the dataset carries no alignment for this utterance.
    pub alignment: Option<Alignment>,
}

impl Utterance {
    pub fn alignment(&self) -> Result<&Alignment> {
        self.alignment
            .as_ref()
            .ok_or_else(|| Error::Alignment(format!("utterance {} has no alignment", self.id)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
    pub norm_stats: NormStats,
    pub spec: Option<SynthSpec>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[Utterance] {
        match s {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, s: Split) -> &mut Vec<Utterance> {
        match s {
            Split::Train => &mut self.train,
            Split::Dev => &mut self.dev,
            Split::Test => &mut self.test,
        }
    }

    /// Applies the stored train-split statistics to every split.
    pub fn normalize(&mut self) {
        let stats = self.norm_stats.clone();
        for s in Split::ALL {
            for u in self.split_mut(s) {
                stats.apply(&mut u.features);
            }
        }
    }
}

const CONSONANTS: [&str; 18] = [
    "b", "p", "m", "f", "d", "t", "n", "l", "g", "k", "h", "j", "q", "x", "z", "c", "s", "r",
];
const VOWELS: [&str; 5] = ["a", "o", "e", "i", "u"];

fn syllable_name(class: usize) -> String {
    let base = format!(
        "{}{}",
        CONSONANTS[class % CONSONANTS.len()],
        VOWELS[(class / CONSONANTS.len()) % VOWELS.len()]
    );
    let round = class / (CONSONANTS.len() * VOWELS.len());
    if round == 0 {
        base
    } else {
        format!("{base}{}", "'".repeat(round))
    }
}

/// Token `i` belongs to class `i % n_classes`; its symbol is the class
/// syllable followed by a homophone index starting at 1.
fn synth_vocabulary(spec: &SynthSpec) -> Result<Vocabulary> {
    let symbols = (0..spec.vocab_size)
        .map(|i| {
            let class = i % spec.n_syllable_classes;
            format!("{}{}", syllable_name(class), i / spec.n_syllable_classes + 1)
        })
        .collect();
    let classes = (0..spec.vocab_size).map(|i| i % spec.n_syllable_classes + 1).collect();
    Vocabulary::from_parts(symbols, classes)
}

fn sample_prototypes(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let min_dist = (d as f64).sqrt();
    let mut protos: Vec<Vec<f64>> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for _ in 0..200 {
            let cand: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let nearest = protos
                .iter()
                .map(|p| p.iter().zip(&cand).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
                .fold(f64::INFINITY, f64::min);
            if best.as_ref().map_or(true, |(bd, _)| nearest > *bd) {
                best = Some((nearest, cand));
            }
            if nearest >= min_dist {
                break;
            }
        }
        protos.push(best.expect("at least one candidate").1);
    }
    protos
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn sample_index(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// The generating language model over regular-token indices `0..vocab_size`.
#[derive(Debug, Clone)]
pub struct BigramLm {
    pub initial: Vec<f64>,
    pub transitions: Vec<Vec<f64>>,
    pub order: usize,
}

impl BigramLm {
    fn sample(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Self {
        let v = spec.vocab_size;
        let mut row = || {
            let logits: Vec<f64> = (0..v)
                .map(|_| rng.sample::<f64, _>(StandardNormal) / spec.temperature)
                .collect();
            softmax(&logits)
        };
        let initial = row();
        let transitions = (0..v).map(|_| row()).collect();
        BigramLm {
            initial,
            transitions,
            order: spec.lm_order,
        }
    }

    pub fn next_distribution(&self, prev: Option<usize>) -> &[f64] {
        match (self.order, prev) {
            (2, Some(p)) => &self.transitions[p],
            _ => &self.initial,
        }
    }
}

/// Everything the generator draws before sampling utterances.
#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub spec: SynthSpec,
    pub vocab: Vocabulary,
    pub prototypes: Vec<Vec<f64>>,
    pub lm: BigramLm,
}

fn component_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl SynthWorld {
    pub fn new(spec: &SynthSpec) -> Result<Self> {
        spec.validate()?;
        let vocab = synth_vocabulary(spec)?;
        let mut rng = component_rng(spec.seed, 0);
        let prototypes = sample_prototypes(spec.n_syllable_classes, spec.feature_dim, &mut rng);
        let lm = BigramLm::sample(spec, &mut rng);
        Ok(SynthWorld {
            spec: spec.clone(),
            vocab,
            prototypes,
            lm,
        })
    }

    fn utterance(&self, id: String, rng: &mut ChaCha8Rng) -> Result<Utterance> {
        let spec = &self.spec;
        let len = rng.gen_range(spec.utterance_length_range[0]..=spec.utterance_length_range[1]);
        let mut tokens = Vec::with_capacity(len);
        let mut prev = None;
        for _ in 0..len {
            let t = sample_index(self.lm.next_distribution(prev), rng);
            tokens.push(t);
            prev = Some(t);
        }
        let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("finite sigma");
        let d = spec.feature_dim;
        let mut data = Vec::new();
        let mut boundaries = vec![0];
        for &t in &tokens {
            let dur = rng.gen_range(spec.duration_range[0]..=spec.duration_range[1]);
            let proto = &self.prototypes[t % spec.n_syllable_classes];
            for _ in 0..dur {
                for p in proto.iter().take(d) {
                    let n = if spec.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
                    // stored as f32 on disk; keep memory and disk identical
                    data.push((p + n) as f32 as f64);
                }
            }
            boundaries.push(boundaries.last().expect("non-empty") + dur);
        }
        let frames = *boundaries.last().expect("non-empty");
        let ids = tokens.into_iter().map(|t| t + NUM_SPECIALS).collect();
        Ok(Utterance {
            id,
            transcript: Transcript::new(ids)?,
            features: AcousticFeatures::new(Tensor::new(vec![frames, d], data)?)?,
            alignment: Some(Alignment::new(boundaries)?),
        })
    }

    pub fn sample_split(&self, split: Split, n: usize) -> Result<Vec<Utterance>> {
        let stream = match split {
            Split::Train => 1,
            Split::Dev => 2,
            Split::Test => 3,
        };
        let mut rng = component_rng(self.spec.seed, stream);
        (0..n)
            .map(|i| self.utterance(format!("{}-{:05}", split.name(), i), &mut rng))
            .collect()
    }
}

/// Generates all three splits, the vocabulary and train normalization stats.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    let world = SynthWorld::new(spec)?;
    let train = world.sample_split(Split::Train, spec.n_train)?;
    let dev = world.sample_split(Split::Dev, spec.n_dev)?;
    let test = world.sample_split(Split::Test, spec.n_test)?;
    let norm_stats = NormStats::compute(train.iter().map(|u| &u.features))?;
    Ok(Dataset {
        vocab: world.vocab,
        train,
        dev,
        test,
        norm_stats,
        spec: Some(spec.clone()),
    })
}

/// `round(total frames / total words)` over the given (training) split.
pub fn average_frames_per_word(split: &[Utterance]) -> Result<usize> {
    let words: usize = split.iter().map(|u| u.transcript.len()).sum();
    if words == 0 {
        return Err(Error::Config("cannot average frames over an empty split".into()));
    }
    let frames: usize = split.iter().map(|u| u.features.num_frames()).sum();
    Ok((frames as f64 / words as f64).round() as usize)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UtteranceRecord {
    id: String,
    tokens: Vec<String>,
    // required key; an explicit null means "no alignment"
    #[serde(deserialize_with = "Option::deserialize")]
    boundaries: Option<Vec<usize>>,
    features_file: String,
    row_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IndexEntry {
    offset: usize,
    frames: usize,
    dim: usize,
}

pub const VOCAB_FILE: &str = "vocab.json";
pub const NORM_STATS_FILE: &str = "norm_stats.json";
pub const SPEC_FILE: &str = "synth_spec.json";

fn features_file(split: Split) -> String {
    format!("{}.features.bin", split.name())
}

fn index_file(split: Split) -> String {
    format!("{}.index.json", split.name())
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    ds.vocab.save(&dir.join(VOCAB_FILE))?;
    std::fs::write(dir.join(NORM_STATS_FILE), serde_json::to_string_pretty(&ds.norm_stats)?)?;
    if let Some(spec) = &ds.spec {
        std::fs::write(dir.join(SPEC_FILE), serde_json::to_string_pretty(spec)?)?;
    }
    for split in Split::ALL {
        let mut lines = Vec::new();
        let mut bin = Vec::new();
        let mut index = BTreeMap::new();
        let mut row = 0;
        for u in ds.split(split) {
            let rec = UtteranceRecord {
                id: u.id.clone(),
                tokens: decode(&u.transcript, &ds.vocab),
                boundaries: u.alignment.as_ref().map(|a| a.boundaries().to_vec()),
                features_file: features_file(split),
                row_offset: row,
            };
            writeln!(lines, "{}", serde_json::to_string(&rec)?)?;
            for v in u.features.frames().data() {
                bin.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            index.insert(
                u.id.clone(),
                IndexEntry {
                    offset: row,
                    frames: u.features.num_frames(),
                    dim: u.features.dim(),
                },
            );
            row += u.features.num_frames();
        }
        std::fs::write(dir.join(format!("{}.jsonl", split.name())), lines)?;
        std::fs::write(dir.join(features_file(split)), bin)?;
        std::fs::write(dir.join(index_file(split)), serde_json::to_string_pretty(&index)?)?;
    }
    Ok(())
}

fn data_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Data {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn load_split(dir: &Path, split: Split, vocab: &Vocabulary) -> Result<Vec<Utterance>> {
    let path: PathBuf = dir.join(format!("{}.jsonl", split.name()));
    let index_path = dir.join(index_file(split));
    let index: BTreeMap<String, IndexEntry> = serde_json::from_str(&std::fs::read_to_string(&index_path)?)
        .map_err(|e| data_err(&index_path, e.line(), e.to_string()))?;
    let mut bins: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    let mut out = Vec::new();
    let reader = BufReader::new(std::fs::File::open(&path)?);
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: UtteranceRecord = serde_json::from_str(&line).map_err(|e| data_err(&path, lineno, e.to_string()))?;
        let entry = index
            .get(&rec.id)
            .ok_or_else(|| data_err(&path, lineno, format!("utterance {} missing from index", rec.id)))?;
        if entry.offset != rec.row_offset {
            return Err(data_err(
                &path,
                lineno,
                format!(
                    "row_offset {} disagrees with index offset {}",
                    rec.row_offset, entry.offset
                ),
            ));
        }
        if !bins.contains_key(&rec.features_file) {
            let bytes = std::fs::read(dir.join(&rec.features_file))?;
            bins.insert(rec.features_file.clone(), bytes);
        }
        let bin = &bins[&rec.features_file];
        let start = entry.offset * entry.dim * 4;
        let end = start + entry.frames * entry.dim * 4;
        if entry.frames == 0 || end > bin.len() {
            return Err(data_err(
                &path,
                lineno,
                format!(
                    "feature rows {}..{} of {} not present in {}",
                    entry.offset,
                    entry.offset + entry.frames,
                    rec.id,
                    rec.features_file
                ),
            ));
        }
        let data: Vec<f64> = bin[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let features = AcousticFeatures::new(Tensor::new(vec![entry.frames, entry.dim], data)?)
            .map_err(|e| data_err(&path, lineno, e.to_string()))?;
        let transcript = encode(&rec.tokens, vocab);
        let alignment = match rec.boundaries {
            Some(b) => {
                let a = Alignment::new(b).map_err(|e| data_err(&path, lineno, e.to_string()))?;
                if a.num_frames() != entry.frames {
                    return Err(data_err(
                        &path,
                        lineno,
                        format!(
                            "alignment ends at frame {} but the utterance has {} frames",
                            a.num_frames(),
                            entry.frames
                        ),
                    ));
                }
                if a.num_segments() != transcript.len() {
                    return Err(data_err(
                        &path,
                        lineno,
                        format!(
                            "{} alignment segments for {} tokens",
                            a.num_segments(),
                            transcript.len()
                        ),
                    ));
                }
                Some(a)
            }
            None => None,
        };
        out.push(Utterance {
            id: rec.id,
            transcript,
            features,
            alignment,
        });
    }
    Ok(out)
}

/// Reads a dataset directory. Features are returned unnormalized; call
/// [`Dataset::normalize`] to apply the stored statistics.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
    let stats_path = dir.join(NORM_STATS_FILE);
    let norm_stats: NormStats = serde_json::from_str(&std::fs::read_to_string(&stats_path)?)
        .map_err(|e| data_err(&stats_path, e.line(), e.to_string()))?;
    let spec_path = dir.join(SPEC_FILE);
    let spec = if spec_path.exists() {
        Some(serde_json::from_str(&std::fs::read_to_string(&spec_path)?)?)
    } else {
        None
    };
    Ok(Dataset {
        train: load_split(dir, Split::Train, &vocab)?,
        dev: load_split(dir, Split::Dev, &vocab)?,
        test: load_split(dir, Split::Test, &vocab)?,
        vocab,
        norm_stats,
        spec,
    })
}
