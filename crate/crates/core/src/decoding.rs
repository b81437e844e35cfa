//! Step-by-step beam search over alignment segments.
//!
//! There is no end-of-sequence symbol: the alignment fixes the number of
//! steps, one output token per segment.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::acoustic::{AcousticEncoder, AcousticFeatures, Alignment};
use crate::error::{Error, Result};
use crate::model::{Bert, InputBatch};
use crate::nn::{log_softmax, Graph, ParamStore, Tensor};
use crate::synth::Utterance;
use crate::text::{decode, Transcript, Vocabulary, CLS, NUM_SPECIALS};

/// Boundaries `[0, w, 2w, .., frames]`; the last segment keeps the
/// remainder, giving `ceil(frames / w)` segments.
pub fn make_equal_alignment(frames: usize, frames_per_word: usize) -> Result<Alignment> {
    if frames_per_word == 0 {
        return Err(Error::Alignment("frames_per_word must be at least 1".into()));
    }
    if frames == 0 {
        return Err(Error::Alignment("cannot align an empty utterance".into()));
    }
    let mut b: Vec<usize> = (0..frames).step_by(frames_per_word).collect();
    b.push(frames);
    Alignment::new(b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AlignmentStrategy {
    Oracle,
    EqualLength { frames_per_word: usize },
}

impl AlignmentStrategy {
    pub fn label(&self) -> &'static str {
        match self {
            AlignmentStrategy::Oracle => "oracle",
            AlignmentStrategy::EqualLength { .. } => "equal",
        }
    }

    pub fn alignment(&self, u: &Utterance) -> Result<Alignment> {
        match *self {
            AlignmentStrategy::Oracle => u.alignment().cloned(),
            AlignmentStrategy::EqualLength { frames_per_word } => {
                make_equal_alignment(u.features.num_frames(), frames_per_word)
            }
        }
    }
}

impl fmt::Display for AlignmentStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AlignmentStrategy::Oracle => f.write_str("oracle"),
            AlignmentStrategy::EqualLength { frames_per_word } => write!(f, "equal({frames_per_word})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamHypothesis {
    pub token_ids: Vec<usize>,
    pub log_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamResult {
    pub best: BeamHypothesis,
    /// Final beam, best first.
    pub beam: Vec<BeamHypothesis>,
}

/// Per-utterance inputs computed once before stepping.
#[derive(Debug, Clone)]
pub struct Prepared {
    /// `[segments, d_model]`, absent for text-only decoding.
    pub embeddings: Option<Tensor>,
    pub segments: usize,
}

/// Read-only view of trained networks used for decoding.
#[derive(Debug, Clone, Copy)]
pub struct Decoder<'a> {
    pub store: &'a ParamStore,
    pub model: &'a Bert,
    pub encoder: Option<&'a AcousticEncoder>,
}

impl Decoder<'_> {
    pub fn prepare(&self, x: &AcousticFeatures, a: &Alignment) -> Result<Prepared> {
        a.check_covers(x)?;
        let embeddings = match self.encoder {
            Some(enc) => Some(enc.embed(self.store, x, a)?.embeddings),
            None => None,
        };
        Ok(Prepared {
            embeddings,
            segments: a.num_segments(),
        })
    }

    /// Log-probabilities of the next token for several prefixes that share
    /// step `t` (1-based). Special tokens get `-inf`.
    pub fn step_batch(&self, prep: &Prepared, prefixes: &[&[usize]], t: usize) -> Result<Vec<Vec<f64>>> {
        if t == 0 || t > prep.segments {
            return Err(Error::Decode(format!("step {t} outside 1..={}", prep.segments)));
        }
        if let Some(p) = prefixes.iter().find(|p| p.len() != t - 1) {
            return Err(Error::Decode(format!(
                "prefix of length {} at step {t}; expected {}",
                p.len(),
                t - 1
            )));
        }
        let contexts: Vec<Vec<usize>> = prefixes
            .iter()
            .map(|p| std::iter::once(CLS).chain(p.iter().copied()).collect())
            .collect();
        let mut batch = InputBatch::from_contexts(&contexts, &[])?;
        let mut g = Graph::new(self.store);
        if let Some(ae) = &prep.embeddings {
            let d = ae.dims2().1;
            let mut rows = Vec::with_capacity(batch.batch * batch.seq * d);
            for _ in 0..batch.batch {
                rows.extend_from_slice(ae.row(t - 1));
                for i in 1..t {
                    rows.extend_from_slice(ae.row(i - 1));
                }
            }
            let placed = g.constant(Tensor::new(vec![batch.batch * batch.seq, d], rows)?);
            batch = batch.with_acoustic(placed);
        }
        let logits = self.model.cls_next_token_logits(&mut g, &batch, None)?;
        let lt = g.value(logits);
        Ok((0..batch.batch)
            .map(|b| {
                let mut row = lt.row(b).to_vec();
                row[..NUM_SPECIALS].fill(f64::NEG_INFINITY);
                log_softmax(&row)
            })
            .collect())
    }

    pub fn step_distribution(
        &self,
        x: &AcousticFeatures,
        a: &Alignment,
        prefix: &[usize],
        t: usize,
    ) -> Result<Vec<f64>> {
        let prep = self.prepare(x, a)?;
        Ok(self.step_batch(&prep, &[prefix], t)?.remove(0))
    }

    /// Beam search from the given starting hypothesis over the remaining
    /// steps. Ties keep the earlier (beam rank, token id) candidate.
    fn search(&self, prep: &Prepared, start: BeamHypothesis, beam_size: usize) -> Result<BeamResult> {
        if beam_size == 0 {
            return Err(Error::Decode("beam size must be at least 1".into()));
        }
        let mut beam = vec![start];
        let first = beam[0].token_ids.len() + 1;
        for t in first..=prep.segments {
            let prefixes: Vec<&[usize]> = beam.iter().map(|h| h.token_ids.as_slice()).collect();
            let dists = self.step_batch(prep, &prefixes, t)?;
            let mut cand: Vec<(f64, usize, usize)> = Vec::new();
            for (h, dist) in beam.iter().zip(&dists).enumerate().map(|(i, (h, d))| ((i, h), d)) {
                for (v, lp) in dist.iter().enumerate().skip(NUM_SPECIALS) {
                    cand.push((h.1.log_prob + lp, h.0, v));
                }
            }
            cand.sort_by(|a, b| b.0.total_cmp(&a.0));
            cand.truncate(beam_size);
            beam = cand
                .into_iter()
                .map(|(score, h, v)| {
                    let mut token_ids = beam[h].token_ids.clone();
                    token_ids.push(v);
                    BeamHypothesis {
                        token_ids,
                        log_prob: score,
                    }
                })
                .collect();
        }
        Ok(BeamResult {
            best: beam[0].clone(),
            beam,
        })
    }

    pub fn beam_decode(&self, x: &AcousticFeatures, a: &Alignment, beam_size: usize) -> Result<BeamResult> {
        let prep = self.prepare(x, a)?;
        self.search(
            &prep,
            BeamHypothesis {
                token_ids: Vec::new(),
                log_prob: 0.0,
            },
            beam_size,
        )
    }

    /// Forces the first `floor(ratio * T)` reference tokens, then beam
    /// decodes the rest. The forced tokens' log-probabilities count toward
    /// the score.
    pub fn prefix_decode(
        &self,
        x: &AcousticFeatures,
        a: &Alignment,
        reference: &Transcript,
        ratio: f64,
        beam_size: usize,
    ) -> Result<BeamHypothesis> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::Decode(format!("prefix ratio {ratio} outside [0, 1]")));
        }
        if a.num_segments() != reference.len() {
            return Err(Error::Decode(format!(
                "prefix decoding needs the oracle alignment: {} segments for {} reference tokens",
                a.num_segments(),
                reference.len()
            )));
        }
        let forced = forced_prefix_len(ratio, reference.len());
        let prep = self.prepare(x, a)?;
        let mut start = BeamHypothesis {
            token_ids: Vec::with_capacity(reference.len()),
            log_prob: 0.0,
        };
        for (i, &tok) in reference.token_ids[..forced].iter().enumerate() {
            let dist = self.step_batch(&prep, &[start.token_ids.as_slice()], i + 1)?;
            start.log_prob += dist[0][tok];
            start.token_ids.push(tok);
        }
        Ok(self.search(&prep, start, beam_size)?.best)
    }
}

/// `floor(ratio * len)`, tolerant of the rounding in ratios like `1/3`.
pub fn forced_prefix_len(ratio: f64, len: usize) -> usize {
    ((ratio * len as f64 + 1e-9).floor() as usize).min(len)
}

/// One decoded utterance as written to the hypotheses file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub id: String,
    pub reference: Vec<String>,
    pub hypothesis: Vec<String>,
    pub log_prob: f64,
    pub strategy: String,
    pub beam_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefix_ratio: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeOptions {
    pub strategy: AlignmentStrategy,
    pub beam_size: usize,
    pub prefix_ratio: Option<f64>,
    /// Worker threads; 0 or 1 decodes serially.
    pub threads: usize,
}

/// Maps `f` over `items` on up to `threads` workers, keeping input order.
pub fn ordered_map<T, R, F>(threads: usize, items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    if threads <= 1 {
        return items.iter().map(f).collect();
    }
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| items.par_iter().map(f).collect())
}

/// Decodes every utterance. Output order follows input order regardless of
/// the thread count.
pub fn decode_utterances(
    decoder: &Decoder,
    vocab: &Vocabulary,
    utts: &[Utterance],
    opts: &DecodeOptions,
) -> Result<Vec<DecodeRecord>> {
    if opts.prefix_ratio.is_some() && opts.strategy != AlignmentStrategy::Oracle {
        return Err(Error::Decode("prefix decoding requires the oracle strategy".into()));
    }
    ordered_map(opts.threads, utts, |u| {
        let a = opts.strategy.alignment(u)?;
        let best = match opts.prefix_ratio {
            Some(r) => decoder.prefix_decode(&u.features, &a, &u.transcript, r, opts.beam_size)?,
            None => decoder.beam_decode(&u.features, &a, opts.beam_size)?.best,
        };
        Ok(DecodeRecord {
            id: u.id.clone(),
            reference: decode(&u.transcript, vocab),
            hypothesis: decode(&Transcript::new(best.token_ids)?, vocab),
            log_prob: best.log_prob,
            strategy: opts.strategy.label().to_string(),
            beam_size: opts.beam_size,
            prefix_ratio: opts.prefix_ratio,
        })
    })
}

pub fn write_jsonl(records: &[DecodeRecord], path: &std::path::Path) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_jsonl(path: &std::path::Path) -> Result<Vec<DecodeRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Data {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

impl FromStr for AlignmentStrategy {
    type Err = Error;
    /// `oracle`, or `equal:W` for equal-length segments of `W` frames.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "oracle" => Ok(AlignmentStrategy::Oracle),
            Some(("equal", w)) => w
                .parse()
                .map(|frames_per_word| AlignmentStrategy::EqualLength { frames_per_word })
                .map_err(|_| Error::Config(format!("bad frames per word in {s:?}"))),
            _ => Err(Error::Config(format!("unknown alignment strategy {s:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acoustic::EncoderKind;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn equal_alignment_examples() {
        assert_eq!(make_equal_alignment(50, 25).unwrap().boundaries(), &[0, 25, 50]);
        assert_eq!(make_equal_alignment(60, 25).unwrap().boundaries(), &[0, 25, 50, 60]);
        assert_eq!(make_equal_alignment(10, 25).unwrap().boundaries(), &[0, 10]);
        assert!(make_equal_alignment(10, 0).is_err());
        for frames in 1..80 {
            for w in 1..30 {
                let a = make_equal_alignment(frames, w).unwrap();
                assert_eq!(a.num_segments(), frames.div_ceil(w));
                let last = a.segments().last().copied().unwrap();
                assert!((1..=w).contains(&(last.1 - last.0)));
            }
        }
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!(
            "oracle".parse::<AlignmentStrategy>().unwrap(),
            AlignmentStrategy::Oracle
        );
        assert_eq!(
            "equal:25".parse::<AlignmentStrategy>().unwrap(),
            AlignmentStrategy::EqualLength { frames_per_word: 25 }
        );
        assert!("equal".parse::<AlignmentStrategy>().is_err());
    }

    #[test]
    fn forced_prefix_lengths() {
        assert_eq!(forced_prefix_len(0.0, 9), 0);
        assert_eq!(forced_prefix_len(1.0 / 3.0, 9), 3);
        assert_eq!(forced_prefix_len(0.5, 7), 3);
        assert_eq!(forced_prefix_len(1.0, 7), 7);
    }

    struct Fixture {
        store: ParamStore,
        model: Bert,
        encoder: AcousticEncoder,
        x: AcousticFeatures,
        a: Alignment,
    }

    fn fixture(regular: usize) -> Fixture {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 8,
            max_positions: 16,
            vocab_size: NUM_SPECIALS + regular,
            dropout_rate: 0.1,
        };
        let model = Bert::new(cfg, &mut store, &mut rng).unwrap();
        // spread the weights so distributions are far from uniform
        let normal = rand_distr::Normal::new(0.0, 0.7).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            for v in store.get_mut(id).tensor.data_mut() {
                *v = rand_distr::Distribution::sample(&normal, &mut rng);
            }
        }
        let encoder = AcousticEncoder::new(EncoderKind::Conv1dResnet { blocks: 1 }, 3, 8, &mut store, &mut rng);
        let rows: Vec<Vec<f64>> = (0..12).map(|t| vec![t as f64 * 0.1, (t % 3) as f64, -0.5]).collect();
        let x = AcousticFeatures::from_rows(&rows).unwrap();
        let a = Alignment::new(vec![0, 4, 9, 12]).unwrap();
        Fixture {
            store,
            model,
            encoder,
            x,
            a,
        }
    }

    impl Fixture {
        fn decoder(&self) -> Decoder<'_> {
            Decoder {
                store: &self.store,
                model: &self.model,
                encoder: Some(&self.encoder),
            }
        }
    }

    #[test]
    fn step_distribution_normalizes_over_regular_tokens() {
        let f = fixture(4);
        let d = f.decoder();
        for (t, prefix) in [(1, vec![]), (2, vec![6]), (3, vec![5, 8])] {
            let lp = d.step_distribution(&f.x, &f.a, &prefix, t).unwrap();
            assert!(lp[..NUM_SPECIALS].iter().all(|v| *v == f64::NEG_INFINITY));
            let total: f64 = lp.iter().map(|v| v.exp()).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        assert!(d.step_distribution(&f.x, &f.a, &[5, 6], 2).is_err());
        assert!(d.step_distribution(&f.x, &f.a, &[5, 6, 7], 4).is_err());
    }

    #[test]
    fn first_step_sees_only_cls_and_first_segment() {
        let f = fixture(4);
        let d = f.decoder();
        let lp = d.step_distribution(&f.x, &f.a, &[], 1).unwrap();
        let ae = f.encoder.embed(&f.store, &f.x, &f.a).unwrap().embeddings;
        let mut batch = InputBatch::from_contexts(&[vec![CLS]], &[]).unwrap();
        let mut g = Graph::new(&f.store);
        let placed = g.constant(Tensor::new(vec![1, 8], ae.row(0).to_vec()).unwrap());
        batch = batch.with_acoustic(placed);
        let logits = f.model.cls_next_token_logits(&mut g, &batch, None).unwrap();
        let mut row = g.value(logits).row(0).to_vec();
        row[..NUM_SPECIALS].fill(f64::NEG_INFINITY);
        assert_eq!(lp, log_softmax(&row));
    }

    #[test]
    fn zeroed_encoder_ignores_features() {
        let mut f = fixture(4);
        for id in f.encoder.param_ids() {
            f.store.get_mut(id).tensor.data_mut().fill(0.0);
        }
        let d = f.decoder();
        let other = AcousticFeatures::from_rows(&vec![vec![3.0, -1.0, 2.0]; 12]).unwrap();
        let a = d.step_distribution(&f.x, &f.a, &[6], 2).unwrap();
        let b = d.step_distribution(&other, &f.a, &[6], 2).unwrap();
        assert_eq!(a, b);
    }

    fn exhaustive(d: &Decoder, x: &AcousticFeatures, a: &Alignment, regular: usize) -> BeamHypothesis {
        let steps = a.num_segments();
        let mut best: Option<BeamHypothesis> = None;
        let total = regular.pow(steps as u32);
        for code in 0..total {
            let seq: Vec<usize> = (0..steps)
                .map(|i| NUM_SPECIALS + (code / regular.pow((steps - 1 - i) as u32)) % regular)
                .collect();
            let mut lp = 0.0;
            for t in 1..=steps {
                lp += d.step_distribution(x, a, &seq[..t - 1], t).unwrap()[seq[t - 1]];
            }
            if best.as_ref().map_or(true, |b| lp > b.log_prob) {
                best = Some(BeamHypothesis {
                    token_ids: seq,
                    log_prob: lp,
                });
            }
        }
        best.unwrap()
    }

    #[test]
    fn wide_beam_matches_exhaustive_search() {
        let f = fixture(3);
        let d = f.decoder();
        let a = Alignment::new(vec![0, 5, 12]).unwrap();
        let oracle = exhaustive(&d, &f.x, &a, 3);
        for beam in [9, 10, 20] {
            let got = d.beam_decode(&f.x, &a, beam).unwrap();
            assert_eq!(got.best.token_ids, oracle.token_ids);
            assert!((got.best.log_prob - oracle.log_prob).abs() < 1e-12);
            assert_eq!(got.beam.len(), 9);
        }
    }

    #[test]
    fn beam_one_is_greedy() {
        let f = fixture(4);
        let d = f.decoder();
        let got = d.beam_decode(&f.x, &f.a, 1).unwrap().best;
        let mut prefix = Vec::new();
        let mut lp = 0.0;
        for t in 1..=3 {
            let dist = d.step_distribution(&f.x, &f.a, &prefix, t).unwrap();
            let (arg, v) = dist.iter().enumerate().fold(
                (0, f64::NEG_INFINITY),
                |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
            );
            prefix.push(arg);
            lp += v;
        }
        assert_eq!(got.token_ids, prefix);
        assert!((got.log_prob - lp).abs() < 1e-12);
        assert!(got.log_prob <= 0.0);
    }

    #[test]
    fn log_prob_is_sum_of_step_log_probs() {
        let f = fixture(4);
        let d = f.decoder();
        let res = d.beam_decode(&f.x, &f.a, 5).unwrap();
        for h in &res.beam {
            let mut lp = 0.0;
            for t in 1..=3 {
                lp += d.step_distribution(&f.x, &f.a, &h.token_ids[..t - 1], t).unwrap()[h.token_ids[t - 1]];
            }
            assert!((h.log_prob - lp).abs() < 1e-12);
        }
        for w in res.beam.windows(2) {
            assert!(w[0].log_prob >= w[1].log_prob);
        }
    }

    #[test]
    fn prefix_decoding_forces_reference() {
        let f = fixture(4);
        let d = f.decoder();
        let reference = Transcript::new(vec![8, 8, 7]).unwrap();
        let full = d.prefix_decode(&f.x, &f.a, &reference, 1.0, 3).unwrap();
        assert_eq!(full.token_ids, reference.token_ids);
        let none = d.prefix_decode(&f.x, &f.a, &reference, 0.0, 3).unwrap();
        assert_eq!(none, d.beam_decode(&f.x, &f.a, 3).unwrap().best);
        let part = d.prefix_decode(&f.x, &f.a, &reference, 0.5, 3).unwrap();
        assert_eq!(part.token_ids[0], 8);
        let short = Transcript::new(vec![8, 8]).unwrap();
        assert!(d.prefix_decode(&f.x, &f.a, &short, 0.5, 3).is_err());
    }
}
