//! Frame segmentation and the acoustic encoders producing one embedding per
//! aligned word.
//!
//! Both encoders end in the same segment → mean-over-time → linear
//! `d → d_model` path. The conv1d resnet encoder first runs `L` residual
//! blocks, `h + relu(conv2(relu(conv1(h))))`, over the whole utterance, so
//! its embeddings see frames on both sides of each segment boundary.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Linear;
use crate::nn::{Graph, ParamId, ParamStore, Tensor, Var};

pub const CONV_WIDTH: usize = 3;

/// `T' x d` feature frames.
#[derive(Debug, Clone, PartialEq)]
pub struct AcousticFeatures {
    frames: Tensor,
}

impl AcousticFeatures {
    pub fn new(frames: Tensor) -> Result<Self> {
        let (n, d) = frames.dims2();
        if frames.shape().len() != 2 || n == 0 || d == 0 {
            return Err(Error::shape("acoustic features", frames.shape(), &[1, 1]));
        }
        if !frames.is_finite() {
            return Err(Error::Config("acoustic features contain non-finite values".into()));
        }
        Ok(AcousticFeatures { frames })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Tensor::from_rows(rows)?)
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.frames.row(t)
    }

    pub(crate) fn frames_mut(&mut self) -> &mut Tensor {
        &mut self.frames
    }
}

/// Monotone frame boundaries `0 = t_0 < t_1 < ... < t_T`; segment `i`
/// (1-based) covers frames `t_{i-1}..t_i` (half-open, 0-based).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alignment {
    boundaries: Vec<usize>,
}

impl Alignment {
    pub fn new(boundaries: Vec<usize>) -> Result<Self> {
        if boundaries.first() != Some(&0) {
            return Err(Error::Alignment("first boundary must be 0".into()));
        }
        if boundaries.len() < 2 {
            return Err(Error::Alignment("need at least one segment".into()));
        }
        if let Some(w) = boundaries.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::Alignment(format!(
                "boundaries must be strictly increasing, got {} then {}",
                w[0], w[1]
            )));
        }
        Ok(Alignment { boundaries })
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn num_segments(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn num_frames(&self) -> usize {
        *self.boundaries.last().expect("non-empty")
    }

    /// Half-open frame range of each segment.
    pub fn segments(&self) -> Vec<(usize, usize)> {
        self.boundaries.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn check_covers(&self, x: &AcousticFeatures) -> Result<()> {
        if self.num_frames() != x.num_frames() {
            return Err(Error::Alignment(format!(
                "last boundary {} does not match frame count {}",
                self.num_frames(),
                x.num_frames()
            )));
        }
        Ok(())
    }
}

/// Splits frames into the variable-length blocks `F_1..F_T`.
pub fn segment(x: &AcousticFeatures, a: &Alignment) -> Result<Vec<Tensor>> {
    a.check_covers(x)?;
    let d = x.dim();
    a.segments()
        .into_iter()
        .map(|(s, e)| Tensor::new(vec![e - s, d], x.frames().data()[s * d..e * d].to_vec()))
        .collect()
}

/// One `AE_i` row per segment, `[T, d_model]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AcousticEmbeddings {
    pub embeddings: Tensor,
}

impl AcousticEmbeddings {
    pub fn len(&self) -> usize {
        self.embeddings.dims2().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderKind {
    Average,
    Conv1dResnet { blocks: usize },
}

impl EncoderKind {
    /// Short label used in file names and reports.
    pub fn label(&self) -> String {
        match self {
            EncoderKind::Average => "average".into(),
            EncoderKind::Conv1dResnet { blocks } => format!("conv1d_resnet{blocks}"),
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EncoderKind::Average => write!(f, "Average"),
            EncoderKind::Conv1dResnet { blocks } => write!(f, "Conv1d resnet {blocks}"),
        }
    }
}

impl FromStr for EncoderKind {
    type Err = Error;

    /// Accepts `average`, `conv1d_resnet<L>` and `conv1d_resnet:<L>`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "average" {
            return Ok(EncoderKind::Average);
        }
        let rest = s
            .strip_prefix("conv1d_resnet")
            .ok_or_else(|| Error::Config(format!("unknown encoder {s:?}")))?;
        let rest = rest.trim_start_matches([':', '_']);
        let blocks = rest
            .parse()
            .map_err(|_| Error::Config(format!("encoder {s:?} needs a block count")))?;
        Ok(EncoderKind::Conv1dResnet { blocks })
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: (ParamId, ParamId),
    conv2: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
pub struct AcousticEncoder {
    pub kind: EncoderKind,
    pub feature_dim: usize,
    pub d_model: usize,
    blocks: Vec<ResBlock>,
    proj: Linear,
}

/// Prefix of every acoustic-encoder parameter name.
pub const ENCODER_PREFIX: &str = "acoustic.";

impl AcousticEncoder {
    /// Registers the encoder's parameters. Conv kernels use He-normal
    /// initialization; the projection uses normal(0, 0.02).
    pub fn new(
        kind: EncoderKind,
        feature_dim: usize,
        d_model: usize,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let n_blocks = match kind {
            EncoderKind::Average => 0,
            EncoderKind::Conv1dResnet { blocks } => blocks,
        };
        let std = (2.0 / (CONV_WIDTH * feature_dim) as f64).sqrt();
        let shape = [CONV_WIDTH, feature_dim, feature_dim];
        let blocks = (0..n_blocks)
            .map(|i| {
                let p = format!("{ENCODER_PREFIX}block{i}");
                ResBlock {
                    conv1: (
                        store.normal(format!("{p}.conv1.kernel"), &shape, std, rng),
                        store.zeros(format!("{p}.conv1.bias"), &[feature_dim]),
                    ),
                    conv2: (
                        store.normal(format!("{p}.conv2.kernel"), &shape, std, rng),
                        store.zeros(format!("{p}.conv2.bias"), &[feature_dim]),
                    ),
                }
            })
            .collect();
        let proj = Linear::new(store, &format!("{ENCODER_PREFIX}proj"), feature_dim, d_model, rng);
        AcousticEncoder {
            kind,
            feature_dim,
            d_model,
            blocks,
            proj,
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    #[cfg(test)]
    pub(crate) fn projection(&self) -> (ParamId, ParamId) {
        (self.proj.w, self.proj.b)
    }

    /// Every parameter of this encoder.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for b in &self.blocks {
            ids.extend([b.conv1.0, b.conv1.1, b.conv2.0, b.conv2.1]);
        }
        ids.extend([self.proj.w, self.proj.b]);
        ids
    }

    /// Encodes several utterances at once. Returns `[Σ T_u, d_model]` with
    /// the utterances' rows stacked in input order.
    pub fn forward(&self, g: &mut Graph, utts: &[(&AcousticFeatures, &Alignment)]) -> Result<Var> {
        let mut data = Vec::new();
        let mut lengths = Vec::with_capacity(utts.len());
        let mut segments = Vec::new();
        let mut offset = 0;
        for (x, a) in utts {
            a.check_covers(x)?;
            if x.dim() != self.feature_dim {
                return Err(Error::shape(
                    "acoustic encoder",
                    &[self.feature_dim],
                    x.frames().shape(),
                ));
            }
            data.extend_from_slice(x.frames().data());
            lengths.push(x.num_frames());
            segments.extend(a.segments().into_iter().map(|(s, e)| (s + offset, e + offset)));
            offset += x.num_frames();
        }
        let mut h = g.constant(Tensor::new(vec![offset, self.feature_dim], data)?);
        for block in &self.blocks {
            let (k1, b1) = (g.param(block.conv1.0), g.param(block.conv1.1));
            let (k2, b2) = (g.param(block.conv2.0), g.param(block.conv2.1));
            let c = g.conv1d_time(h, k1, b1, &lengths)?;
            let c = g.relu(c);
            let c = g.conv1d_time(c, k2, b2, &lengths)?;
            let c = g.relu(c);
            h = g.add(h, c)?;
        }
        let pooled = g.segment_mean(h, &segments)?;
        self.proj.forward(g, pooled)
    }

    /// Embeddings of one utterance, evaluated outside any training graph.
    pub fn embed(&self, store: &ParamStore, x: &AcousticFeatures, a: &Alignment) -> Result<AcousticEmbeddings> {
        let mut g = Graph::new(store);
        let v = self.forward(&mut g, &[(x, a)])?;
        Ok(AcousticEmbeddings {
            embeddings: g.value(v).clone(),
        })
    }
}

/// Per-dimension mean and standard deviation of training frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn compute<'a>(features: impl IntoIterator<Item = &'a AcousticFeatures>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for x in features {
            if sum.is_empty() {
                sum = vec![0.0; x.dim()];
                sq = vec![0.0; x.dim()];
            }
            if x.dim() != sum.len() {
                return Err(Error::shape("norm stats", &[sum.len()], &[x.dim()]));
            }
            for t in 0..x.num_frames() {
                for (j, v) in x.frame(t).iter().enumerate() {
                    sum[j] += v;
                    sq[j] += v * v;
                }
            }
            n += x.num_frames();
        }
        if n == 0 {
            return Err(Error::Config("no frames to compute normalization statistics".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n as f64 - m * m).max(0.0).sqrt().max(1e-8))
            .collect();
        Ok(NormStats { mean, std })
    }

    pub fn apply(&self, x: &mut AcousticFeatures) {
        let d = self.mean.len();
        for row in x.frames_mut().data_mut().chunks_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;
    use rand::{Rng, SeedableRng};

    fn feats(rows: usize, d: usize, rng: &mut ChaCha8Rng) -> AcousticFeatures {
        AcousticFeatures::new(
            Tensor::new(vec![rows, d], (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
        )
        .unwrap()
    }

    fn set_identity_projection(store: &mut ParamStore, enc: &AcousticEncoder) {
        let (w, b) = enc.projection();
        let d = enc.feature_dim;
        let wt = store.get_mut(w).tensor.data_mut();
        wt.fill(0.0);
        for i in 0..d {
            wt[i * d + i] = 1.0;
        }
        store.get_mut(b).tensor.data_mut().fill(0.0);
    }

    #[test]
    fn alignment_validation() {
        assert!(Alignment::new(vec![0, 2, 4]).is_ok());
        assert!(Alignment::new(vec![1, 4]).is_err());
        assert!(Alignment::new(vec![0, 3, 3]).is_err());
        assert!(Alignment::new(vec![0]).is_err());
    }

    #[test]
    fn segment_splits_and_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = feats(5, 2, &mut rng);
        let blocks = segment(&x, &Alignment::new(vec![0, 1, 5]).unwrap()).unwrap();
        assert_eq!(blocks[0].shape(), &[1, 2]);
        assert_eq!(blocks[1].shape(), &[4, 2]);
        let joined: Vec<f64> = blocks.iter().flat_map(|b| b.data().to_vec()).collect();
        assert_eq!(joined, x.frames().data());

        let x4 = feats(4, 3, &mut rng);
        let even = segment(&x4, &Alignment::new(vec![0, 2, 4]).unwrap()).unwrap();
        assert_eq!((even[0].shape()[0], even[1].shape()[0]), (2, 2));
        let whole = segment(&x4, &Alignment::new(vec![0, 4]).unwrap()).unwrap();
        assert_eq!(&whole[0], x4.frames());

        assert!(segment(&x4, &Alignment::new(vec![0, 2, 5]).unwrap()).is_err());
    }

    #[test]
    fn average_of_two_frames_with_identity_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let enc = AcousticEncoder::new(EncoderKind::Average, 2, 2, &mut store, &mut rng);
        set_identity_projection(&mut store, &enc);
        let x = AcousticFeatures::from_rows(&[vec![1.0, 3.0], vec![3.0, 5.0]]).unwrap();
        let ae = enc.embed(&store, &x, &Alignment::new(vec![0, 2]).unwrap()).unwrap();
        assert_eq!(ae.embeddings.data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_and_singleton_segments_are_linear_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = AcousticEncoder::new(EncoderKind::Average, 3, 5, &mut store, &mut rng);
        let (w, b) = enc.projection();
        let lin = |f: &[f64]| -> Vec<f64> {
            let (w, b) = (store.value(w), store.value(b));
            (0..5)
                .map(|o| b.data()[o] + (0..3).map(|i| f[i] * w.data()[i * 5 + o]).sum::<f64>())
                .collect()
        };
        let frame = vec![0.5, -1.0, 2.0];
        let x = AcousticFeatures::from_rows(&[frame.clone(), frame.clone(), frame.clone()]).unwrap();
        let ae = enc.embed(&store, &x, &Alignment::new(vec![0, 3]).unwrap()).unwrap();
        for (a, e) in ae.embeddings.data().iter().zip(lin(&frame)) {
            assert!((a - e).abs() < 1e-12);
        }
        let y = feats(4, 3, &mut rng);
        let ae = enc
            .embed(&store, &y, &Alignment::new(vec![0, 1, 2, 3, 4]).unwrap())
            .unwrap();
        for t in 0..4 {
            for (a, e) in ae.embeddings.row(t).iter().zip(lin(y.frame(t))) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn resnet_without_blocks_or_with_zero_convs_equals_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut avg_store = ParamStore::new();
        let avg = AcousticEncoder::new(EncoderKind::Average, 4, 6, &mut avg_store, &mut rng);
        let x = feats(9, 4, &mut rng);
        let a = Alignment::new(vec![0, 3, 7, 9]).unwrap();
        let reference = avg.embed(&avg_store, &x, &a).unwrap();

        for blocks in [0, 2] {
            let mut store = ParamStore::new();
            let res = AcousticEncoder::new(EncoderKind::Conv1dResnet { blocks }, 4, 6, &mut store, &mut rng);
            let ((fw, fb), (tw, tb)) = (avg.projection(), res.projection());
            store.get_mut(tw).tensor = avg_store.value(fw).clone();
            store.get_mut(tb).tensor = avg_store.value(fb).clone();
            for id in res.param_ids() {
                if store.get(id).name.ends_with("kernel") {
                    store.get_mut(id).tensor.data_mut().fill(0.0);
                }
            }
            assert_eq!(res.embed(&store, &x, &a).unwrap(), reference, "blocks = {blocks}");
        }
    }

    #[test]
    fn resnet_sees_across_boundaries_average_does_not() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let avg = AcousticEncoder::new(EncoderKind::Average, 3, 4, &mut store, &mut rng);
        let mut res_store = ParamStore::new();
        let res = AcousticEncoder::new(EncoderKind::Conv1dResnet { blocks: 2 }, 3, 4, &mut res_store, &mut rng);
        let x = feats(12, 3, &mut rng);
        let a = Alignment::new(vec![0, 6, 12]).unwrap();
        let mut y = x.clone();
        // perturb the first frame of segment 2; segment 1 ends two frames away
        y.frames_mut().data_mut()[6 * 3] += 1.0;

        let (ax, ay) = (avg.embed(&store, &x, &a).unwrap(), avg.embed(&store, &y, &a).unwrap());
        assert_eq!(ax.embeddings.row(0), ay.embeddings.row(0));
        let (rx, ry) = (
            res.embed(&res_store, &x, &a).unwrap(),
            res.embed(&res_store, &y, &a).unwrap(),
        );
        assert_ne!(rx.embeddings.row(0), ry.embeddings.row(0));
    }

    #[test]
    fn average_is_permutation_invariant_within_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let avg = AcousticEncoder::new(EncoderKind::Average, 2, 3, &mut store, &mut rng);
        let mut res_store = ParamStore::new();
        let res = AcousticEncoder::new(EncoderKind::Conv1dResnet { blocks: 1 }, 2, 3, &mut res_store, &mut rng);
        let x = feats(6, 2, &mut rng);
        let a = Alignment::new(vec![0, 4, 6]).unwrap();
        let mut y = x.clone();
        {
            let d = y.frames_mut().data_mut();
            d.swap(0, 4);
            d.swap(1, 5);
        }
        let (ax, ay) = (avg.embed(&store, &x, &a).unwrap(), avg.embed(&store, &y, &a).unwrap());
        for (p, q) in ax.embeddings.data().iter().zip(ay.embeddings.data()) {
            assert!((p - q).abs() < 1e-12);
        }
        let (rx, ry) = (
            res.embed(&res_store, &x, &a).unwrap(),
            res.embed(&res_store, &y, &a).unwrap(),
        );
        assert_ne!(rx.embeddings, ry.embeddings);
    }

    #[test]
    fn batched_forward_matches_single_utterances() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let res = AcousticEncoder::new(EncoderKind::Conv1dResnet { blocks: 1 }, 3, 4, &mut store, &mut rng);
        let x1 = feats(5, 3, &mut rng);
        let x2 = feats(7, 3, &mut rng);
        let a1 = Alignment::new(vec![0, 2, 5]).unwrap();
        let a2 = Alignment::new(vec![0, 7]).unwrap();
        let mut g = Graph::new(&store);
        let both = res.forward(&mut g, &[(&x1, &a1), (&x2, &a2)]).unwrap();
        let e1 = res.embed(&store, &x1, &a1).unwrap();
        let e2 = res.embed(&store, &x2, &a2).unwrap();
        let v = g.value(both);
        assert_eq!(v.row(0), e1.embeddings.row(0));
        assert_eq!(v.row(1), e1.embeddings.row(1));
        assert_eq!(v.row(2), e2.embeddings.row(0));
    }

    #[test]
    fn resnet_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let res = AcousticEncoder::new(EncoderKind::Conv1dResnet { blocks: 2 }, 3, 4, &mut store, &mut rng);
        let x = feats(8, 3, &mut rng);
        let a = Alignment::new(vec![0, 3, 8]).unwrap();
        let probe = Tensor::new(vec![2, 4], (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let err = grad_check(
            &mut store,
            |g| {
                let ae = res.forward(g, &[(&x, &a)])?;
                let p = g.constant(probe.clone());
                let y = g.mul(ae, p)?;
                Ok(g.sum(y))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn encoder_kind_parsing() {
        assert_eq!("average".parse::<EncoderKind>().unwrap(), EncoderKind::Average);
        assert_eq!(
            "conv1d_resnet2".parse::<EncoderKind>().unwrap(),
            EncoderKind::Conv1dResnet { blocks: 2 }
        );
        assert_eq!(
            "conv1d_resnet:3".parse::<EncoderKind>().unwrap(),
            EncoderKind::Conv1dResnet { blocks: 3 }
        );
        assert!("lstm".parse::<EncoderKind>().is_err());
        assert_eq!(EncoderKind::Conv1dResnet { blocks: 2 }.to_string(), "Conv1d resnet 2");
    }

    #[test]
    fn normalization_standardizes_training_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut xs: Vec<AcousticFeatures> = (0..4)
            .map(|_| {
                let mut f = feats(10, 3, &mut rng);
                for v in f.frames_mut().data_mut() {
                    *v = *v * 4.0 + 7.0;
                }
                f
            })
            .collect();
        let stats = NormStats::compute(&xs).unwrap();
        for x in &mut xs {
            stats.apply(x);
        }
        let again = NormStats::compute(&xs).unwrap();
        for (m, s) in again.mean.iter().zip(&again.std) {
            assert!(m.abs() < 1e-9);
            assert!((s - 1.0).abs() < 1e-9);
        }
    }
}
