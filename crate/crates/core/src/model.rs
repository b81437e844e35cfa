//! BERT-style encoder with a `[CLS]` next-token classifier and an MLM head.
//!
//! Hidden states are kept as `[batch * seq, d_model]` matrices; row
//! `b * seq + s` is position `s` of sequence `b`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, ParamId, ParamStore, Var};
use crate::text::{CLS, PAD};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub dropout_rate: f64,
}

impl ModelConfig {
    /// Toy-scale defaults for a vocabulary of `vocab_size` ids.
    pub fn toy(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_positions: 64,
            vocab_size,
            dropout_rate: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.max_positions < 2 {
            return bad("max_positions must leave room for [CLS] and one token".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.vocab_size < crate::text::NUM_SPECIALS {
            return bad(format!("vocab_size {} below the special-token count", self.vocab_size));
        }
        Ok(())
    }
}

/// A padded batch of `[CLS]`-prefixed sequences.
#[derive(Debug, Clone)]
pub struct InputBatch {
    pub batch: usize,
    pub seq: usize,
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub attention_mask: Vec<bool>,
    /// `[batch * seq, d_model]` node summed into the input; padding rows
    /// must be zero.
    pub acoustic_embeddings: Option<Var>,
    pub target_ids: Vec<usize>,
}

impl InputBatch {
    /// Pads each context (which must start with `[CLS]`) to the longest one.
    pub fn from_contexts<C: AsRef<[usize]>>(contexts: &[C], targets: &[usize]) -> Result<Self> {
        let batch = contexts.len();
        let seq = contexts.iter().map(|c| c.as_ref().len()).max().unwrap_or(0);
        let mut token_ids = vec![PAD; batch * seq];
        let mut attention_mask = vec![false; batch * seq];
        for (b, c) in contexts.iter().enumerate() {
            let c = c.as_ref();
            if c.first() != Some(&CLS) {
                return Err(Error::Config("every input sequence must start with [CLS]".into()));
            }
            token_ids[b * seq..b * seq + c.len()].copy_from_slice(c);
            attention_mask[b * seq..b * seq + c.len()].fill(true);
        }
        Ok(InputBatch {
            batch,
            seq,
            token_ids,
            segment_ids: vec![0; batch * seq],
            attention_mask,
            acoustic_embeddings: None,
            target_ids: targets.to_vec(),
        })
    }

    pub fn with_acoustic(mut self, ae: Var) -> Self {
        self.acoustic_embeddings = Some(ae);
        self
    }

    /// Row index of position 0 (`[CLS]`) of every sequence.
    pub fn cls_rows(&self) -> Vec<Option<usize>> {
        (0..self.batch).map(|b| Some(b * self.seq)).collect()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    pub(crate) w: ParamId,
    pub(crate) b: ParamId,
}

impl Linear {
    pub(crate) fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            w: store.normal(format!("{name}.w"), &[din, dout], INIT_STD, rng),
            b: store.zeros(format!("{name}.b"), &[dout]),
        }
    }

    pub(crate) fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Norm {
            gamma: store.filled(format!("{name}.gamma"), &[d], 1.0),
            beta: store.zeros(format!("{name}.beta"), &[d]),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gm, bt)
    }
}

#[derive(Debug, Clone)]
struct Layer {
    query: Linear,
    key: Linear,
    value: Linear,
    attn_out: Linear,
    attn_norm: Norm,
    ffn_in: Linear,
    ffn_out: Linear,
    ffn_norm: Norm,
}

/// Parameter handles of the encoder; values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bert {
    pub config: ModelConfig,
    token_emb: ParamId,
    segment_emb: ParamId,
    position_emb: ParamId,
    layers: Vec<Layer>,
    classifier: Linear,
    mlm_head: Linear,
}

/// Prefix of every parameter belonging to the embeddings and encoder stack.
pub const ENCODER_STACK_PREFIX: &str = "bert.";

impl Bert {
    /// Registers all parameters in `store` with normal(0, 0.02) weights and
    /// zero biases.
    pub fn new(config: ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let token_emb = store.normal("bert.embeddings.token", &[config.vocab_size, d], INIT_STD, rng);
        let segment_emb = store.normal("bert.embeddings.segment", &[2, d], INIT_STD, rng);
        let position_emb = store.normal("bert.embeddings.position", &[config.max_positions, d], INIT_STD, rng);
        let layers = (0..config.n_layers)
            .map(|i| {
                let p = format!("bert.layer{i}");
                Layer {
                    query: Linear::new(store, &format!("{p}.attn.query"), d, d, rng),
                    key: Linear::new(store, &format!("{p}.attn.key"), d, d, rng),
                    value: Linear::new(store, &format!("{p}.attn.value"), d, d, rng),
                    attn_out: Linear::new(store, &format!("{p}.attn.out"), d, d, rng),
                    attn_norm: Norm::new(store, &format!("{p}.attn.norm"), d),
                    ffn_in: Linear::new(store, &format!("{p}.ffn.in"), d, config.d_ff, rng),
                    ffn_out: Linear::new(store, &format!("{p}.ffn.out"), config.d_ff, d, rng),
                    ffn_norm: Norm::new(store, &format!("{p}.ffn.norm"), d),
                }
            })
            .collect();
        let classifier = Linear::new(store, "cls_head", d, config.vocab_size, rng);
        let mlm_head = Linear::new(store, "mlm_head", d, config.vocab_size, rng);
        Ok(Bert {
            config,
            token_emb,
            segment_emb,
            position_emb,
            layers,
            classifier,
            mlm_head,
        })
    }

    /// Sets the `[CLS]` classifier to zero so it predicts the uniform
    /// distribution.
    pub fn zero_classifier(&self, store: &mut ParamStore) {
        for id in [self.classifier.w, self.classifier.b] {
            store.get_mut(id).tensor.data_mut().fill(0.0);
        }
    }

    /// Token + segment + position embeddings, plus the acoustic embeddings
    /// when the batch carries them.
    pub fn embed(&self, g: &mut Graph, batch: &InputBatch) -> Result<Var> {
        if batch.seq > self.config.max_positions {
            return Err(Error::SequenceTooLong {
                len: batch.seq,
                max: self.config.max_positions,
            });
        }
        let positions: Vec<usize> = (0..batch.batch * batch.seq).map(|r| r % batch.seq).collect();
        let (tok, seg, pos) = (
            g.param(self.token_emb),
            g.param(self.segment_emb),
            g.param(self.position_emb),
        );
        let t = g.embedding(tok, &batch.token_ids)?;
        let s = g.embedding(seg, &batch.segment_ids)?;
        let p = g.embedding(pos, &positions)?;
        let sum = g.add(t, s)?;
        let mut sum = g.add(sum, p)?;
        if let Some(ae) = batch.acoustic_embeddings {
            sum = g.add(sum, ae)?;
        }
        Ok(sum)
    }

    /// Runs the encoder stack. `dropout` enables training-mode dropout.
    pub fn encode(&self, g: &mut Graph, batch: &InputBatch, mut dropout: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let rate = self.config.dropout_rate;
        let mut h = self.embed(g, batch)?;
        h = apply_dropout(g, h, rate, dropout.as_deref_mut())?;
        for layer in &self.layers {
            let q = layer.query.forward(g, h)?;
            let k = layer.key.forward(g, h)?;
            let v = layer.value.forward(g, h)?;
            let a = g.attention(
                q,
                k,
                v,
                batch.batch,
                batch.seq,
                self.config.n_heads,
                &batch.attention_mask,
            )?;
            let a = layer.attn_out.forward(g, a)?;
            let a = apply_dropout(g, a, rate, dropout.as_deref_mut())?;
            let r = g.add(h, a)?;
            h = layer.attn_norm.forward(g, r)?;

            let f = layer.ffn_in.forward(g, h)?;
            let f = g.relu(f);
            let f = layer.ffn_out.forward(g, f)?;
            let f = apply_dropout(g, f, rate, dropout.as_deref_mut())?;
            let r = g.add(h, f)?;
            h = layer.ffn_norm.forward(g, r)?;
        }
        Ok(h)
    }

    /// `[batch, V]` logits from the final hidden state at `[CLS]`.
    pub fn cls_next_token_logits(
        &self,
        g: &mut Graph,
        batch: &InputBatch,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let h = self.encode(g, batch, dropout)?;
        let cls = g.gather_rows(h, &batch.cls_rows())?;
        self.classifier.forward(g, cls)
    }

    /// `[batch * seq, V]` MLM logits at every position.
    pub fn mlm_logits(&self, g: &mut Graph, batch: &InputBatch, dropout: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let h = self.encode(g, batch, dropout)?;
        self.mlm_head.forward(g, h)
    }

    /// MLM logits restricted to the given flat rows.
    pub fn mlm_logits_at(
        &self,
        g: &mut Graph,
        batch: &InputBatch,
        rows: &[usize],
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let h = self.encode(g, batch, dropout)?;
        let idx: Vec<Option<usize>> = rows.iter().map(|&r| Some(r)).collect();
        let picked = g.gather_rows(h, &idx)?;
        self.mlm_head.forward(g, picked)
    }
}

fn apply_dropout(g: &mut Graph, x: Var, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep: Vec<bool> = (0..g.value(x).len()).map(|_| rng.gen::<f64>() >= rate).collect();
            g.dropout(x, &keep, rate)
        }
        _ => Ok(x),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{grad_check, log_softmax, Tensor};
    use rand::SeedableRng;

    fn tiny(vocab: usize, layers: usize) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: layers,
            n_heads: 2,
            d_ff: 12,
            max_positions: 8,
            vocab_size: vocab,
            dropout_rate: 0.0,
        }
    }

    fn setup(cfg: ModelConfig, seed: u64) -> (ParamStore, Bert) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let bert = Bert::new(cfg, &mut store, &mut rng).unwrap();
        (store, bert)
    }

    #[test]
    fn config_validation() {
        let mut c = tiny(10, 1);
        c.n_heads = 3;
        assert!(c.validate().is_err());
        assert!(ModelConfig::toy(45).validate().is_ok());
    }

    #[test]
    fn too_long_sequence_rejected() {
        let (store, bert) = setup(tiny(10, 1), 1);
        let mut g = Graph::new(&store);
        let ctx = vec![vec![CLS; 9]];
        let batch = InputBatch::from_contexts(&ctx, &[5]).unwrap();
        assert!(matches!(
            bert.embed(&mut g, &batch),
            Err(Error::SequenceTooLong { len: 9, max: 8 })
        ));
    }

    #[test]
    fn zero_acoustics_are_an_exact_identity() {
        let (store, bert) = setup(tiny(10, 1), 2);
        let mut g = Graph::new(&store);
        let batch = InputBatch::from_contexts(&[vec![CLS, 6, 7], vec![CLS, 5, 0]], &[5, 6]).unwrap();
        let plain = bert.embed(&mut g, &batch).unwrap();
        let zeros = g.constant(Tensor::zeros(&[6, 8]));
        let with = bert.embed(&mut g, &batch.clone().with_acoustic(zeros)).unwrap();
        assert_eq!(g.value(plain).data(), g.value(with).data());
    }

    #[test]
    fn acoustic_embeddings_add_exactly() {
        let (store, bert) = setup(tiny(10, 1), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new(&store);
        let batch = InputBatch::from_contexts(&[vec![CLS, 6, 7]], &[5]).unwrap();
        let plain = bert.embed(&mut g, &batch).unwrap();
        let ae: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let aev = g.constant(Tensor::new(vec![3, 8], ae.clone()).unwrap());
        let with = bert.embed(&mut g, &batch.clone().with_acoustic(aev)).unwrap();
        for ((w, p), a) in g.value(with).data().iter().zip(g.value(plain).data()).zip(&ae) {
            assert_eq!(*w, p + a);
        }
    }

    #[test]
    fn embedding_isolates_token_row() {
        let (mut store, bert) = setup(tiny(10, 0), 5);
        for name in ["bert.embeddings.segment", "bert.embeddings.position"] {
            let id = store.by_name(name).unwrap();
            store.get_mut(id).tensor.data_mut().fill(0.0);
        }
        let mut g = Graph::new(&store);
        let batch = InputBatch::from_contexts(&[vec![CLS]], &[5]).unwrap();
        let e = bert.embed(&mut g, &batch).unwrap();
        let tok = store.value(store.by_name("bert.embeddings.token").unwrap());
        assert_eq!(g.value(e).data(), tok.row(CLS));
    }

    #[test]
    fn empty_stack_encode_equals_embed() {
        let (store, bert) = setup(tiny(10, 0), 6);
        let mut g = Graph::new(&store);
        let batch = InputBatch::from_contexts(&[vec![CLS, 7]], &[5]).unwrap();
        let e = bert.embed(&mut g, &batch).unwrap();
        let h = bert.encode(&mut g, &batch, None).unwrap();
        assert_eq!(g.value(e).data(), g.value(h).data());
    }

    #[test]
    fn padding_permutation_leaves_real_positions_unchanged() {
        let (store, bert) = setup(tiny(12, 2), 7);
        let mut g = Graph::new(&store);
        let mut a = InputBatch::from_contexts(&[vec![CLS, 6, 7, 8, 9], vec![CLS, 10]], &[5, 5]).unwrap();
        // scramble the padded tokens of the second row in two different ways
        a.token_ids[7..10].copy_from_slice(&[11, 3, 9]);
        let h1 = bert.encode(&mut g, &a, None).unwrap();
        let mut b = a.clone();
        b.token_ids[7..10].copy_from_slice(&[9, 11, 3]);
        let h2 = bert.encode(&mut g, &b, None).unwrap();
        let (v1, v2) = (g.value(h1), g.value(h2));
        for r in [0, 1, 2, 3, 4, 5, 6] {
            assert_eq!(v1.row(r), v2.row(r), "row {r}");
        }
    }

    #[test]
    fn zero_classifier_is_uniform() {
        let (mut store, bert) = setup(tiny(11, 1), 8);
        bert.zero_classifier(&mut store);
        let mut g = Graph::new(&store);
        let batch = InputBatch::from_contexts(&[vec![CLS, 6], vec![CLS]], &[5, 6]).unwrap();
        let logits = bert.cls_next_token_logits(&mut g, &batch, None).unwrap();
        assert_eq!(g.shape(logits), &[2, 11]);
        for row in g.value(logits).data().chunks(11) {
            let lp = log_softmax(row);
            let ppl = (-lp[6]).exp();
            assert!((ppl - 11.0).abs() < 1e-9);
        }
    }

    #[test]
    fn mlm_shape_and_determinism() {
        let (store, bert) = setup(tiny(10, 1), 9);
        let batch = InputBatch::from_contexts(&[vec![CLS, 6, 7], vec![CLS, 8, 0]], &[5, 5]).unwrap();
        let run = || {
            let mut g = Graph::new(&store);
            let l = bert.mlm_logits(&mut g, &batch, None).unwrap();
            g.value(l).clone()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.shape(), &[6, 10]);
        assert_eq!(a, b);
    }

    #[test]
    fn mlm_head_gradient_check() {
        let (mut store, bert) = setup(tiny(9, 1), 10);
        // larger weights so the check is not dominated by near-zero values
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for id in store.ids().collect::<Vec<_>>() {
            for v in store.get_mut(id).tensor.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        let batch = InputBatch::from_contexts(&[vec![CLS, 6, 7, 8], vec![CLS, 5, 0, 0]], &[0, 0]).unwrap();
        let err = grad_check(
            &mut store,
            |g| {
                let logits = bert.mlm_logits_at(g, &batch, &[1, 3, 5], None)?;
                g.cross_entropy(logits, &[6, 8, 5])
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-3, "relative error {err}");
    }
}
