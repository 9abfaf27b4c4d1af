//! Frozen toy transformer encoder with per-passage, per-layer stepping.
//!
//! Each passage is encoded independently with the question prefixed to it.
//! Layer 0 is the embedding output (token embedding plus sinusoidal
//! position encoding); every later layer is a pre-norm block:
//!
//! ```text
//! x = x + Wo · MultiHeadAttention(LayerNorm1(x))
//! x = x + W2 · relu(W1 · LayerNorm2(x))
//! ```
//!
//! Weights are drawn once from the seeded generator and never updated.

use std::path::Path;

use crate::error::{ApeError, Result};
use crate::numerics::checkpoint;
use crate::numerics::{relu, ParamBlock, Parameterized, Rng, Tensor2};

pub const MAX_SEQ_LEN_LIMIT: usize = 256;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub init_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            num_layers: 6,
            model_dim: 32,
            num_heads: 4,
            ffn_dim: 64,
            vocab_size: 256,
            max_seq_len: 64,
            init_seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ApeError::Config(m));
        if self.model_dim == 0 || self.num_heads == 0 {
            return fail("encoder.model_dim and encoder.num_heads must be positive".into());
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "encoder.model_dim {} is not divisible by encoder.num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        if self.max_seq_len == 0 || self.max_seq_len > MAX_SEQ_LEN_LIMIT {
            return fail(format!(
                "encoder.max_seq_len must be in 1..={MAX_SEQ_LEN_LIMIT}, got {}",
                self.max_seq_len
            ));
        }
        if self.vocab_size == 0 || self.ffn_dim == 0 {
            return fail("encoder.vocab_size and encoder.ffn_dim must be positive".into());
        }
        Ok(())
    }

    /// Scalar count of a model built from this config, position table included.
    pub fn param_count(&self) -> usize {
        let (d, f) = (self.model_dim, self.ffn_dim);
        let per_layer = 4 * d * d + 4 * d + 2 * d * f + f + d + 4 * d;
        (self.vocab_size + self.max_seq_len) * d + self.num_layers * per_layer
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

/// Passage representation `h_n^j` after `layer_index` encoder layers.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState {
    pub passage_index: usize,
    pub layer_index: usize,
    pub activations: Tensor2,
    /// Passage tokens dropped from the tail to fit `max_seq_len`.
    pub truncated: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub ln1_gain: ParamBlock,
    pub ln1_bias: ParamBlock,
    pub wq: ParamBlock,
    pub bq: ParamBlock,
    pub wk: ParamBlock,
    pub bk: ParamBlock,
    pub wv: ParamBlock,
    pub bv: ParamBlock,
    pub wo: ParamBlock,
    pub bo: ParamBlock,
    pub ln2_gain: ParamBlock,
    pub ln2_bias: ParamBlock,
    pub w1: ParamBlock,
    pub b1: ParamBlock,
    pub w2: ParamBlock,
    pub b2: ParamBlock,
}

impl EncoderLayer {
    fn zeros(index: usize, d: usize, ffn: usize) -> Self {
        let n = |s: &str| format!("layer{index}.{s}");
        let mut gain1 = ParamBlock::zeros(n("ln1_gain"), 1, d);
        gain1.value.fill(1.0);
        let mut gain2 = ParamBlock::zeros(n("ln2_gain"), 1, d);
        gain2.value.fill(1.0);
        EncoderLayer {
            ln1_gain: gain1,
            ln1_bias: ParamBlock::zeros(n("ln1_bias"), 1, d),
            wq: ParamBlock::zeros(n("wq"), d, d),
            bq: ParamBlock::zeros(n("bq"), 1, d),
            wk: ParamBlock::zeros(n("wk"), d, d),
            bk: ParamBlock::zeros(n("bk"), 1, d),
            wv: ParamBlock::zeros(n("wv"), d, d),
            bv: ParamBlock::zeros(n("bv"), 1, d),
            wo: ParamBlock::zeros(n("wo"), d, d),
            bo: ParamBlock::zeros(n("bo"), 1, d),
            ln2_gain: gain2,
            ln2_bias: ParamBlock::zeros(n("ln2_bias"), 1, d),
            w1: ParamBlock::zeros(n("w1"), d, ffn),
            b1: ParamBlock::zeros(n("b1"), 1, ffn),
            w2: ParamBlock::zeros(n("w2"), ffn, d),
            b2: ParamBlock::zeros(n("b2"), 1, d),
        }
    }

    fn blocks(&self) -> [&ParamBlock; 16] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn blocks_mut(&mut self) -> [&mut ParamBlock; 16] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel {
    config: EncoderConfig,
    token_embedding: ParamBlock,
    position_embedding: ParamBlock,
    layers: Vec<EncoderLayer>,
}

fn fill_normal(block: &mut ParamBlock, std: f64, rng: &mut Rng) {
    for v in block.value.data_mut() {
        *v = std * rng.normal();
    }
}

/// Sinusoidal position table: even columns `sin(pos / 10000^(i/d))`, odd
/// columns `cos` of the same angle (with `i` the even index of the pair).
pub fn sinusoidal_positions(max_len: usize, d: usize) -> Tensor2 {
    let mut t = Tensor2::zeros(max_len, d);
    for pos in 0..max_len {
        for i in 0..d {
            let pair = (i / 2) * 2;
            let angle = pos as f64 / 10000f64.powf(pair as f64 / d as f64);
            t.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}

impl EncoderModel {
    /// Builds the model from `config.init_seed`. Draw order: token
    /// embeddings row by row, then per layer `wq, wk, wv, wo, w1, w2`.
    /// Token embeddings are standard normal; a weight matrix with fan-in
    /// `m` is normal with variance `1/m`. Biases start at zero and layer
    /// norm gains at one.
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let mut rng = Rng::seeded(config.init_seed);
        let mut model = EncoderModel::zeroed(config)?;
        fill_normal(&mut model.token_embedding, 1.0, &mut rng);
        let ffn = model.config.ffn_dim;
        for layer in &mut model.layers {
            let s = 1.0 / (d as f64).sqrt();
            fill_normal(&mut layer.wq, s, &mut rng);
            fill_normal(&mut layer.wk, s, &mut rng);
            fill_normal(&mut layer.wv, s, &mut rng);
            fill_normal(&mut layer.wo, s, &mut rng);
            fill_normal(&mut layer.w1, s, &mut rng);
            fill_normal(&mut layer.w2, 1.0 / (ffn as f64).sqrt(), &mut rng);
        }
        Ok(model)
    }

    /// Model with zero embeddings and identity-initialized layer norms,
    /// the starting point for hand-set weights.
    pub fn zeroed(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let position_embedding = ParamBlock::new(
            "position_embedding",
            sinusoidal_positions(config.max_seq_len, d),
        );
        let layers = (0..config.num_layers)
            .map(|i| EncoderLayer::zeros(i, d, config.ffn_dim))
            .collect();
        Ok(EncoderModel {
            token_embedding: ParamBlock::zeros("token_embedding", config.vocab_size, d),
            position_embedding,
            layers,
            config,
        })
    }

    /// Builds a model with the given weights. Used for hand-set weights in
    /// tests and for loading checkpoints; the result is frozen like any other.
    pub fn with_weights(config: EncoderConfig, edit: impl FnOnce(&mut EncoderWeights<'_>)) -> Result<Self> {
        let mut model = EncoderModel::zeroed(config)?;
        let mut view = EncoderWeights {
            token_embedding: &mut model.token_embedding.value,
            position_embedding: &mut model.position_embedding.value,
            layers: &mut model.layers,
        };
        edit(&mut view);
        Ok(model)
    }

    pub fn load(config: EncoderConfig, path: &Path) -> Result<Self> {
        let mut model = EncoderModel::zeroed(config)?;
        checkpoint::load(&mut model, path)?;
        Ok(model)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    pub fn digest(&self) -> [u8; 32] {
        checkpoint::digest(self)
    }

    /// Layer-0 hidden state of `question ++ passage`. If the pair is longer
    /// than `max_seq_len`, passage tokens are dropped from the tail; the
    /// question is never truncated.
    pub fn embed(&self, passage_index: usize, question: &[u32], passage: &[u32]) -> Result<HiddenState> {
        let max = self.config.max_seq_len;
        if question.len() > max {
            return Err(ApeError::Argument(format!(
                "question has {} tokens, max_seq_len is {max}",
                question.len()
            )));
        }
        let keep = passage.len().min(max - question.len());
        let tokens: Vec<u32> = question.iter().chain(&passage[..keep]).copied().collect();
        if tokens.is_empty() {
            return Err(ApeError::Argument("empty question and passage".into()));
        }
        let d = self.config.model_dim;
        let mut acts = Tensor2::zeros(tokens.len(), d);
        for (pos, &tok) in tokens.iter().enumerate() {
            let tok = tok as usize;
            if tok >= self.config.vocab_size {
                return Err(ApeError::Argument(format!(
                    "token id {tok} out of range for vocab_size {}",
                    self.config.vocab_size
                )));
            }
            let emb = self.token_embedding.value.row(tok);
            let pe = self.position_embedding.value.row(pos);
            for ((o, e), p) in acts.row_mut(pos).iter_mut().zip(emb).zip(pe) {
                *o = e + p;
            }
        }
        Ok(HiddenState {
            passage_index,
            layer_index: 0,
            activations: acts,
            truncated: passage.len() - keep,
        })
    }

    /// Applies encoder layer `h.layer_index` and returns the next state.
    pub fn forward_layer(&self, h: &HiddenState) -> Result<HiddenState> {
        let Some(layer) = self.layers.get(h.layer_index) else {
            return Err(ApeError::AlreadyComplete {
                passage: h.passage_index,
                layers: self.config.num_layers,
            });
        };
        let activations = self.apply_layer(layer, &h.activations)?;
        Ok(HiddenState {
            passage_index: h.passage_index,
            layer_index: h.layer_index + 1,
            activations,
            truncated: h.truncated,
        })
    }

    pub fn encode_full(&self, passage_index: usize, question: &[u32], passage: &[u32]) -> Result<HiddenState> {
        let mut h = self.embed(passage_index, question, passage)?;
        while h.layer_index < self.config.num_layers {
            h = self.forward_layer(&h)?;
        }
        Ok(h)
    }

    fn apply_layer(&self, layer: &EncoderLayer, x: &Tensor2) -> Result<Tensor2> {
        let seq = x.rows();
        let heads = self.config.num_heads;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let normed = layer_norm(x, &layer.ln1_gain.value, &layer.ln1_bias.value);
        let q = affine(&normed, &layer.wq, &layer.bq)?;
        let k = affine(&normed, &layer.wk, &layer.bk)?;
        let v = affine(&normed, &layer.wv, &layer.bv)?;

        let mut mixed = Tensor2::zeros(seq, self.config.model_dim);
        let mut scores = vec![0.0; seq];
        for head in 0..heads {
            let cols = head * dh..(head + 1) * dh;
            for i in 0..seq {
                let qi = &q.row(i)[cols.clone()];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &k.row(j)[cols.clone()];
                    *s = qi.iter().zip(kj).fold(0.0, |acc, (a, b)| acc + a * b) * scale;
                }
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    total += *s;
                }
                let out = &mut mixed.row_mut(i)[cols.clone()];
                for (j, &w) in scores.iter().enumerate() {
                    let vj = &v.row(j)[cols.clone()];
                    for (o, val) in out.iter_mut().zip(vj) {
                        *o += (w / total) * val;
                    }
                }
            }
        }
        let mut x1 = affine(&mixed, &layer.wo, &layer.bo)?;
        x1.add_assign(x)?;

        let normed2 = layer_norm(&x1, &layer.ln2_gain.value, &layer.ln2_bias.value);
        let mut hidden = affine(&normed2, &layer.w1, &layer.b1)?;
        hidden.data_mut().iter_mut().for_each(|v| *v = relu(*v));
        let mut out = affine(&hidden, &layer.w2, &layer.b2)?;
        out.add_assign(&x1)?;
        if !out.is_finite() {
            return Err(ApeError::NonFinite("encoder layer produced non-finite activations".into()));
        }
        Ok(out)
    }
}

/// Mutable access to encoder weights, handed out only by
/// [`EncoderModel::with_weights`].
pub struct EncoderWeights<'a> {
    pub token_embedding: &'a mut Tensor2,
    pub position_embedding: &'a mut Tensor2,
    pub layers: &'a mut [EncoderLayer],
}

fn affine(x: &Tensor2, w: &ParamBlock, b: &ParamBlock) -> Result<Tensor2> {
    let mut out = x.matmul(&w.value)?;
    out.add_row_vector(b.value.data())?;
    Ok(out)
}

fn layer_norm(x: &Tensor2, gain: &Tensor2, bias: &Tensor2) -> Tensor2 {
    let d = x.cols();
    let mut out = Tensor2::zeros(x.rows(), d);
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().fold(0.0, |a, v| a + v) / d as f64;
        let var = row.iter().fold(0.0, |a, v| a + (v - mean) * (v - mean)) / d as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (c, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = (row[c] - mean) * inv * gain.data()[c] + bias.data()[c];
        }
    }
    out
}

impl Parameterized for EncoderModel {
    fn blocks(&self) -> Vec<&ParamBlock> {
        let mut out = vec![&self.token_embedding, &self.position_embedding];
        for l in &self.layers {
            out.extend(l.blocks());
        }
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut ParamBlock> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for l in &mut self.layers {
            out.extend(l.blocks_mut());
        }
        out
    }
}
