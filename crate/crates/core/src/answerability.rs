//! Answerability head: pools a passage hidden state and predicts the
//! probability that the passage contains the answer.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::datagen::QuestionInstance;
use crate::encoder::{EncoderModel, HiddenState};
use crate::error::{ApeError, Result};
use crate::harness::metrics::auc;
use crate::numerics::checkpoint;
use crate::numerics::mlp::Mlp;
use crate::numerics::{sigmoid, Adam, AdamConfig, ParamBlock, Parameterized, Rng, Tensor2};

pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    Max,
    Mean,
    FirstToken,
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Max => "max",
            Pooling::Mean => "mean",
            Pooling::FirstToken => "first",
        })
    }
}

impl FromStr for Pooling {
    type Err = ApeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Pooling::Max),
            "mean" => Ok(Pooling::Mean),
            "first" | "first-token" | "cls" => Ok(Pooling::FirstToken),
            other => Err(ApeError::Config(format!("unknown pooling '{other}'"))),
        }
    }
}

/// Pooled vector plus, for max pooling, the token row each dimension came
/// from (lowest row on ties).
#[derive(Clone, Debug, PartialEq)]
pub struct Pooled {
    pub values: Vec<f64>,
    pub source_rows: Vec<usize>,
}

pub fn pool(h: &HiddenState, mode: Pooling) -> Vec<f64> {
    pool_with_routes(&h.activations, mode).values
}

pub fn pool_with_routes(acts: &Tensor2, mode: Pooling) -> Pooled {
    let (rows, cols) = acts.shape();
    match mode {
        Pooling::Max => {
            let mut values = acts.row(0).to_vec();
            let mut source_rows = vec![0; cols];
            for r in 1..rows {
                for (c, &v) in acts.row(r).iter().enumerate() {
                    if v > values[c] {
                        values[c] = v;
                        source_rows[c] = r;
                    }
                }
            }
            Pooled {
                values,
                source_rows,
            }
        }
        Pooling::Mean => {
            let mut values = vec![0.0; cols];
            for r in 0..rows {
                for (o, v) in values.iter_mut().zip(acts.row(r)) {
                    *o += v;
                }
            }
            values.iter_mut().for_each(|v| *v /= rows as f64);
            Pooled {
                values,
                source_rows: Vec::new(),
            }
        }
        Pooling::FirstToken => Pooled {
            values: acts.row(0).to_vec(),
            source_rows: vec![0; cols],
        },
    }
}

/// Anything that maps a hidden state to a has-answer probability. The
/// scheduler is generic over this so tests can substitute fixed tables.
pub trait Answerability {
    fn prob(&self, h: &HiddenState) -> f64;
}

/// Two-layer ReLU MLP on the pooled representation: `d -> hidden -> 1`,
/// followed by a sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct HasAnswerModel {
    pooling: Pooling,
    pub mlp: Mlp,
}

impl HasAnswerModel {
    pub fn zeros(model_dim: usize, hidden: usize, pooling: Pooling) -> Self {
        HasAnswerModel {
            pooling,
            mlp: Mlp::zeros("hasanswer", model_dim, hidden),
        }
    }

    /// He-normal first layer, small output layer (std 0.01) so the initial
    /// predictor sits near p = 0.5.
    pub fn new(model_dim: usize, hidden: usize, pooling: Pooling, rng: &mut Rng) -> Self {
        HasAnswerModel {
            pooling,
            mlp: Mlp::init("hasanswer", model_dim, hidden, 0.01, rng),
        }
    }

    pub fn load(model_dim: usize, hidden: usize, pooling: Pooling, path: &Path) -> Result<Self> {
        let mut m = HasAnswerModel::zeros(model_dim, hidden, pooling);
        checkpoint::load(&mut m, path)?;
        Ok(m)
    }

    pub fn pooling(&self) -> Pooling {
        self.pooling
    }

    pub fn model_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn hidden_size(&self) -> usize {
        self.mlp.hidden_dim()
    }

    pub fn logit_pooled(&self, z: &[f64]) -> f64 {
        self.mlp.forward(z).out
    }

    pub fn prob_pooled(&self, z: &[f64]) -> f64 {
        sigmoid(self.logit_pooled(z))
    }

    /// Accumulates `scale * dL/dθ` into the parameter gradients for the
    /// binary cross-entropy of one pooled example. Returns the loss and
    /// `scale * dL/dz`.
    pub fn accumulate_pooled(&mut self, z: &[f64], label: bool, scale: f64) -> (f64, Vec<f64>) {
        let cache = self.mlp.forward(z);
        let prob = sigmoid(cache.out);
        let y = if label { 1.0 } else { 0.0 };
        let loss = bce_loss(prob, label);
        let dz = self.mlp.backward(z, &cache, (prob - y) * scale);
        (loss, dz)
    }

    /// Loss for one hidden state; accumulates parameter gradients and
    /// returns `dL/d activations`, routed through the pooling operator
    /// (max pooling sends each dimension's gradient to its source row).
    pub fn accumulate(&mut self, h: &HiddenState, label: bool, scale: f64) -> (f64, Tensor2) {
        let pooled = pool_with_routes(&h.activations, self.pooling);
        let (loss, dz) = self.accumulate_pooled(&pooled.values, label, scale);
        let (rows, cols) = h.activations.shape();
        let mut dact = Tensor2::zeros(rows, cols);
        match self.pooling {
            Pooling::Max | Pooling::FirstToken => {
                for (c, &r) in pooled.source_rows.iter().enumerate() {
                    dact.set(r, c, dz[c]);
                }
            }
            Pooling::Mean => {
                for r in 0..rows {
                    for (c, g) in dz.iter().enumerate() {
                        dact.set(r, c, g / rows as f64);
                    }
                }
            }
        }
        (loss, dact)
    }
}

impl Answerability for HasAnswerModel {
    fn prob(&self, h: &HiddenState) -> f64 {
        self.prob_pooled(&pool(h, self.pooling))
    }
}

impl Parameterized for HasAnswerModel {
    fn blocks(&self) -> Vec<&ParamBlock> {
        self.mlp.blocks().to_vec()
    }

    fn blocks_mut(&mut self) -> Vec<&mut ParamBlock> {
        self.mlp.blocks_mut().into_iter().collect()
    }
}

/// Binary cross-entropy with `p` clamped to `[1e-12, 1 - 1e-12]`.
pub fn bce_loss(p: f64, label: bool) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if label {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HasAnswerTrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub pooling: Pooling,
    pub hidden_size: usize,
    /// Fraction of questions held out for loss/AUC reporting.
    pub holdout_fraction: f64,
}

impl Default for HasAnswerTrainConfig {
    fn default() -> Self {
        HasAnswerTrainConfig {
            adam: AdamConfig {
                learning_rate: 1e-4,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-6,
            },
            batch_size: 24,
            epochs: 2,
            pooling: Pooling::Max,
            hidden_size: 64,
            holdout_fraction: 0.2,
        }
    }
}

/// One `(h_n^j, label)` training pair, stored pooled.
#[derive(Clone, Debug)]
pub struct PooledExample {
    pub features: Vec<f64>,
    pub label: bool,
    pub layer: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub holdout_loss: f64,
    pub holdout_auc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HasAnswerLog {
    pub initial_holdout_loss: f64,
    pub initial_holdout_auc: f64,
    pub epochs: Vec<EpochStats>,
    pub train_examples: usize,
    pub holdout_examples: usize,
}

impl HasAnswerLog {
    pub fn final_auc(&self) -> f64 {
        self.epochs
            .last()
            .map_or(self.initial_holdout_auc, |e| e.holdout_auc)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,holdout_loss,holdout_auc\n");
        s.push_str(&format!(
            "0,,{},{}\n",
            self.initial_holdout_loss, self.initial_holdout_auc
        ));
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{}\n",
                e.epoch, e.train_loss, e.holdout_loss, e.holdout_auc
            ));
        }
        s
    }
}

/// Encodes every passage of `questions` to a uniformly drawn depth
/// `j ∈ 0..=L` and pools it. Each question draws depths from its own
/// stream, so the result does not depend on thread scheduling.
pub fn build_examples(
    questions: &[QuestionInstance],
    encoder: &EncoderModel,
    pooling: Pooling,
    seed: u64,
) -> Result<Vec<PooledExample>> {
    let layers = encoder.num_layers();
    let per_question: Vec<Result<Vec<PooledExample>>> = questions
        .par_iter()
        .enumerate()
        .map(|(qi, q)| {
            let mut rng = Rng::derive(seed, qi as u64);
            q.passages
                .iter()
                .map(|p| {
                    let depth = rng.below(layers + 1);
                    let mut h = encoder.embed(p.rank, &q.question, &p.tokens)?;
                    for _ in 0..depth {
                        h = encoder.forward_layer(&h)?;
                    }
                    Ok(PooledExample {
                        features: pool(&h, pooling),
                        label: p.has_answer,
                        layer: depth,
                    })
                })
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    for r in per_question {
        out.extend(r?);
    }
    Ok(out)
}

pub fn evaluate_examples(model: &HasAnswerModel, examples: &[PooledExample]) -> (f64, f64) {
    if examples.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let probs: Vec<f64> = examples.iter().map(|e| model.prob_pooled(&e.features)).collect();
    let loss = probs
        .iter()
        .zip(examples)
        .fold(0.0, |acc, (&p, e)| acc + bce_loss(p, e.label))
        / examples.len() as f64;
    let labels: Vec<bool> = examples.iter().map(|e| e.label).collect();
    (loss, auc(&probs, &labels))
}

/// Splits question indices into (train, holdout) after a seeded shuffle.
pub fn split_questions(n: usize, holdout_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    Rng::derive(seed, 0x5917).shuffle(&mut idx);
    let n_hold = ((n as f64) * holdout_fraction).round() as usize;
    let n_hold = n_hold.min(n.saturating_sub(1));
    let holdout = idx.split_off(n - n_hold);
    (idx, holdout)
}

/// Supervised training of the answerability head on mixed-depth examples.
/// The encoder is only read.
pub fn train_has_answer(
    dataset: &[QuestionInstance],
    encoder: &EncoderModel,
    cfg: &HasAnswerTrainConfig,
    seed: u64,
) -> Result<(HasAnswerModel, HasAnswerLog)> {
    if dataset.is_empty() {
        return Err(ApeError::Argument("cannot train on an empty dataset".into()));
    }
    if cfg.batch_size == 0 {
        return Err(ApeError::Config("hasanswer.batch_size must be positive".into()));
    }
    let mut rng = Rng::derive(seed, 0xa5);
    let mut model = HasAnswerModel::new(
        encoder.config().model_dim,
        cfg.hidden_size,
        cfg.pooling,
        &mut rng,
    );

    let (train_idx, hold_idx) = split_questions(dataset.len(), cfg.holdout_fraction, seed);
    let pick = |idx: &[usize]| idx.iter().map(|&i| dataset[i].clone()).collect::<Vec<_>>();
    let train = build_examples(&pick(&train_idx), encoder, cfg.pooling, seed ^ 0x7261)?;
    let holdout = build_examples(&pick(&hold_idx), encoder, cfg.pooling, seed ^ 0x686f)?;

    let (initial_holdout_loss, initial_holdout_auc) = evaluate_examples(&model, &holdout);
    let mut adam = Adam::new(cfg.adam);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            model.zero_grad();
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &i in batch {
                let ex = &train[i];
                batch_loss += model.accumulate_pooled(&ex.features, ex.label, scale).0;
            }
            if !batch_loss.is_finite() {
                return Err(ApeError::NonFinite(format!(
                    "epoch {epoch} batch {bi}: loss {batch_loss}, examples {batch:?}, param norm {}, grad norm {}",
                    model.param_norm(),
                    model.grad_norm()
                )));
            }
            total += batch_loss;
            adam.step(&mut model);
        }
        let (holdout_loss, holdout_auc) = evaluate_examples(&model, &holdout);
        epochs.push(EpochStats {
            epoch,
            train_loss: total / train.len().max(1) as f64,
            holdout_loss,
            holdout_auc,
        });
    }
    model.zero_grad();
    Ok((
        model,
        HasAnswerLog {
            initial_holdout_loss,
            initial_holdout_auc,
            epochs,
            train_examples: train.len(),
            holdout_examples: holdout.len(),
        },
    ))
}
