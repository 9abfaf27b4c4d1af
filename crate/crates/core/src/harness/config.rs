//! Flat `key = value` run configuration.
//!
//! Every key is validated and unknown keys are rejected. `#` starts a
//! comment. List values are comma-separated.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::answerability::{HasAnswerTrainConfig, Pooling};
use crate::datagen::GenConfig;
use crate::encoder::EncoderConfig;
use crate::error::{ApeError, Result};
use crate::numerics::rng::splitmix64;
use crate::policy_training::{Baseline, RLConfig};
use crate::scheduler::{SchedulerParams, DEFAULT_EMBED_DIM, DEFAULT_HIDDEN};

/// Which generated split a dataset belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    HasAnswer,
    Scheduler,
    Eval,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::HasAnswer, Split::Scheduler, Split::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Split::HasAnswer => "hasanswer",
            Split::Scheduler => "scheduler",
            Split::Eval => "eval",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::HasAnswer => 0x4841,
            Split::Scheduler => 0x5343,
            Split::Eval => 0x4556,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SchedulerInit {
    /// Random hidden layers and embeddings, zero output layers.
    Random,
    Zero,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    /// Generator settings shared by every split; `num_questions` and
    /// `seed` are filled per split.
    pub gen: GenConfig,
    pub hasanswer_questions: usize,
    pub scheduler_questions: usize,
    pub eval_questions: usize,
    pub hasanswer: HasAnswerTrainConfig,
    pub rl: RLConfig,
    pub scheduler_hidden: usize,
    pub scheduler_embed_dim: usize,
    pub scheduler_init: SchedulerInit,
    pub eval_k: Vec<usize>,
    pub eval_budget_multipliers: Vec<f64>,
    pub eval_policies: Vec<String>,
    pub eval_timing: bool,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            encoder: EncoderConfig::default(),
            gen: GenConfig::default(),
            hasanswer_questions: 2000,
            scheduler_questions: 1000,
            eval_questions: 500,
            hasanswer: HasAnswerTrainConfig::default(),
            rl: RLConfig::default(),
            scheduler_hidden: DEFAULT_HIDDEN,
            scheduler_embed_dim: DEFAULT_EMBED_DIM,
            scheduler_init: SchedulerInit::Random,
            eval_k: vec![2, 3, 5],
            eval_budget_multipliers: vec![1.0],
            eval_policies: EVAL_POLICIES.iter().map(|s| s.to_string()).collect(),
            eval_timing: false,
            seeds: vec![0, 1, 2],
            out_dir: PathBuf::from("runs"),
        }
    }
}

pub const EVAL_POLICIES: [&str; 4] = ["ape_argmax", "round_robin", "static_topk", "greedy_p"];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| ApeError::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "encoder.num_layers" => self.encoder.num_layers = parse_value(key, v)?,
            "encoder.model_dim" => self.encoder.model_dim = parse_value(key, v)?,
            "encoder.num_heads" => self.encoder.num_heads = parse_value(key, v)?,
            "encoder.ffn_dim" => self.encoder.ffn_dim = parse_value(key, v)?,
            "encoder.vocab_size" => self.encoder.vocab_size = parse_value(key, v)?,
            "encoder.max_seq_len" => self.encoder.max_seq_len = parse_value(key, v)?,
            "gen.num_passages" => self.gen.num_passages = parse_value(key, v)?,
            "gen.question_len" => self.gen.question_len = parse_value(key, v)?,
            "gen.passage_len" => self.gen.passage_len = parse_value(key, v)?,
            "gen.relevance_base" => self.gen.relevance_base = parse_value(key, v)?,
            "gen.rank_decay" => self.gen.rank_decay = parse_value(key, v)?,
            "gen.signal_strength" => self.gen.signal_strength = parse_value(key, v)?,
            "gen.max_copies" => self.gen.max_copies = parse_value(key, v)?,
            "data.hasanswer_questions" => self.hasanswer_questions = parse_value(key, v)?,
            "data.scheduler_questions" => self.scheduler_questions = parse_value(key, v)?,
            "data.eval_questions" => self.eval_questions = parse_value(key, v)?,
            "hasanswer.learning_rate" => self.hasanswer.adam.learning_rate = parse_value(key, v)?,
            "hasanswer.beta1" => self.hasanswer.adam.beta1 = parse_value(key, v)?,
            "hasanswer.beta2" => self.hasanswer.adam.beta2 = parse_value(key, v)?,
            "hasanswer.eps" => self.hasanswer.adam.eps = parse_value(key, v)?,
            "hasanswer.batch_size" => self.hasanswer.batch_size = parse_value(key, v)?,
            "hasanswer.epochs" => self.hasanswer.epochs = parse_value(key, v)?,
            "hasanswer.pooling" => {
                self.hasanswer.pooling = v
                    .parse::<Pooling>()
                    .map_err(|_| ApeError::Config(format!("{key}: expected max, mean or first, got '{v}'")))?
            }
            "hasanswer.hidden_size" => self.hasanswer.hidden_size = parse_value(key, v)?,
            "hasanswer.holdout_fraction" => self.hasanswer.holdout_fraction = parse_value(key, v)?,
            "rl.gamma" => self.rl.gamma = parse_value(key, v)?,
            "rl.step_cost" => self.rl.step_cost = parse_value(key, v)?,
            "rl.tau" => self.rl.tau = parse_value(key, v)?,
            "rl.learning_rate" => self.rl.learning_rate = parse_value(key, v)?,
            "rl.batch_size" => self.rl.batch_size = parse_value(key, v)?,
            "rl.epochs" => self.rl.epochs = parse_value(key, v)?,
            "rl.max_steps" => self.rl.max_steps = parse_value(key, v)?,
            "rl.baseline" => {
                let decay = match self.rl.baseline {
                    Baseline::MovingAverage { decay } => decay,
                    Baseline::None => 0.9,
                };
                self.rl.baseline = match v {
                    "none" => Baseline::None,
                    "moving_average" => Baseline::MovingAverage { decay },
                    _ => return Err(ApeError::Config(format!("{key}: expected none or moving_average, got '{v}'"))),
                }
            }
            "rl.baseline_decay" => {
                let d: f64 = parse_value(key, v)?;
                match &mut self.rl.baseline {
                    Baseline::MovingAverage { decay } => *decay = d,
                    Baseline::None => {
                        return Err(ApeError::Config(format!("{key} set while rl.baseline = none")));
                    }
                }
            }
            "rl.grad_ceiling" => self.rl.grad_ceiling = parse_value(key, v)?,
            "rl.divergence_patience" => self.rl.divergence_patience = parse_value(key, v)?,
            "scheduler.hidden_size" => self.scheduler_hidden = parse_value(key, v)?,
            "scheduler.embed_dim" => self.scheduler_embed_dim = parse_value(key, v)?,
            "scheduler.init" => {
                self.scheduler_init = match v {
                    "random" => SchedulerInit::Random,
                    "zero" => SchedulerInit::Zero,
                    _ => return Err(ApeError::Config(format!("{key}: expected random or zero, got '{v}'"))),
                }
            }
            "eval.k" => self.eval_k = parse_list(key, v)?,
            "eval.budget_multipliers" => self.eval_budget_multipliers = parse_list(key, v)?,
            "eval.policies" => self.eval_policies = parse_list(key, v)?,
            "eval.timing" => self.eval_timing = parse_value(key, v)?,
            "run.seeds" => self.seeds = parse_list(key, v)?,
            "run.out_dir" => self.out_dir = PathBuf::from(v),
            _ => return Err(ApeError::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ApeError::Parse {
                line: i + 1,
                offset: 0,
                message: format!("expected 'key = value', got '{line}'"),
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(ApeError::Config(format!("duplicate key '{key}' on line {}", i + 1)));
            }
            self.set(key, value).map_err(|e| match e {
                ApeError::Config(m) => ApeError::Config(format!("line {}: {m}", i + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ApeError::io(path, e))?;
        RunConfig::parse(&text)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| ApeError::Config(format!("override '{assignment}' is not key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.gen.validate()?;
        self.rl.validate()?;
        if self.gen.vocab_size > self.encoder.vocab_size {
            return Err(ApeError::Config(format!(
                "generator vocabulary {} exceeds encoder.vocab_size {}",
                self.gen.vocab_size, self.encoder.vocab_size
            )));
        }
        if self.gen.question_len + self.gen.passage_len > self.encoder.max_seq_len {
            return Err(ApeError::Config(format!(
                "gen.question_len + gen.passage_len = {} exceeds encoder.max_seq_len {}",
                self.gen.question_len + self.gen.passage_len,
                self.encoder.max_seq_len
            )));
        }
        for (key, n) in [
            ("data.hasanswer_questions", self.hasanswer_questions),
            ("data.scheduler_questions", self.scheduler_questions),
            ("data.eval_questions", self.eval_questions),
            ("hasanswer.batch_size", self.hasanswer.batch_size),
            ("hasanswer.hidden_size", self.hasanswer.hidden_size),
            ("scheduler.hidden_size", self.scheduler_hidden),
            ("scheduler.embed_dim", self.scheduler_embed_dim),
        ] {
            if n == 0 {
                return Err(ApeError::Config(format!("{key} must be positive")));
            }
        }
        let lr = self.hasanswer.adam.learning_rate;
        if lr <= 0.0 || !lr.is_finite() {
            return Err(ApeError::Config(format!("hasanswer.learning_rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&self.hasanswer.holdout_fraction) {
            return Err(ApeError::Config(format!(
                "hasanswer.holdout_fraction must be in [0, 1), got {}",
                self.hasanswer.holdout_fraction
            )));
        }
        if self.eval_k.is_empty() {
            return Err(ApeError::Config("eval.k must list at least one value".into()));
        }
        if let Some(&k) = self.eval_k.iter().find(|&&k| k == 0 || k > self.gen.num_passages) {
            return Err(ApeError::Config(format!(
                "eval.k value {k} outside 1..={}",
                self.gen.num_passages
            )));
        }
        if let Some(m) = self
            .eval_budget_multipliers
            .iter()
            .find(|m| **m < 0.0 || !m.is_finite())
        {
            return Err(ApeError::Config(format!("eval.budget_multipliers value {m} must be >= 0")));
        }
        if let Some(p) = self.eval_policies.iter().find(|p| !EVAL_POLICIES.contains(&p.as_str())) {
            return Err(ApeError::Config(format!(
                "eval.policies: unknown policy '{p}' (expected one of {})",
                EVAL_POLICIES.join(", ")
            )));
        }
        if self.seeds.is_empty() {
            return Err(ApeError::Config("run.seeds must list at least one seed".into()));
        }
        Ok(())
    }

    /// Encoder configuration for a run seed.
    pub fn encoder_config(&self, seed: u64) -> EncoderConfig {
        EncoderConfig {
            init_seed: seed,
            ..self.encoder.clone()
        }
    }

    /// Generator configuration for one split of a run seed.
    pub fn gen_config(&self, split: Split, seed: u64) -> GenConfig {
        let num_questions = match split {
            Split::HasAnswer => self.hasanswer_questions,
            Split::Scheduler => self.scheduler_questions,
            Split::Eval => self.eval_questions,
        };
        GenConfig {
            num_questions,
            seed: splitmix64(seed ^ (split.tag() << 32)),
            ..self.gen.clone()
        }
    }

    /// Fresh scheduler parameters for the configured initialization.
    pub fn scheduler_init_params(&self, seed: u64) -> SchedulerParams {
        let (n, l) = (self.gen.num_passages, self.encoder.num_layers);
        match self.scheduler_init {
            SchedulerInit::Random => SchedulerParams::init(
                n,
                l,
                self.scheduler_hidden,
                self.scheduler_embed_dim,
                &mut crate::numerics::Rng::derive(seed, 0x5c4e),
            ),
            SchedulerInit::Zero => self.scheduler_zero_params(),
        }
    }

    pub fn scheduler_zero_params(&self) -> SchedulerParams {
        SchedulerParams::zeros(
            self.gen.num_passages,
            self.encoder.num_layers,
            self.scheduler_hidden,
            self.scheduler_embed_dim,
        )
    }

    /// Every key with its current value, in `key = value` form. Parsing
    /// the output reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("encoder.num_layers", self.encoder.num_layers.to_string());
        kv("encoder.model_dim", self.encoder.model_dim.to_string());
        kv("encoder.num_heads", self.encoder.num_heads.to_string());
        kv("encoder.ffn_dim", self.encoder.ffn_dim.to_string());
        kv("encoder.vocab_size", self.encoder.vocab_size.to_string());
        kv("encoder.max_seq_len", self.encoder.max_seq_len.to_string());
        kv("gen.num_passages", self.gen.num_passages.to_string());
        kv("gen.question_len", self.gen.question_len.to_string());
        kv("gen.passage_len", self.gen.passage_len.to_string());
        kv("gen.relevance_base", self.gen.relevance_base.to_string());
        kv("gen.rank_decay", self.gen.rank_decay.to_string());
        kv("gen.signal_strength", self.gen.signal_strength.to_string());
        kv("gen.max_copies", self.gen.max_copies.to_string());
        kv("data.hasanswer_questions", self.hasanswer_questions.to_string());
        kv("data.scheduler_questions", self.scheduler_questions.to_string());
        kv("data.eval_questions", self.eval_questions.to_string());
        kv("hasanswer.learning_rate", self.hasanswer.adam.learning_rate.to_string());
        kv("hasanswer.beta1", self.hasanswer.adam.beta1.to_string());
        kv("hasanswer.beta2", self.hasanswer.adam.beta2.to_string());
        kv("hasanswer.eps", self.hasanswer.adam.eps.to_string());
        kv("hasanswer.batch_size", self.hasanswer.batch_size.to_string());
        kv("hasanswer.epochs", self.hasanswer.epochs.to_string());
        kv("hasanswer.pooling", self.hasanswer.pooling.to_string());
        kv("hasanswer.hidden_size", self.hasanswer.hidden_size.to_string());
        kv("hasanswer.holdout_fraction", self.hasanswer.holdout_fraction.to_string());
        kv("rl.gamma", self.rl.gamma.to_string());
        kv("rl.step_cost", self.rl.step_cost.to_string());
        kv("rl.tau", self.rl.tau.to_string());
        kv("rl.learning_rate", self.rl.learning_rate.to_string());
        kv("rl.batch_size", self.rl.batch_size.to_string());
        kv("rl.epochs", self.rl.epochs.to_string());
        kv("rl.max_steps", self.rl.max_steps.to_string());
        match self.rl.baseline {
            Baseline::None => kv("rl.baseline", "none".into()),
            Baseline::MovingAverage { decay } => {
                kv("rl.baseline", "moving_average".into());
                kv("rl.baseline_decay", decay.to_string());
            }
        }
        kv("rl.grad_ceiling", self.rl.grad_ceiling.to_string());
        kv("rl.divergence_patience", self.rl.divergence_patience.to_string());
        kv("scheduler.hidden_size", self.scheduler_hidden.to_string());
        kv("scheduler.embed_dim", self.scheduler_embed_dim.to_string());
        kv(
            "scheduler.init",
            match self.scheduler_init {
                SchedulerInit::Random => "random".into(),
                SchedulerInit::Zero => "zero".into(),
            },
        );
        kv("eval.k", join(&self.eval_k));
        kv("eval.budget_multipliers", join(&self.eval_budget_multipliers));
        kv("eval.policies", self.eval_policies.join(","));
        kv("eval.timing", self.eval_timing.to_string());
        kv("run.seeds", join(&self.seeds));
        kv("run.out_dir", self.out_dir.display().to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert!(c.validate().is_ok());
        assert_eq!(c.hasanswer.adam.learning_rate, 1e-4);
        assert_eq!(c.hasanswer.batch_size, 24);
        assert_eq!(c.hasanswer.epochs, 2);
        assert_eq!(c.hasanswer.pooling, Pooling::Max);
        assert_eq!(c.rl.learning_rate, 0.01);
        assert_eq!(c.rl.max_steps, 240);
        assert_eq!((c.rl.gamma, c.rl.step_cost), (0.8, 0.1));
        assert_eq!(c.eval_k, vec![2, 3, 5]);
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set("rl.baseline", "none").unwrap();
        c.set("eval.budget_multipliers", "0.5, 1, 2").unwrap();
        c.set("gen.signal_strength", "0.65").unwrap();
        let back = RunConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(RunConfig::parse(&RunConfig::default().to_text()).unwrap(), RunConfig::default());
    }

    #[test]
    fn comments_and_blank_lines() {
        let c = RunConfig::parse("# header\n\nrl.tau = 0.5   # trailing\n").unwrap();
        assert_eq!(c.rl.tau, 0.5);
    }

    #[test]
    fn unknown_key_rejected_with_line() {
        let err = RunConfig::parse("rl.tau = 1\nrl.temperature = 2\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("rl.temperature") && msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn invalid_values_rejected() {
        for text in [
            "rl.tau = 0",
            "eval.k = 0",
            "eval.k = 21",
            "eval.policies = oracle",
            "hasanswer.pooling = sum",
            "gen.passage_len = 70",
            "encoder.num_heads = 5",
            "rl.gamma = abc",
            "rl.tau 1",
        ] {
            assert!(RunConfig::parse(text).is_err(), "{text}");
        }
        assert!(RunConfig::parse("rl.tau = 1\nrl.tau = 2").is_err());
    }

    #[test]
    fn split_seeds_differ() {
        let c = RunConfig::default();
        let seeds: Vec<u64> = Split::ALL.iter().map(|&s| c.gen_config(s, 0).seed).collect();
        assert_ne!(seeds[0], seeds[1]);
        assert_ne!(seeds[1], seeds[2]);
        assert_eq!(c.gen_config(Split::Eval, 0).num_questions, c.eval_questions);
    }
}
