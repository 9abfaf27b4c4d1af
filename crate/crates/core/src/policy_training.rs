//! REINFORCE training of the scheduler with the encoder and HasAnswer head
//! frozen.
//!
//! Episodes are sampled from `softmax(q / tau)` over the active passages.
//! Each selection earns `1 - c` when the chosen passage has the answer and
//! `-c` otherwise. An update ascends
//!
//! ```text
//! mean_episodes  sum_t (G_t - b_t) * grad log pi(a_t | candidates_t)
//! ```
//!
//! with `G_t` the discounted return and `b_t` an optional per-step
//! moving-average baseline.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::answerability::Answerability;
use crate::datagen::QuestionInstance;
use crate::encoder::EncoderModel;
use crate::error::{ApeError, Result};
use crate::numerics::{checkpoint, softmax, Adam, AdamConfig, Parameterized, Rng};
use crate::scheduler::{run_episode, BudgetConfig, Decision, Policy, ProbTable, Rollout, SchedulerParams};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Baseline {
    None,
    /// Per-step-index exponential moving average of returns.
    MovingAverage { decay: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RLConfig {
    pub gamma: f64,
    pub step_cost: f64,
    pub tau: f64,
    pub learning_rate: f64,
    /// Questions per update.
    pub batch_size: usize,
    pub epochs: usize,
    pub max_steps: usize,
    pub baseline: Baseline,
    /// Gradient-norm ceiling for divergence detection.
    pub grad_ceiling: f64,
    /// Consecutive batches above the ceiling before aborting.
    pub divergence_patience: usize,
}

impl Default for RLConfig {
    fn default() -> Self {
        RLConfig {
            gamma: 0.8,
            step_cost: 0.1,
            tau: 1.0,
            learning_rate: 0.01,
            batch_size: 24,
            epochs: 1,
            max_steps: 240,
            baseline: Baseline::MovingAverage { decay: 0.9 },
            grad_ceiling: 1e6,
            divergence_patience: 10,
        }
    }
}

impl RLConfig {
    /// Defaults with no baseline.
    pub fn without_baseline() -> Self {
        RLConfig {
            baseline: Baseline::None,
            ..RLConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ApeError::Config(m));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("rl.gamma must be in [0, 1], got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.step_cost) {
            return bad(format!("rl.step_cost must be in [0, 1], got {}", self.step_cost));
        }
        if self.tau <= 0.0 || !self.tau.is_finite() {
            return bad(format!("rl.tau must be positive, got {}", self.tau));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return bad(format!("rl.learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("rl.batch_size must be at least 1".into());
        }
        if let Baseline::MovingAverage { decay } = self.baseline {
            if !(0.0..=1.0).contains(&decay) {
                return bad(format!("rl.baseline_decay must be in [0, 1], got {decay}"));
            }
        }
        if self.divergence_patience == 0 {
            return bad("rl.divergence_patience must be at least 1".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Discounted returns, right to left.
pub fn returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// A sampled episode plus the fingerprint of the parameters it was
/// sampled under.
#[derive(Clone, Debug)]
pub struct Episode {
    pub rollout: Rollout,
    pub params_fingerprint: u64,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.rollout.trace.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rollout.trace.steps.is_empty()
    }
}

/// `log pi(chosen | candidates)` under the current parameters.
pub fn log_policy(params: &SchedulerParams, decision: &Decision, tau: f64) -> Result<f64> {
    let q = decision
        .candidates
        .iter()
        .map(|&(n, l, p)| params.priority(p, n, l))
        .collect::<Result<Vec<f64>>>()?;
    Ok(q[decision.chosen] / tau - crate::numerics::log_sum_exp(&q, tau))
}

/// Adds `weight * grad log pi(chosen | candidates)` to the parameter
/// gradients.
pub fn accumulate_log_policy_grad(params: &mut SchedulerParams, decision: &Decision, tau: f64, weight: f64) -> Result<()> {
    let q = decision
        .candidates
        .iter()
        .map(|&(n, l, p)| params.priority(p, n, l))
        .collect::<Result<Vec<f64>>>()?;
    let pi = softmax(&q, tau)?;
    for (i, &(n, l, p)) in decision.candidates.iter().enumerate() {
        let indicator = if i == decision.chosen { 1.0 } else { 0.0 };
        params.accumulate_priority_grad(p, n, l, weight * (indicator - pi[i]) / tau)?;
    }
    Ok(())
}

/// Samples one training episode on a precomputed probability table.
pub fn sample_episode(
    table: &ProbTable,
    labels: &[bool],
    params: &SchedulerParams,
    cfg: &RLConfig,
    rng: &mut Rng,
) -> Result<Episode> {
    let mut table = table.clone();
    table.reset();
    let budget = BudgetConfig {
        budget: cfg.max_steps,
        k: 1,
        policy: Policy::Softmax { tau: cfg.tau },
        step_cost: cfg.step_cost,
    };
    let rollout = run_episode(&mut table, labels, params, &budget, rng)?;
    Ok(Episode {
        rollout,
        params_fingerprint: params.fingerprint(),
    })
}

/// Moving-average baseline state, indexed by step.
#[derive(Clone, Debug, Default)]
pub struct BaselineState {
    pub values: Vec<f64>,
}

impl BaselineState {
    fn value(&self, t: usize) -> f64 {
        self.values.get(t).copied().unwrap_or(0.0)
    }

    fn update(&mut self, batch_returns: &[Vec<f64>], decay: f64) {
        let horizon = batch_returns.iter().map(|g| g.len()).max().unwrap_or(0);
        for t in 0..horizon {
            let (sum, count) = batch_returns
                .iter()
                .filter_map(|g| g.get(t))
                .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
            let mean = sum / count as f64;
            if t < self.values.len() {
                self.values[t] = decay * self.values[t] + (1.0 - decay) * mean;
            } else {
                self.values.push(mean);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchStats {
    /// Mean undiscounted-from-start return `G_0`.
    pub mean_return: f64,
    pub mean_len: f64,
    pub grad_norm: f64,
}

/// Writes the REINFORCE loss gradient (negated objective) for a batch into
/// `params` and returns the batch statistics. Parameters are not changed.
pub fn reinforce_gradient(
    episodes: &[Episode],
    params: &mut SchedulerParams,
    cfg: &RLConfig,
    baseline: &BaselineState,
) -> Result<(BatchStats, Vec<Vec<f64>>)> {
    if episodes.is_empty() {
        return Err(ApeError::Argument("empty episode batch".into()));
    }
    let current = params.fingerprint();
    if let Some(e) = episodes.iter().find(|e| e.params_fingerprint != current) {
        return Err(ApeError::StaleEpisode {
            sampled: e.params_fingerprint,
            current,
        });
    }
    params.zero_grad();
    let scale = 1.0 / episodes.len() as f64;
    let mut all_returns = Vec::with_capacity(episodes.len());
    let mut total_return = 0.0;
    let mut total_len = 0.0;
    for ep in episodes {
        let g = returns(&ep.rollout.trace.rewards(), cfg.gamma);
        total_return += g.first().copied().unwrap_or(0.0);
        total_len += ep.len() as f64;
        // d(-J)/dq_i summed over steps, keyed by (rank, layer); within an
        // episode p is a function of (rank, layer).
        let mut weights: BTreeMap<(usize, usize), (f64, f64)> = BTreeMap::new();
        for (t, d) in ep.rollout.decisions.iter().enumerate() {
            let advantage = match cfg.baseline {
                Baseline::None => g[t],
                Baseline::MovingAverage { .. } => g[t] - baseline.value(t),
            };
            if advantage == 0.0 {
                continue;
            }
            let pi = softmax(&d.priorities, cfg.tau)?;
            for (i, &(n, l, p)) in d.candidates.iter().enumerate() {
                let indicator = if i == d.chosen { 1.0 } else { 0.0 };
                let w = -scale * advantage * (indicator - pi[i]) / cfg.tau;
                weights.entry((n, l)).or_insert((p, 0.0)).1 += w;
            }
        }
        for ((n, l), (p, w)) in weights {
            if w != 0.0 {
                params.accumulate_priority_grad(p, n, l, w)?;
            }
        }
        all_returns.push(g);
    }
    let stats = BatchStats {
        mean_return: total_return * scale,
        mean_len: total_len * scale,
        grad_norm: params.grad_norm(),
    };
    Ok((stats, all_returns))
}

/// One REINFORCE step: gradient, Adam update, baseline update.
pub fn reinforce_update(
    episodes: &[Episode],
    params: &mut SchedulerParams,
    cfg: &RLConfig,
    adam: &mut Adam,
    baseline: &mut BaselineState,
) -> Result<BatchStats> {
    let (stats, all_returns) = reinforce_gradient(episodes, params, cfg, baseline)?;
    if !stats.grad_norm.is_finite() {
        return Err(ApeError::NonFinite(format!(
            "scheduler gradient norm {} at Adam step {}",
            stats.grad_norm,
            adam.steps() + 1
        )));
    }
    adam.step(params);
    params.zero_grad();
    if let Baseline::MovingAverage { decay } = cfg.baseline {
        baseline.update(&all_returns, decay);
    }
    Ok(stats)
}

/// Per-batch learning curve.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LearningCurve {
    pub batches: Vec<BatchStats>,
}

impl LearningCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("batch,mean_return,mean_len,grad_norm\n");
        for (i, b) in self.batches.iter().enumerate() {
            let _ = writeln!(s, "{},{},{},{}", i, b.mean_return, b.mean_len, b.grad_norm);
        }
        s
    }

    /// Trailing moving average of mean returns over `window` batches.
    pub fn smoothed_returns(&self, window: usize) -> Vec<f64> {
        let r: Vec<f64> = self.batches.iter().map(|b| b.mean_return).collect();
        (0..r.len())
            .map(|i| {
                let lo = (i + 1).saturating_sub(window.max(1));
                r[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
            })
            .collect()
    }
}

/// Probability tables for every question, built in parallel.
pub fn build_tables<A: Answerability + Sync>(
    dataset: &[QuestionInstance],
    encoder: &EncoderModel,
    has_answer: &A,
) -> Result<Vec<ProbTable>> {
    dataset
        .par_iter()
        .map(|q| ProbTable::build(q, encoder, has_answer))
        .collect()
}

/// Trains scheduler parameters on precomputed probability tables.
pub fn train_on_tables(
    tables: &[ProbTable],
    labels: &[Vec<bool>],
    init: SchedulerParams,
    cfg: &RLConfig,
    seed: u64,
) -> Result<(SchedulerParams, LearningCurve)> {
    cfg.validate()?;
    if tables.len() != labels.len() {
        return Err(ApeError::Argument(format!("{} tables for {} label rows", tables.len(), labels.len())));
    }
    let mut params = init;
    let mut adam = Adam::new(cfg.adam());
    let mut baseline = BaselineState::default();
    let mut curve = LearningCurve::default();
    let mut order_rng = Rng::derive(seed, 0x0bde);
    let mut over_ceiling = 0usize;
    let mut batch_index = 0u64;
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..tables.len()).collect();
        order_rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let snapshot = &params;
            let episodes = chunk
                .par_iter()
                .enumerate()
                .map(|(j, &qi)| {
                    let mut rng = Rng::derive(seed, (batch_index << 20) | j as u64);
                    sample_episode(&tables[qi], &labels[qi], snapshot, cfg, &mut rng)
                })
                .collect::<Result<Vec<Episode>>>()?;
            let stats = reinforce_update(&episodes, &mut params, cfg, &mut adam, &mut baseline)?;
            curve.batches.push(stats);
            if stats.grad_norm > cfg.grad_ceiling {
                over_ceiling += 1;
                if over_ceiling >= cfg.divergence_patience {
                    return Err(ApeError::Divergence(format!(
                        "gradient norm above {} for {} consecutive batches (last {}, batch {}, mean return {})",
                        cfg.grad_ceiling, over_ceiling, stats.grad_norm, batch_index, stats.mean_return
                    )));
                }
            } else {
                over_ceiling = 0;
            }
            batch_index += 1;
        }
    }
    Ok((params, curve))
}

/// Full phase-2 training: builds probability tables from the frozen encoder
/// and HasAnswer head, then runs REINFORCE from `init`.
pub fn train_scheduler<A: Answerability + Parameterized + Sync>(
    dataset: &[QuestionInstance],
    encoder: &EncoderModel,
    has_answer: &A,
    init: SchedulerParams,
    cfg: &RLConfig,
    seed: u64,
) -> Result<(SchedulerParams, LearningCurve)> {
    let before = (encoder.digest(), checkpoint::digest(has_answer));
    let tables = build_tables(dataset, encoder, has_answer)?;
    let labels: Vec<Vec<bool>> = dataset.iter().map(|q| q.labels()).collect();
    let out = train_on_tables(&tables, &labels, init, cfg, seed)?;
    let after = (encoder.digest(), checkpoint::digest(has_answer));
    debug_assert_eq!(before, after);
    Ok(out)
}

/// Mean `G_0` of the greedy (argmax) policy on the given tables, with the
/// training episode budget.
pub fn evaluate_mean_return(
    tables: &[ProbTable],
    labels: &[Vec<bool>],
    params: &SchedulerParams,
    cfg: &RLConfig,
    policy: Policy,
    seed: u64,
) -> Result<f64> {
    let budget = BudgetConfig {
        budget: cfg.max_steps,
        k: 1,
        policy,
        step_cost: cfg.step_cost,
    };
    let total = tables
        .par_iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (t, l))| {
            let mut t = t.clone();
            t.reset();
            let mut rng = Rng::derive(seed, i as u64);
            let r = run_episode(&mut t, l, params, &budget, &mut rng)?;
            Ok(returns(&r.trace.rewards(), cfg.gamma).first().copied().unwrap_or(0.0))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(total.iter().sum::<f64>() / tables.len().max(1) as f64)
}
