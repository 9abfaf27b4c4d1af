//! Budgeted layer scheduling over a question's passages.
//!
//! Every passage starts at layer 0 with its probability `p_n^0` (free of
//! budget). Each step picks one active passage, runs one more encoder layer
//! for it, and refreshes its probability and priority
//!
//! ```text
//! q_n = sigmoid(g(p, n, l)) * p + f(p, n, l)
//! ```
//!
//! where `g` and `f` are MLPs over `[p, rank_embedding[n], layer_embedding[l]]`.
//! After the budget is spent (or every passage reaches the top layer) the
//! `k` passages with the most layers are retained, ties broken by higher
//! `p`, then lower rank.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::answerability::Answerability;
use crate::datagen::QuestionInstance;
use crate::encoder::{EncoderModel, HiddenState};
use crate::error::{ApeError, Result};
use crate::numerics::checkpoint;
use crate::numerics::mlp::Mlp;
use crate::numerics::{log_sum_exp, sigmoid, softmax, ParamBlock, Parameterized, Rng};

pub const DEFAULT_EMBED_DIM: usize = 16;
pub const DEFAULT_HIDDEN: usize = 64;

/// Trainable parameters of the priority function.
#[derive(Clone, Debug, PartialEq)]
pub struct SchedulerParams {
    pub rank_embedding: ParamBlock,
    pub layer_embedding: ParamBlock,
    pub g: Mlp,
    pub f: Mlp,
}

impl SchedulerParams {
    /// All-zero parameters: `g = f = 0`, hence `q = p / 2`.
    pub fn zeros(max_rank: usize, num_layers: usize, hidden: usize, embed_dim: usize) -> Self {
        let input = 1 + 2 * embed_dim;
        SchedulerParams {
            rank_embedding: ParamBlock::zeros("scheduler.rank_embedding", max_rank, embed_dim),
            layer_embedding: ParamBlock::zeros("scheduler.layer_embedding", num_layers + 1, embed_dim),
            g: Mlp::zeros("scheduler.g", input, hidden),
            f: Mlp::zeros("scheduler.f", input, hidden),
        }
    }

    /// Training initialization: standard normal embeddings, He-normal
    /// hidden layers and zero output layers. The outputs of `g` and `f` are
    /// therefore exactly zero, so the initial argmax policy is greedy on `p`.
    pub fn init(max_rank: usize, num_layers: usize, hidden: usize, embed_dim: usize, rng: &mut Rng) -> Self {
        let mut p = SchedulerParams::zeros(max_rank, num_layers, hidden, embed_dim);
        for v in p.rank_embedding.value.data_mut() {
            *v = rng.normal();
        }
        for v in p.layer_embedding.value.data_mut() {
            *v = rng.normal();
        }
        let input = 1 + 2 * embed_dim;
        p.g = Mlp::init("scheduler.g", input, hidden, 0.0, rng);
        p.f = Mlp::init("scheduler.f", input, hidden, 0.0, rng);
        p
    }

    pub fn load(max_rank: usize, num_layers: usize, hidden: usize, embed_dim: usize, path: &Path) -> Result<Self> {
        let mut p = SchedulerParams::zeros(max_rank, num_layers, hidden, embed_dim);
        checkpoint::load(&mut p, path)?;
        Ok(p)
    }

    pub fn max_rank(&self) -> usize {
        self.rank_embedding.value.rows()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_embedding.value.rows() - 1
    }

    pub fn embed_dim(&self) -> usize {
        self.rank_embedding.value.cols()
    }

    pub fn fingerprint(&self) -> u64 {
        checkpoint::fingerprint(self)
    }

    fn check_position(&self, rank: usize, layer: usize) -> Result<()> {
        if rank >= self.max_rank() {
            return Err(ApeError::Config(format!(
                "rank {rank} beyond rank embedding table of size {}",
                self.max_rank()
            )));
        }
        if layer > self.num_layers() {
            return Err(ApeError::Config(format!(
                "layer {layer} beyond layer embedding table for {} layers",
                self.num_layers()
            )));
        }
        Ok(())
    }

    /// `[p, rank_embedding[n], layer_embedding[l]]`.
    pub fn input(&self, p: f64, rank: usize, layer: usize) -> Vec<f64> {
        let mut x = Vec::with_capacity(1 + 2 * self.embed_dim());
        x.push(p);
        x.extend_from_slice(self.rank_embedding.value.row(rank));
        x.extend_from_slice(self.layer_embedding.value.row(layer));
        x
    }

    /// Raw `(g, f)` outputs.
    pub fn heads(&self, p: f64, rank: usize, layer: usize) -> Result<(f64, f64)> {
        self.check_position(rank, layer)?;
        let x = self.input(p, rank, layer);
        Ok((self.g.forward(&x).out, self.f.forward(&x).out))
    }

    pub fn priority(&self, p: f64, rank: usize, layer: usize) -> Result<f64> {
        let (g, f) = self.heads(p, rank, layer)?;
        Ok(combine_priority(g, f, p))
    }

    /// Adds `weight * dq/dθ` at `(p, rank, layer)` to the gradients.
    pub fn accumulate_priority_grad(&mut self, p: f64, rank: usize, layer: usize, weight: f64) -> Result<()> {
        self.check_position(rank, layer)?;
        let x = self.input(p, rank, layer);
        let gc = self.g.forward(&x);
        let fc = self.f.forward(&x);
        let s = sigmoid(gc.out);
        let dx_g = self.g.backward(&x, &gc, weight * s * (1.0 - s) * p);
        let dx_f = self.f.backward(&x, &fc, weight);
        let e = self.embed_dim();
        let rank_grad = self.rank_embedding.grad.row_mut(rank);
        for i in 0..e {
            rank_grad[i] += dx_g[1 + i] + dx_f[1 + i];
        }
        let layer_grad = self.layer_embedding.grad.row_mut(layer);
        for i in 0..e {
            layer_grad[i] += dx_g[1 + e + i] + dx_f[1 + e + i];
        }
        Ok(())
    }
}

impl Parameterized for SchedulerParams {
    fn blocks(&self) -> Vec<&ParamBlock> {
        let mut v = vec![&self.rank_embedding, &self.layer_embedding];
        v.extend(self.g.blocks());
        v.extend(self.f.blocks());
        v
    }

    fn blocks_mut(&mut self) -> Vec<&mut ParamBlock> {
        let mut v = vec![&mut self.rank_embedding, &mut self.layer_embedding];
        v.extend(self.g.blocks_mut());
        v.extend(self.f.blocks_mut());
        v
    }
}

/// `sigmoid(g) * p + f`.
#[inline]
pub fn combine_priority(g: f64, f: f64, p: f64) -> f64 {
    sigmoid(g) * p + f
}

/// Reward for one selection: `1 - c` for a has-answer passage, `-c`
/// otherwise.
pub fn step_reward(has_answer: bool, step_cost: f64) -> f64 {
    if has_answer {
        1.0 - step_cost
    } else {
        -step_cost
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Policy {
    /// Highest priority; ties to the lowest rank.
    Argmax,
    /// Sample from `softmax(q / tau)` over active passages.
    Softmax { tau: f64 },
    /// Cycle through active passages in rank order.
    RoundRobin,
    /// Lowest-rank active passage first: full encoding of the top-k by rank.
    StaticTopK,
    /// Highest `p`; ties to the lowest rank. Ignores the learned heads.
    GreedyP,
}

impl Policy {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::Argmax => "ape_argmax",
            Policy::Softmax { .. } => "softmax",
            Policy::RoundRobin => "round_robin",
            Policy::StaticTopK => "static_topk",
            Policy::GreedyP => "greedy_p",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Policy::Argmax => f.write_str("argmax"),
            Policy::Softmax { tau } => write!(f, "softmax:{tau}"),
            Policy::RoundRobin => f.write_str("round_robin"),
            Policy::StaticTopK => f.write_str("static_topk"),
            Policy::GreedyP => f.write_str("greedy_p"),
        }
    }
}

impl FromStr for Policy {
    type Err = ApeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "argmax" | "ape" | "ape_argmax" => Ok(Policy::Argmax),
            "round_robin" => Ok(Policy::RoundRobin),
            "static_topk" => Ok(Policy::StaticTopK),
            "greedy_p" => Ok(Policy::GreedyP),
            "softmax" => Ok(Policy::Softmax { tau: 1.0 }),
            other => {
                if let Some(t) = other.strip_prefix("softmax:") {
                    let tau: f64 = t
                        .parse()
                        .map_err(|_| ApeError::Config(format!("invalid softmax temperature '{t}'")))?;
                    if tau <= 0.0 || !tau.is_finite() {
                        return Err(ApeError::Config(format!("softmax temperature must be positive, got {tau}")));
                    }
                    Ok(Policy::Softmax { tau })
                } else {
                    Err(ApeError::Config(format!("unknown policy '{other}'")))
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BudgetConfig {
    /// Number of single-passage layer steps `B`.
    pub budget: usize,
    /// Retained passage count `k`.
    pub k: usize,
    pub policy: Policy,
    /// Step cost `c` used for per-step rewards in the trace.
    pub step_cost: f64,
}

impl BudgetConfig {
    /// `B = L * k`.
    pub fn layers_times_k(num_layers: usize, k: usize, policy: Policy) -> Self {
        BudgetConfig {
            budget: num_layers * k,
            k,
            policy,
            step_cost: 0.1,
        }
    }
}

/// Scheduler-side state of one passage.
#[derive(Clone, Debug, PartialEq)]
pub struct PassageComputeState {
    pub rank: usize,
    pub layer: usize,
    pub p: f64,
    pub q: f64,
    pub active: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleStep {
    /// 1-based step index.
    pub t: usize,
    pub rank: usize,
    /// Layer index of the chosen passage after the step.
    pub layer: usize,
    pub p: f64,
    pub q: f64,
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleTrace {
    pub steps: Vec<ScheduleStep>,
    pub budget_used: usize,
    /// Retained ranks in retention order.
    pub retained: Vec<usize>,
}

impl ScheduleTrace {
    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    /// Tab-separated dump: one `t n l p q r` line per step, then
    /// `retained<TAB>n1,n2,...`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for st in &self.steps {
            let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}\t{}", st.t, st.rank, st.layer, st.p, st.q, st.reward);
        }
        s.push_str("retained\t");
        let ranks: Vec<String> = self.retained.iter().map(|r| r.to_string()).collect();
        s.push_str(&ranks.join(","));
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<ScheduleTrace> {
        let mut steps = Vec::new();
        let mut retained = None;
        for (i, line) in text.lines().enumerate() {
            let perr = |m: &str| ApeError::Parse {
                line: i + 1,
                offset: 0,
                message: m.to_string(),
            };
            if let Some(rest) = line.strip_prefix("retained\t") {
                let ranks = if rest.is_empty() {
                    Vec::new()
                } else {
                    rest.split(',')
                        .map(|r| r.parse::<usize>().map_err(|_| perr("bad retained rank")))
                        .collect::<Result<Vec<_>>>()?
                };
                retained = Some(ranks);
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(perr("expected 6 tab-separated fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| perr("bad number"));
            let int = |s: &str| s.parse::<usize>().map_err(|_| perr("bad integer"));
            steps.push(ScheduleStep {
                t: int(f[0])?,
                rank: int(f[1])?,
                layer: int(f[2])?,
                p: num(f[3])?,
                q: num(f[4])?,
                reward: num(f[5])?,
            });
        }
        let retained = retained.ok_or_else(|| ApeError::Parse {
            line: text.lines().count(),
            offset: 0,
            message: "missing retained line".into(),
        })?;
        Ok(ScheduleTrace {
            budget_used: steps.len(),
            steps,
            retained,
        })
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }
}

/// One softmax-policy decision, kept for REINFORCE.
#[derive(Clone, Debug, PartialEq)]
pub struct Decision {
    /// `(rank, layer, p)` of every active passage, in rank order.
    pub candidates: Vec<(usize, usize, f64)>,
    pub priorities: Vec<f64>,
    /// Index into `candidates` of the chosen passage.
    pub chosen: usize,
    pub log_prob: f64,
}

/// Source of per-passage layer steps and probabilities.
pub trait LayerStepper {
    fn num_passages(&self) -> usize;
    fn num_layers(&self) -> usize;
    /// Probability at layer 0.
    fn initial_prob(&self, rank: usize) -> f64;
    /// Runs one more layer for `rank` and returns its new probability.
    fn advance(&mut self, rank: usize) -> Result<f64>;
}

/// Steps the real encoder, holding each passage's current hidden state.
pub struct LiveStepper<'a, A: Answerability> {
    encoder: &'a EncoderModel,
    has_answer: &'a A,
    hidden: Vec<HiddenState>,
    probs: Vec<f64>,
}

impl<'a, A: Answerability> LiveStepper<'a, A> {
    pub fn new(instance: &QuestionInstance, encoder: &'a EncoderModel, has_answer: &'a A) -> Result<Self> {
        let mut hidden = Vec::with_capacity(instance.num_passages());
        let mut probs = Vec::with_capacity(instance.num_passages());
        for p in &instance.passages {
            let h = encoder.embed(p.rank, &instance.question, &p.tokens)?;
            probs.push(has_answer.prob(&h));
            hidden.push(h);
        }
        Ok(LiveStepper {
            encoder,
            has_answer,
            hidden,
            probs,
        })
    }

    pub fn into_hidden(self) -> Vec<HiddenState> {
        self.hidden
    }
}

impl<A: Answerability> LayerStepper for LiveStepper<'_, A> {
    fn num_passages(&self) -> usize {
        self.hidden.len()
    }

    fn num_layers(&self) -> usize {
        self.encoder.num_layers()
    }

    fn initial_prob(&self, rank: usize) -> f64 {
        self.probs[rank]
    }

    fn advance(&mut self, rank: usize) -> Result<f64> {
        let next = self.encoder.forward_layer(&self.hidden[rank])?;
        let p = self.has_answer.prob(&next);
        self.hidden[rank] = next;
        Ok(p)
    }
}

/// Precomputed `p_n^l` for every passage and layer. With a frozen encoder
/// and answerability head this yields the same episode as [`LiveStepper`].
#[derive(Clone, Debug, PartialEq)]
pub struct ProbTable {
    /// `probs[n][l]`, `l ∈ 0..=L`.
    pub probs: Vec<Vec<f64>>,
    layers: Vec<usize>,
}

impl ProbTable {
    pub fn build<A: Answerability>(instance: &QuestionInstance, encoder: &EncoderModel, has_answer: &A) -> Result<Self> {
        let mut probs = Vec::with_capacity(instance.num_passages());
        for p in &instance.passages {
            let mut h = encoder.embed(p.rank, &instance.question, &p.tokens)?;
            let mut row = vec![has_answer.prob(&h)];
            while h.layer_index < encoder.num_layers() {
                h = encoder.forward_layer(&h)?;
                row.push(has_answer.prob(&h));
            }
            probs.push(row);
        }
        Ok(ProbTable::from_probs(probs))
    }

    pub fn from_probs(probs: Vec<Vec<f64>>) -> Self {
        let n = probs.len();
        ProbTable {
            probs,
            layers: vec![0; n],
        }
    }

    /// Fresh cursor at layer 0 for every passage.
    pub fn reset(&mut self) {
        self.layers.iter_mut().for_each(|l| *l = 0);
    }
}

impl LayerStepper for ProbTable {
    fn num_passages(&self) -> usize {
        self.probs.len()
    }

    fn num_layers(&self) -> usize {
        self.probs.first().map_or(0, |r| r.len() - 1)
    }

    fn initial_prob(&self, rank: usize) -> f64 {
        self.probs[rank][0]
    }

    fn advance(&mut self, rank: usize) -> Result<f64> {
        let l = self.layers[rank];
        if l >= self.num_layers() {
            return Err(ApeError::AlreadyComplete {
                passage: rank,
                layers: self.num_layers(),
            });
        }
        self.layers[rank] = l + 1;
        Ok(self.probs[rank][l + 1])
    }
}

/// Result of one scheduling episode.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub trace: ScheduleTrace,
    pub states: Vec<PassageComputeState>,
    /// Filled only under the softmax policy.
    pub decisions: Vec<Decision>,
}

fn argmax_lowest_rank(states: &[PassageComputeState], key: impl Fn(&PassageComputeState) -> f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for s in states.iter().filter(|s| s.active) {
        let v = key(s);
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((s.rank, v));
        }
    }
    best.map(|(r, _)| r)
}

/// Retention order: more layers first, then higher `p`, then lower rank.
pub fn retain_top_k(states: &[PassageComputeState], k: usize) -> Vec<usize> {
    let mut order: Vec<&PassageComputeState> = states.iter().collect();
    order.sort_by(|a, b| {
        b.layer
            .cmp(&a.layer)
            .then(b.p.total_cmp(&a.p))
            .then(a.rank.cmp(&b.rank))
    });
    order.iter().take(k).map(|s| s.rank).collect()
}

/// Runs the selection loop against any [`LayerStepper`].
pub fn run_episode<S: LayerStepper>(
    stepper: &mut S,
    labels: &[bool],
    params: &SchedulerParams,
    cfg: &BudgetConfig,
    rng: &mut Rng,
) -> Result<Rollout> {
    let n = stepper.num_passages();
    let layers = stepper.num_layers();
    if labels.len() != n {
        return Err(ApeError::Argument(format!("{} labels for {n} passages", labels.len())));
    }
    if cfg.k == 0 || cfg.k > n {
        return Err(ApeError::Argument(format!("k must be in 1..={n}, got {}", cfg.k)));
    }
    if n > params.max_rank() {
        return Err(ApeError::Config(format!(
            "{n} passages but the rank embedding covers {}",
            params.max_rank()
        )));
    }
    if layers != params.num_layers() {
        return Err(ApeError::Config(format!(
            "encoder has {layers} layers, scheduler params expect {}",
            params.num_layers()
        )));
    }

    let mut states = Vec::with_capacity(n);
    for rank in 0..n {
        let p = stepper.initial_prob(rank);
        states.push(PassageComputeState {
            rank,
            layer: 0,
            p,
            q: params.priority(p, rank, 0)?,
            active: layers > 0,
        });
    }

    let mut steps = Vec::new();
    let mut decisions = Vec::new();
    let mut cursor = 0usize;
    for t in 1..=cfg.budget {
        if !states.iter().any(|s| s.active) {
            break;
        }
        let chosen = match cfg.policy {
            Policy::Argmax => argmax_lowest_rank(&states, |s| s.q),
            Policy::GreedyP => argmax_lowest_rank(&states, |s| s.p),
            Policy::StaticTopK => states.iter().find(|s| s.active).map(|s| s.rank),
            Policy::RoundRobin => {
                let pick = (0..n).map(|i| (cursor + i) % n).find(|&r| states[r].active);
                if let Some(r) = pick {
                    cursor = (r + 1) % n;
                }
                pick
            }
            Policy::Softmax { tau } => {
                let active: Vec<&PassageComputeState> = states.iter().filter(|s| s.active).collect();
                let priorities: Vec<f64> = active.iter().map(|s| s.q).collect();
                let probs = softmax(&priorities, tau)?;
                let idx = rng.categorical(&probs)?;
                let log_prob = priorities[idx] / tau - log_sum_exp(&priorities, tau);
                decisions.push(Decision {
                    candidates: active.iter().map(|s| (s.rank, s.layer, s.p)).collect(),
                    priorities,
                    chosen: idx,
                    log_prob,
                });
                Some(active[idx].rank)
            }
        }
        .expect("an active passage exists");

        let p = stepper.advance(chosen)?;
        let st = &mut states[chosen];
        st.layer += 1;
        st.p = p;
        st.q = params.priority(p, chosen, st.layer)?;
        st.active = st.layer < layers;
        steps.push(ScheduleStep {
            t,
            rank: chosen,
            layer: st.layer,
            p,
            q: st.q,
            reward: step_reward(labels[chosen], cfg.step_cost),
        });
    }

    let retained = retain_top_k(&states, cfg.k);
    Ok(Rollout {
        trace: ScheduleTrace {
            budget_used: steps.len(),
            steps,
            retained,
        },
        states,
        decisions,
    })
}

/// Output of [`schedule`].
#[derive(Clone, Debug)]
pub struct ScheduleOutcome {
    /// Hidden states of the retained passages, in retention order.
    pub retained: Vec<HiddenState>,
    pub trace: ScheduleTrace,
    pub states: Vec<PassageComputeState>,
}

/// Schedules encoder layers for one question with the live encoder.
pub fn schedule<A: Answerability>(
    instance: &QuestionInstance,
    encoder: &EncoderModel,
    has_answer: &A,
    params: &SchedulerParams,
    cfg: &BudgetConfig,
    rng: &mut Rng,
) -> Result<ScheduleOutcome> {
    let mut stepper = LiveStepper::new(instance, encoder, has_answer)?;
    let rollout = run_episode(&mut stepper, &instance.labels(), params, cfg, rng)?;
    let mut hidden: Vec<Option<HiddenState>> = stepper.into_hidden().into_iter().map(Some).collect();
    let retained = rollout
        .trace
        .retained
        .iter()
        .map(|&r| hidden[r].take().expect("retained ranks are distinct"))
        .collect();
    Ok(ScheduleOutcome {
        retained,
        trace: rollout.trace,
        states: rollout.states,
    })
}
