use crate::answerability::{bce_loss, HasAnswerModel, Pooling};
use crate::error::Result;
use crate::numerics::mlp::Mlp;
use crate::numerics::{Parameterized, Rng};
use crate::policy_training::{accumulate_log_policy_grad, log_policy};
use crate::scheduler::{Decision, SchedulerParams};

pub const FD_EPS: f64 = 1e-6;
pub const REL_TOLERANCE: f64 = 1e-4;
/// Denominator floor for the relative error. Entries whose gradient is
/// exactly zero (shifts that cancel inside a softmax) leave only the
/// roundoff of the difference quotient, around `1e-16 / eps`.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameter with the largest relative error, as `name[index]`.
    pub worst: String,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < REL_TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the gradient written by `analytic` against central
/// differences of `loss` for every parameter of `model`.
pub fn check_gradients<M: Parameterized + Clone>(
    model: &M,
    loss: impl Fn(&M) -> Result<f64>,
    analytic: impl Fn(&mut M) -> Result<()>,
    eps: f64,
) -> Result<GradCheck> {
    let mut with_grad = model.clone();
    with_grad.zero_grad();
    analytic(&mut with_grad)?;
    let grads: Vec<Vec<f64>> = with_grad.blocks().iter().map(|b| b.grad.data().to_vec()).collect();
    let names: Vec<String> = model.blocks().iter().map(|b| b.name.clone()).collect();

    let mut probe = model.clone();
    let mut out = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        worst: String::new(),
    };
    for (bi, g) in grads.iter().enumerate() {
        for (i, &a) in g.iter().enumerate() {
            let orig = probe.blocks()[bi].value.data()[i];
            probe.blocks_mut()[bi].value.data_mut()[i] = orig + eps;
            let up = loss(&probe)?;
            probe.blocks_mut()[bi].value.data_mut()[i] = orig - eps;
            let down = loss(&probe)?;
            probe.blocks_mut()[bi].value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = relative_error(a, numeric);
            out.checked += 1;
            if err > out.max_rel_error || out.worst.is_empty() {
                out.max_rel_error = err;
                out.worst = format!("{}[{i}]", names[bi]);
            }
        }
    }
    Ok(out)
}

fn randomize(mlp: &mut Mlp, rng: &mut Rng, std: f64) {
    for b in mlp.blocks_mut() {
        for v in b.value.data_mut() {
            *v = std * rng.normal();
        }
    }
}

/// Mean BCE of a randomly sized HasAnswer head on random pooled inputs.
pub fn gradcheck_has_answer(seed: u64) -> Result<GradCheck> {
    let mut rng = Rng::derive(seed, 0x6c);
    let dim = 2 + rng.below(7);
    let hidden = 2 + rng.below(9);
    let mut model = HasAnswerModel::zeros(dim, hidden, Pooling::Max);
    randomize(&mut model.mlp, &mut rng, 0.8);
    let examples: Vec<(Vec<f64>, bool)> = (0..1 + rng.below(6))
        .map(|_| ((0..dim).map(|_| rng.normal()).collect(), rng.bernoulli(0.5)))
        .collect();
    let scale = 1.0 / examples.len() as f64;
    check_gradients(
        &model,
        |m| {
            Ok(examples
                .iter()
                .map(|(z, y)| bce_loss(m.prob_pooled(z), *y))
                .sum::<f64>()
                * scale)
        },
        |m| {
            for (z, y) in &examples {
                m.accumulate_pooled(z, *y, scale);
            }
            Ok(())
        },
        FD_EPS,
    )
}

/// Weighted sum of `log pi(a_t | candidates_t)` over up to three random
/// decisions with up to four candidates each.
pub fn gradcheck_log_policy(seed: u64) -> Result<GradCheck> {
    let mut rng = Rng::derive(seed, 0x10f);
    let max_rank = 4;
    let layers = 1 + rng.below(3);
    let embed = 2 + rng.below(3);
    let hidden = 2 + rng.below(6);
    let mut params = SchedulerParams::zeros(max_rank, layers, hidden, embed);
    for b in [&mut params.rank_embedding, &mut params.layer_embedding] {
        for v in b.value.data_mut() {
            *v = rng.normal();
        }
    }
    randomize(&mut params.g, &mut rng, 0.7);
    randomize(&mut params.f, &mut rng, 0.7);
    let tau = 0.25 + 1.5 * rng.uniform();
    let decisions: Vec<(Decision, f64)> = (0..1 + rng.below(3))
        .map(|_| {
            let n = 2 + rng.below(max_rank - 1);
            let candidates: Vec<(usize, usize, f64)> = (0..n)
                .map(|r| (r, rng.below(layers + 1), 0.02 + 0.96 * rng.uniform()))
                .collect();
            let chosen = rng.below(n);
            let weight = rng.normal();
            (
                Decision {
                    candidates,
                    priorities: Vec::new(),
                    chosen,
                    log_prob: 0.0,
                },
                weight,
            )
        })
        .collect();
    check_gradients(
        &params,
        |p| {
            decisions
                .iter()
                .map(|(d, w)| log_policy(p, d, tau).map(|lp| w * lp))
                .sum()
        },
        |p| {
            for (d, w) in &decisions {
                accumulate_log_policy_grad(p, d, tau, *w)?;
            }
            Ok(())
        },
        FD_EPS,
    )
}
