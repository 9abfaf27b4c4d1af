use ape_core::answerability::{HasAnswerModel, Pooling};
use ape_core::datagen::{generate, GenConfig};
use ape_core::encoder::{EncoderConfig, EncoderModel};
use ape_core::harness::metrics::median;
use ape_core::numerics::{checkpoint, sigmoid, Parameterized, Rng};
use ape_core::policy_training::{
    accumulate_log_policy_grad, evaluate_mean_return, log_policy, returns, sample_episode, train_on_tables,
    train_scheduler, RLConfig,
};
use ape_core::scheduler::{run_episode, BudgetConfig, Decision, Policy, ProbTable, SchedulerParams};
use proptest::prelude::*;

proptest! {
    #[test]
    fn returns_are_linear_in_rewards(
        rewards in prop::collection::vec(-1.0f64..1.0, 0..40),
        a in -3.0f64..3.0,
        gamma in 0.0f64..=1.0,
    ) {
        let scaled: Vec<f64> = rewards.iter().map(|r| a * r).collect();
        let lhs = returns(&scaled, gamma);
        let rhs = returns(&rewards, gamma);
        prop_assert_eq!(lhs.len(), rewards.len());
        for (x, y) in lhs.iter().zip(&rhs) {
            prop_assert!((x - a * y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn myopic_returns_equal_rewards(rewards in prop::collection::vec(-1.0f64..1.0, 0..40)) {
        prop_assert_eq!(returns(&rewards, 0.0), rewards);
    }
}

#[test]
fn hand_summed_return() {
    let g = returns(&[0.9, -0.1, 0.9], 0.8);
    assert!((g[0] - 1.396).abs() < 1e-12);
    assert!((g[1] - (-0.1 + 0.8 * 0.9)).abs() < 1e-12);
    assert_eq!(returns(&[0.0; 5], 0.8), vec![0.0; 5]);
}

#[test]
fn two_candidate_log_policy_gradient_by_hand() {
    // zero params: q_i = p_i / 2 and dq_i/d(g output bias) = sigma'(0) p_i = p_i / 4
    let mut params = SchedulerParams::zeros(2, 1, 4, 2);
    let d = Decision {
        candidates: vec![(0, 0, 0.8), (1, 0, 0.2)],
        priorities: vec![0.4, 0.1],
        chosen: 0,
        log_prob: 0.0,
    };
    let pi0 = sigmoid(0.3);
    assert!((log_policy(&params, &d, 1.0).unwrap() - pi0.ln()).abs() < 1e-14);
    accumulate_log_policy_grad(&mut params, &d, 1.0, 1.0).unwrap();
    let grad_of = |name: &str| {
        params
            .blocks()
            .into_iter()
            .find(|b| b.name == name)
            .unwrap_or_else(|| panic!("no block {name}"))
            .grad
            .data()[0]
    };
    let expected = 0.25 * (0.8 - (pi0 * 0.8 + (1.0 - pi0) * 0.2));
    assert!((grad_of("scheduler.g.b2") - expected).abs() < 1e-14);
    // a shared shift of every priority leaves the softmax unchanged
    assert!(grad_of("scheduler.f.b2").abs() < 1e-14);

    // central differences on the same bias
    let eps = 1e-6;
    let bump = |delta: f64| {
        let mut p = SchedulerParams::zeros(2, 1, 4, 2);
        let blocks = p.blocks_mut();
        let b = blocks.into_iter().find(|b| b.name == "scheduler.g.b2").unwrap();
        b.value.data_mut()[0] = delta;
        log_policy(&p, &d, 1.0).unwrap()
    };
    let numeric = (bump(eps) - bump(-eps)) / (2.0 * eps);
    assert!((numeric - expected).abs() / expected.abs() < 1e-4);
}

#[test]
fn low_temperature_concentrates_on_argmax() {
    let probs = vec![vec![0.40, 0.5], vec![0.52, 0.5], vec![0.47, 0.5], vec![0.50, 0.5]];
    let params = SchedulerParams::zeros(4, 1, 4, 2);
    let cfg = BudgetConfig {
        budget: 1,
        k: 1,
        policy: Policy::Softmax { tau: 1e-3 },
        step_cost: 0.1,
    };
    let mut rng = Rng::seeded(17);
    let trials = 20_000;
    let mut hits = 0;
    for _ in 0..trials {
        let mut table = ProbTable::from_probs(probs.clone());
        let out = run_episode(&mut table, &[false; 4], &params, &cfg, &mut rng).unwrap();
        if out.trace.steps[0].rank == 1 {
            hits += 1;
        }
    }
    assert!(hits as f64 / trials as f64 > 0.999, "{hits}/{trials}");
}

/// Relevant passages have *lower* p than irrelevant ones, so greedy-on-p
/// is the worst policy and the scheduler has to learn to invert it.
fn inverted_tables(count: usize, seed: u64) -> (Vec<ProbTable>, Vec<Vec<bool>>) {
    let mut rng = Rng::seeded(seed);
    let (n, layers) = (8, 3);
    let mut tables = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..count {
        let lab: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.25)).collect();
        let probs = lab
            .iter()
            .map(|&y| {
                let base = if y { 0.3 } else { 0.6 };
                (0..=layers).map(|_| base + 0.05 * rng.normal()).collect()
            })
            .collect();
        tables.push(ProbTable::from_probs(probs));
        labels.push(lab);
    }
    (tables, labels)
}

fn toy_rl() -> RLConfig {
    RLConfig {
        max_steps: 24,
        ..RLConfig::default()
    }
}

#[test]
fn training_improves_held_out_return() {
    let (tables, labels) = inverted_tables(1200, 1);
    let init = SchedulerParams::init(8, 3, 32, 8, &mut Rng::seeded(3));
    let rl = toy_rl();
    let (train_t, test_t) = tables.split_at(900);
    let (train_l, test_l) = labels.split_at(900);
    let mut before = Vec::new();
    let mut after = Vec::new();
    for seed in 0..3 {
        let (params, _) = train_on_tables(train_t, train_l, init.clone(), &rl, seed).unwrap();
        for (out, p) in [(&mut before, &init), (&mut after, &params)] {
            out.push(evaluate_mean_return(test_t, test_l, p, &rl, Policy::Argmax, seed).unwrap());
        }
    }
    for (b, a) in before.iter().zip(&after) {
        assert!(a > b, "before {before:?} after {after:?}");
    }
}

#[test]
fn smoothed_learning_curve_rises() {
    let (tables, labels) = inverted_tables(2400, 2);
    let init = SchedulerParams::init(8, 3, 32, 8, &mut Rng::seeded(4));
    let rl = toy_rl();
    let window = 25;
    let curves: Vec<Vec<f64>> = (0..3)
        .map(|seed| {
            let (_, curve) = train_on_tables(&tables, &labels, init.clone(), &rl, seed).unwrap();
            curve.smoothed_returns(window)
        })
        .collect();
    let len = curves[0].len();
    let med: Vec<f64> = (0..len).map(|i| median(&curves.iter().map(|c| c[i]).collect::<Vec<_>>())).collect();
    // compare non-overlapping windows of the smoothed median curve
    let points: Vec<f64> = (window - 1..len).step_by(window).map(|i| med[i]).collect();
    assert!(points.len() >= 3);
    for w in points.windows(2) {
        assert!(w[1] >= w[0], "{points:?}");
    }
}

#[test]
fn full_step_cost_gives_non_positive_returns() {
    let (tables, labels) = inverted_tables(30, 5);
    let params = SchedulerParams::init(8, 3, 16, 4, &mut Rng::seeded(1));
    let rl = RLConfig {
        step_cost: 1.0,
        ..toy_rl()
    };
    let mut rng = Rng::seeded(2);
    for (t, l) in tables.iter().zip(&labels) {
        let ep = sample_episode(t, l, &params, &rl, &mut rng).unwrap();
        let rewards = ep.rollout.trace.rewards();
        assert_eq!(rewards.len(), 24);
        assert!(rewards.iter().all(|&r| r <= 0.0));
        let g = returns(&rewards, rl.gamma);
        assert!(g.iter().all(|&x| x <= 0.0));
        let irrelevant = ep.rollout.trace.steps.iter().filter(|s| !l[s.rank]).count();
        assert_eq!(-rewards.iter().sum::<f64>(), irrelevant as f64);
    }
}

#[test]
fn encoder_and_head_unchanged_by_training() {
    let encoder = EncoderModel::new(EncoderConfig {
        num_layers: 3,
        model_dim: 16,
        num_heads: 2,
        ffn_dim: 24,
        ..EncoderConfig::default()
    })
    .unwrap();
    let head = HasAnswerModel::new(16, 8, Pooling::Max, &mut Rng::seeded(0));
    let data = generate(&GenConfig {
        num_questions: 48,
        num_passages: 6,
        passage_len: 12,
        max_copies: 4,
        ..GenConfig::default()
    })
    .unwrap();
    let before = (encoder.digest(), checkpoint::digest(&head));
    let init = SchedulerParams::init(6, 3, 16, 4, &mut Rng::seeded(0));
    let init_fp = init.fingerprint();
    let (params, curve) = train_scheduler(&data, &encoder, &head, init, &toy_rl(), 0).unwrap();
    assert_eq!(before, (encoder.digest(), checkpoint::digest(&head)));
    assert_eq!(curve.batches.len(), 2);
    assert_ne!(params.fingerprint(), init_fp);
}
