//! Dense float64 arithmetic, seeded randomness, parameter storage and
//! checkpoint serialization shared by every other module.

pub mod adam;
pub mod checkpoint;
pub mod mlp;
pub mod param;
pub mod rng;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use param::{ParamBlock, Parameterized};
pub use rng::Rng;
pub use tensor::Tensor2;

use crate::error::{ApeError, Result};

/// Logistic function, evaluated on the branch that avoids overflow.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Temperature softmax with max-shift.
pub fn softmax(scores: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(ApeError::Argument("softmax of empty scores".into()));
    }
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(ApeError::Argument(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| ((s - max) / temperature).exp()).collect();
    let total = exps.iter().fold(0.0, |acc, e| acc + e);
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `log sum_i exp(scores_i / temperature)`, max-shifted.
pub fn log_sum_exp(scores: &[f64], temperature: f64) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total = scores
        .iter()
        .fold(0.0, |acc, s| acc + ((s - max) / temperature).exp());
    max / temperature + total.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_reference_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(2.0) - 0.8807970779778823).abs() < 1e-16);
        let tiny = sigmoid(-700.0);
        assert!(tiny > 0.0 && tiny < 1e-300);
        assert!(sigmoid(700.0) <= 1.0);
    }

    #[test]
    fn sigmoid_symmetry() {
        let mut x = -30.0;
        while x <= 30.0 {
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() <= 1e-15, "{x}");
            x += 0.37;
        }
    }

    #[test]
    fn softmax_uniform_on_equal_scores() {
        for tau in [0.1, 1.0, 7.0] {
            let p = softmax(&[2.5, 2.5, 2.5], tau).unwrap();
            for v in p {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn softmax_two_way() {
        let p = softmax(&[1.0, 0.0], 1.0).unwrap();
        assert!((p[0] - 0.7310585786300049).abs() < 1e-12);
        assert!((p[1] - 0.2689414213699951).abs() < 1e-12);
    }

    #[test]
    fn softmax_large_scores_stable() {
        let p = softmax(&[1000.0, 0.0], 1.0).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-15);
        assert!(p[1] >= 0.0 && p[1] < 1e-300);
        assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(softmax(&[], 1.0).is_err());
        assert!(softmax(&[1.0], 0.0).is_err());
        assert!(softmax(&[1.0], -1.0).is_err());
    }

    #[test]
    fn log_sum_exp_matches_direct() {
        let s = [0.3, -1.2, 2.0];
        let direct = s.iter().map(|x: &f64| (x / 0.5).exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&s, 0.5) - direct).abs() < 1e-12);
    }
}
