use super::param::Parameterized;
use super::tensor::Tensor2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
        }
    }
}

/// Adam with bias correction. Moment buffers are created lazily on the
/// first step and follow the model's block order.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    first: Vec<Tensor2>,
    second: Vec<Tensor2>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            t: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one descent step using the gradients currently stored in
    /// `model`.
    pub fn step<M: Parameterized + ?Sized>(&mut self, model: &mut M) {
        let mut blocks = model.blocks_mut();
        if self.first.is_empty() {
            self.first = blocks
                .iter()
                .map(|b| Tensor2::zeros(b.value.rows(), b.value.cols()))
                .collect();
            self.second = self.first.clone();
        }
        self.t += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for ((block, m), v) in blocks
            .iter_mut()
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            let grad = block.grad.data().to_vec();
            let values = block.value.data_mut();
            for (i, g) in grad.into_iter().enumerate() {
                let mi = beta1 * m.data()[i] + (1.0 - beta1) * g;
                let vi = beta2 * v.data()[i] + (1.0 - beta2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                values[i] -= learning_rate * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::param::ParamBlock;

    struct One(ParamBlock);

    impl Parameterized for One {
        fn blocks(&self) -> Vec<&ParamBlock> {
            vec![&self.0]
        }
        fn blocks_mut(&mut self) -> Vec<&mut ParamBlock> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = One(ParamBlock::new(
            "w",
            Tensor2::from_vec(1, 2, vec![1.0, -1.0]).unwrap(),
        ));
        p.0.grad = Tensor2::from_vec(1, 2, vec![3.0, -0.5]).unwrap();
        let mut adam = Adam::new(AdamConfig {
            learning_rate: 0.1,
            eps: 0.0,
            ..AdamConfig::default()
        });
        adam.step(&mut p);
        let v = p.0.value.data();
        assert!((v[0] - 0.9).abs() < 1e-12);
        assert!((v[1] + 0.9).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = One(ParamBlock::new(
            "w",
            Tensor2::from_vec(1, 3, vec![0.25, 1.5, -2.0]).unwrap(),
        ));
        let before = p.0.value.clone();
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut p);
        }
        assert_eq!(p.0.value, before);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = One(ParamBlock::new("w", Tensor2::from_vec(1, 1, vec![5.0]).unwrap()));
        let mut adam = Adam::new(AdamConfig {
            learning_rate: 0.05,
            ..AdamConfig::default()
        });
        for _ in 0..2000 {
            let x = p.0.value.data()[0];
            p.0.grad.data_mut()[0] = 2.0 * (x - 1.0);
            adam.step(&mut p);
        }
        assert!((p.0.value.data()[0] - 1.0).abs() < 1e-3);
    }
}
