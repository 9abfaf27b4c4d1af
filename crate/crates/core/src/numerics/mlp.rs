use super::param::ParamBlock;
use super::tensor::vecmat;
use super::{relu, Rng};

/// Two-layer perceptron `in -> hidden (ReLU) -> 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub w1: ParamBlock,
    pub b1: ParamBlock,
    pub w2: ParamBlock,
    pub b2: ParamBlock,
}

/// Intermediate values kept from the forward pass for backprop.
#[derive(Clone, Debug)]
pub struct MlpCache {
    pub pre: Vec<f64>,
    pub hidden: Vec<f64>,
    pub out: f64,
}

impl Mlp {
    pub fn zeros(prefix: &str, input: usize, hidden: usize) -> Self {
        Mlp {
            w1: ParamBlock::zeros(format!("{prefix}.w1"), input, hidden),
            b1: ParamBlock::zeros(format!("{prefix}.b1"), 1, hidden),
            w2: ParamBlock::zeros(format!("{prefix}.w2"), hidden, 1),
            b2: ParamBlock::zeros(format!("{prefix}.b2"), 1, 1),
        }
    }

    /// He-normal first layer; output weights normal with `out_std`
    /// (zero gives an MLP that outputs exactly `0` at initialization).
    pub fn init(prefix: &str, input: usize, hidden: usize, out_std: f64, rng: &mut Rng) -> Self {
        let mut m = Mlp::zeros(prefix, input, hidden);
        let s = (2.0 / input as f64).sqrt();
        for v in m.w1.value.data_mut() {
            *v = s * rng.normal();
        }
        if out_std != 0.0 {
            for v in m.w2.value.data_mut() {
                *v = out_std * rng.normal();
            }
        }
        m
    }

    pub fn input_dim(&self) -> usize {
        self.w1.value.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.value.cols()
    }

    pub fn forward(&self, x: &[f64]) -> MlpCache {
        let mut pre = vecmat(x, &self.w1.value).expect("mlp input width");
        for (a, b) in pre.iter_mut().zip(self.b1.value.data()) {
            *a += b;
        }
        let hidden: Vec<f64> = pre.iter().map(|&a| relu(a)).collect();
        let out = hidden
            .iter()
            .zip(self.w2.value.data())
            .fold(0.0, |acc, (h, w)| acc + h * w)
            + self.b2.value.data()[0];
        MlpCache { pre, hidden, out }
    }

    /// Adds `d_out * d(out)/dθ` to the gradients and returns `d(out)/dx`
    /// scaled by `d_out`.
    pub fn backward(&mut self, x: &[f64], cache: &MlpCache, d_out: f64) -> Vec<f64> {
        let h = self.hidden_dim();
        let mut dpre = vec![0.0; h];
        {
            let w2 = self.w2.value.data();
            let gw2 = self.w2.grad.data_mut();
            for i in 0..h {
                gw2[i] += cache.hidden[i] * d_out;
                if cache.pre[i] > 0.0 {
                    dpre[i] = w2[i] * d_out;
                }
            }
        }
        self.b2.grad.data_mut()[0] += d_out;
        for (g, d) in self.b1.grad.data_mut().iter_mut().zip(&dpre) {
            *g += d;
        }
        let mut dx = vec![0.0; x.len()];
        for (r, &xr) in x.iter().enumerate() {
            let w_row = self.w1.value.row(r);
            let g_row = self.w1.grad.row_mut(r);
            let mut acc = 0.0;
            for i in 0..h {
                g_row[i] += xr * dpre[i];
                acc += w_row[i] * dpre[i];
            }
            dx[r] = acc;
        }
        dx
    }

    pub fn blocks(&self) -> [&ParamBlock; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn blocks_mut(&mut self) -> [&mut ParamBlock; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}
