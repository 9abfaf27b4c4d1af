use super::tensor::Tensor2;

/// A named trainable tensor with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub value: Tensor2,
    pub grad: Tensor2,
}

impl ParamBlock {
    pub fn new(name: impl Into<String>, value: Tensor2) -> Self {
        let grad = Tensor2::zeros(value.rows(), value.cols());
        ParamBlock {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        ParamBlock::new(name, Tensor2::zeros(rows, cols))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn numel(&self) -> usize {
        self.value.data().len()
    }
}

/// Anything that owns an ordered list of parameter blocks.
///
/// Block order is part of the checkpoint layout and of optimizer state, so
/// implementations must always return blocks in the same order.
pub trait Parameterized {
    fn blocks(&self) -> Vec<&ParamBlock>;
    fn blocks_mut(&mut self) -> Vec<&mut ParamBlock>;

    fn zero_grad(&mut self) {
        for b in self.blocks_mut() {
            b.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.numel()).sum()
    }

    fn grad_norm(&self) -> f64 {
        self.blocks()
            .iter()
            .fold(0.0, |acc, b| acc + b.grad.sq_norm())
            .sqrt()
    }

    fn param_norm(&self) -> f64 {
        self.blocks()
            .iter()
            .fold(0.0, |acc, b| acc + b.value.sq_norm())
            .sqrt()
    }
}
