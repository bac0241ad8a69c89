use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
}

impl Activation {
    #[inline]
    pub fn apply_scalar(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(slope) => (slope * x).max(x),
        }
    }

    /// Derivative; the subgradient at exactly 0 is 0 for ReLU and `slope` for leaky ReLU.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
        }
    }

    pub fn forward(self, input: &Tensor) -> Tensor {
        input.map(|v| self.apply_scalar(v))
    }

    /// `grad_out ⊙ act'(input)` where `input` is the pre-activation.
    pub fn backward(self, grad_out: &Tensor, input: &Tensor) -> Result<Tensor> {
        grad_out.zip_map(input, "activation_backward", |g, x| g * self.derivative(x))
    }
}
