use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// A trainable matrix and its accumulated gradient.
///
/// Vectors (biases, norm gains) are stored as `1 × n` matrices so that the
/// optimizer only ever deals with one shape kind.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Param {
    pub value: Array2<f64>,
    #[serde(skip)]
    pub grad: Array2<f64>,
}

impl Param {
    pub fn new(value: Array2<f64>) -> Self {
        let grad = Array2::zeros(value.raw_dim());
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        if self.grad.dim() != self.value.dim() {
            self.grad = Array2::zeros(self.value.raw_dim());
        } else {
            self.grad.fill(0.0);
        }
    }

    pub fn grad_norm_sq(&self) -> f64 {
        self.grad.iter().map(|g| g * g).sum()
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}
