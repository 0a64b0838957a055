use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Param, Rng};

/// Affine map `y = x W + b` applied row-wise (`W` is `in × out`).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn new(input: usize, output: usize, rng: &mut Rng) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        let w = Array2::from_shape_simple_fn((input, output), || rng.random_range(-bound..bound));
        Self::from_parts(w, Array1::zeros(output))
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self::from_parts(Array2::zeros((input, output)), Array1::zeros(output))
    }

    pub fn identity(width: usize) -> Self {
        Self::from_parts(Array2::eye(width), Array1::zeros(width))
    }

    pub fn from_parts(weight: Array2<f64>, bias: Array1<f64>) -> Self {
        assert_eq!(
            weight.ncols(),
            bias.len(),
            "bias width must match weight columns"
        );
        let bias = bias.insert_axis(Axis(0));
        Linear {
            weight: Param::new(weight),
            bias: Param::new(bias),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight.value);
        y += &self.bias.value.row(0);
        y
    }

    pub fn backward(&mut self, x: ArrayView2<f64>, dy: ArrayView2<f64>) -> Array2<f64> {
        general_mat_mul(1.0, &x.t(), &dy, 1.0, &mut self.weight.grad);
        let mut db = self.bias.grad.row_mut(0);
        db += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.value.t())
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}
