use ndarray::Array2;
use rand::Rng as _;

use super::Rng;

/// Forward-pass context: train mode carries a generator for dropout masks,
/// eval mode carries none and dropout becomes the identity.
pub struct Ctx {
    pub dropout: f64,
    rng: Option<Rng>,
}

impl Ctx {
    pub fn eval() -> Self {
        Ctx {
            dropout: 0.0,
            rng: None,
        }
    }

    pub fn train(dropout: f64, rng: Rng) -> Self {
        Ctx {
            dropout,
            rng: Some(rng),
        }
    }

    pub fn is_train(&self) -> bool {
        self.rng.is_some()
    }

    /// Inverted dropout; returns the scaled keep-mask when one was applied.
    pub fn dropout(&mut self, x: Array2<f64>) -> (Array2<f64>, Option<Array2<f64>>) {
        let p = self.dropout;
        match self.rng.as_mut() {
            Some(rng) if p > 0.0 => {
                let scale = 1.0 / (1.0 - p);
                let mask = Array2::from_shape_simple_fn(x.raw_dim(), || {
                    if rng.random::<f64>() < p {
                        0.0
                    } else {
                        scale
                    }
                });
                (x * &mask, Some(mask))
            }
            _ => (x, None),
        }
    }
}

pub(crate) fn dropout_backward(dy: &Array2<f64>, mask: &Option<Array2<f64>>) -> Array2<f64> {
    match mask {
        Some(m) => dy * m,
        None => dy.clone(),
    }
}
