use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{Linear, Param, Rng};

/// Token-wise two-layer perceptron with ReLU.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

#[derive(Clone, Debug)]
pub struct FeedForwardCache {
    x: Array2<f64>,
    hidden: Array2<f64>,
}

impl FeedForward {
    pub fn new(width: usize, hidden: usize, rng: &mut Rng) -> Self {
        FeedForward {
            up: Linear::new(width, hidden, rng),
            down: Linear::new(hidden, width, rng),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, FeedForwardCache) {
        let mut hidden = self.up.forward(x);
        hidden.mapv_inplace(|v| v.max(0.0));
        let y = self.down.forward(hidden.view());
        (
            y,
            FeedForwardCache {
                x: x.to_owned(),
                hidden,
            },
        )
    }

    pub fn backward(&mut self, cache: &FeedForwardCache, dy: ArrayView2<f64>) -> Array2<f64> {
        let mut dh = self.down.backward(cache.hidden.view(), dy);
        dh.zip_mut_with(&cache.hidden, |g, &h| {
            if h <= 0.0 {
                *g = 0.0;
            }
        });
        self.up.backward(cache.x.view(), dh.view())
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.up.params_mut(out);
        self.down.params_mut(out);
    }
}
