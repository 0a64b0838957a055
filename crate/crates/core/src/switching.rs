//! Class switching: a classifier over pooled backbone tokens picks which
//! codebook group and which reconstruction expert handle an image.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{FeedForward, FeedForwardCache, Linear, Param, Rng};
use crate::TokenGrid;

/// Numerically stable softmax of one logit vector.
pub fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = logits.mapv(|v| (v - max).exp());
    let sum = e.sum();
    e / sum
}

/// Argmax with lowest-index tie-break.
pub fn select(p: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (j, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = j;
        }
    }
    best
}

/// Residual token-wise MLP `x + W₂ relu(W₁ x + b₁) + b₂`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Expert {
    pub mlp: FeedForward,
}

impl Expert {
    pub fn new(width: usize, hidden: usize, rng: &mut Rng) -> Self {
        Expert {
            mlp: FeedForward::new(width, hidden, rng),
        }
    }

    /// Expert whose output equals its input.
    pub fn identity(width: usize, hidden: usize, rng: &mut Rng) -> Self {
        let mut e = Self::new(width, hidden, rng);
        e.mlp.down = Linear::zeros(hidden, width);
        e
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, FeedForwardCache) {
        let (y, cache) = self.mlp.forward(x);
        (&x + &y, cache)
    }

    pub fn backward(&mut self, cache: &FeedForwardCache, dy: ArrayView2<f64>) -> Array2<f64> {
        &dy + &self.mlp.backward(cache, dy)
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.mlp.params_mut(out);
    }
}

/// Classifier `Ω` (pooled `C`-vector → `M` logits) plus `M` experts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Switch {
    pub classifier: Linear,
    pub experts: Vec<Expert>,
}

impl Switch {
    pub fn new(
        width: usize,
        classes: usize,
        experts: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if classes == 0 || experts == 0 {
            return Err(Error::config(
                "switch needs at least one class and one expert",
            ));
        }
        Ok(Switch {
            classifier: Linear::new(width, classes, rng),
            experts: (0..experts)
                .map(|_| Expert::new(width, hidden, rng))
                .collect(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classifier.out_dim()
    }

    /// Mean over each image's `n` tokens: `B × C`.
    pub fn pool(h0: ArrayView2<f64>, n: usize) -> Array2<f64> {
        let batch = h0.nrows() / n;
        let mut pooled = Array2::zeros((batch, h0.ncols()));
        for b in 0..batch {
            let mean = h0
                .slice(s![b * n..(b + 1) * n, ..])
                .mean_axis(Axis(0))
                .expect("non-empty block");
            pooled.row_mut(b).assign(&mean);
        }
        pooled
    }

    pub fn logits(&self, pooled: ArrayView2<f64>) -> Array2<f64> {
        self.classifier.forward(pooled)
    }

    /// Class probabilities for one image.
    pub fn classify(&self, h0: &TokenGrid) -> Result<Array1<f64>> {
        if h0.ncols() != self.classifier.in_dim() || h0.nrows() == 0 {
            return Err(Error::config("classifier input width mismatch"));
        }
        let pooled = Self::pool(h0.view(), h0.nrows());
        Ok(softmax(self.logits(pooled.view()).row(0)))
    }

    /// Applies expert `m` only.
    pub fn reconstruct(&self, d0: &TokenGrid, m: usize) -> Result<TokenGrid> {
        let expert = self
            .experts
            .get(m)
            .ok_or_else(|| Error::internal(format!("expert {m} out of range")))?;
        Ok(expert.forward(d0.view()).0)
    }

    /// Cross-entropy gradient step for the classifier: accumulates
    /// `pooledᵀ (p − onehot) · scale`.
    pub(crate) fn classifier_backward(
        &mut self,
        pooled: ArrayView2<f64>,
        dlogits: ArrayView2<f64>,
    ) {
        self.classifier.backward(pooled, dlogits);
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.classifier.params_mut(out);
        for e in &mut self.experts {
            e.params_mut(out);
        }
    }
}
