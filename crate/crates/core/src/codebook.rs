//! Prototype codebooks: nearest-prototype quantization, EMA re-estimation
//! and collapse diagnostics.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Rng;

/// Default EMA decay.
pub const DEFAULT_DECAY: f64 = 0.99;
/// Default additive (Laplace) smoothing of EMA cluster sizes.
pub const DEFAULT_LAPLACE_EPS: f64 = 1e-5;

/// `K` prototypes of width `C` for one (class, layer) pair, plus the EMA
/// accumulators that re-estimate them.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Codebook {
    entries: Array2<f64>,
    ema_cluster_size: Array1<f64>,
    ema_embed_sum: Array2<f64>,
    decay: f64,
    laplace_eps: f64,
    class_id: usize,
    layer_id: usize,
    initialized: bool,
    #[serde(skip)]
    pub(crate) grad: Array2<f64>,
}

/// Output of [`Codebook::quantize`].
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizationResult {
    /// Selected prototype per token (exact copies of codebook rows).
    pub quantized: Array2<f64>,
    pub indices: Vec<usize>,
    pub sq_distances: Array1<f64>,
}

/// Assignment-frequency diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UsageStats {
    pub perplexity: f64,
    pub dead_fraction: f64,
}

impl Codebook {
    /// Random Gaussian prototypes; replaced by data on the first call to
    /// [`Codebook::init_from_tokens`].
    pub fn new(
        k: usize,
        width: usize,
        class_id: usize,
        layer_id: usize,
        decay: f64,
        laplace_eps: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if k == 0 || width == 0 {
            return Err(Error::config("codebook needs K > 0 and C > 0"));
        }
        let entries = Array2::from_shape_simple_fn((k, width), || StandardNormal.sample(rng));
        let mut book = Self::with_state(
            entries.clone(),
            Array1::ones(k),
            entries,
            decay,
            laplace_eps,
        )?;
        book.class_id = class_id;
        book.layer_id = layer_id;
        book.initialized = false;
        Ok(book)
    }

    /// Builds a codebook from explicit EMA state. `entries` is taken as is;
    /// the accumulators only matter for subsequent updates.
    pub fn with_state(
        entries: Array2<f64>,
        ema_cluster_size: Array1<f64>,
        ema_embed_sum: Array2<f64>,
        decay: f64,
        laplace_eps: f64,
    ) -> Result<Self> {
        let k = entries.nrows();
        if k == 0 {
            return Err(Error::config("codebook must have at least one entry"));
        }
        if ema_cluster_size.len() != k || ema_embed_sum.dim() != entries.dim() {
            return Err(Error::config(
                "EMA accumulator shapes do not match the entries",
            ));
        }
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(Error::config(format!(
                "decay must lie in (0, 1], got {decay}"
            )));
        }
        if laplace_eps < 0.0 {
            return Err(Error::config("laplace_eps must be nonnegative"));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("codebook entries must be finite"));
        }
        if ema_cluster_size.iter().any(|&v| v < 0.0) {
            return Err(Error::input("EMA cluster sizes must be nonnegative"));
        }
        let grad = Array2::zeros(entries.raw_dim());
        Ok(Codebook {
            entries,
            ema_cluster_size,
            ema_embed_sum,
            decay,
            laplace_eps,
            class_id: 0,
            layer_id: 0,
            initialized: true,
            grad,
        })
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn ema_cluster_size(&self) -> &Array1<f64> {
        &self.ema_cluster_size
    }

    pub fn ema_embed_sum(&self) -> &Array2<f64> {
        &self.ema_embed_sum
    }

    pub fn size(&self) -> usize {
        self.entries.nrows()
    }

    pub fn width(&self) -> usize {
        self.entries.ncols()
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn laplace_eps(&self) -> f64 {
        self.laplace_eps
    }

    pub fn class_id(&self) -> usize {
        self.class_id
    }

    pub fn layer_id(&self) -> usize {
        self.layer_id
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Optimizer slot for gradient-trained codebooks.
    pub(crate) fn entries_and_grad(&mut self) -> (&mut Array2<f64>, &Array2<f64>) {
        (&mut self.entries, &self.grad)
    }

    pub(crate) fn zero_grad(&mut self) {
        if self.grad.dim() != self.entries.dim() {
            self.grad = Array2::zeros(self.entries.raw_dim());
        } else {
            self.grad.fill(0.0);
        }
    }

    /// Data-dependent initialization: `K` rows drawn from `tokens`, without
    /// replacement when there are enough of them.
    pub fn init_from_tokens(&mut self, tokens: ArrayView2<f64>, rng: &mut Rng) -> Result<()> {
        self.check_tokens(tokens)?;
        let (n, k) = (tokens.nrows(), self.size());
        if n == 0 {
            return Err(Error::input(
                "cannot initialize a codebook from zero tokens",
            ));
        }
        let picks: Vec<usize> = if n >= k {
            index::sample(rng, n, k).into_vec()
        } else {
            (0..k).map(|_| rng.random_range(0..n)).collect()
        };
        self.entries = tokens.select(Axis(0), &picks);
        self.ema_embed_sum = self.entries.clone();
        self.ema_cluster_size = Array1::ones(k);
        self.initialized = true;
        Ok(())
    }

    fn check_tokens(&self, tokens: ArrayView2<f64>) -> Result<()> {
        if tokens.ncols() != self.width() {
            return Err(Error::config(format!(
                "token width {} does not match codebook width {}",
                tokens.ncols(),
                self.width()
            )));
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("tokens must be finite"));
        }
        Ok(())
    }

    /// Nearest prototype per token under squared L2; ties go to the lowest index.
    pub fn quantize(&self, tokens: ArrayView2<f64>) -> Result<QuantizationResult> {
        self.check_tokens(tokens)?;
        let width = self.width();
        let entries = self.entries.as_standard_layout();
        let flat = entries.as_slice().expect("standard layout");
        let n = tokens.nrows();
        let mut indices = Vec::with_capacity(n);
        let mut sq_distances = Array1::zeros(n);
        let mut row_buf = vec![0.0; width];
        for (i, row) in tokens.rows().into_iter().enumerate() {
            for (dst, &src) in row_buf.iter_mut().zip(row.iter()) {
                *dst = src;
            }
            let mut best = (0usize, f64::INFINITY);
            for (j, e) in flat.chunks_exact(width).enumerate() {
                let d: f64 = row_buf.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.1 {
                    best = (j, d);
                }
            }
            indices.push(best.0);
            sq_distances[i] = best.1;
        }
        let quantized = self.entries.select(Axis(0), &indices);
        Ok(QuantizationResult {
            quantized,
            indices,
            sq_distances,
        })
    }

    /// Per-entry assignment counts and assigned-token sums.
    pub(crate) fn assignment_stats(
        &self,
        tokens: ArrayView2<f64>,
        indices: &[usize],
    ) -> Result<(Array1<f64>, Array2<f64>)> {
        if tokens.nrows() != indices.len() {
            return Err(Error::internal("token and index counts differ"));
        }
        let k = self.size();
        let mut counts = Array1::zeros(k);
        let mut sums = Array2::zeros(self.entries.raw_dim());
        for (row, &idx) in tokens.rows().into_iter().zip(indices) {
            if idx >= k {
                return Err(Error::internal(format!(
                    "index {idx} outside codebook of size {k}"
                )));
            }
            counts[idx] += 1.0;
            let mut s = sums.row_mut(idx);
            s += &row;
        }
        Ok((counts, sums))
    }

    /// One EMA step from the tokens assigned in a batch.
    ///
    /// `size' = γ size + (1-γ) n`, `sum' = γ sum + (1-γ) s`, and each entry
    /// becomes `sum'_k / ((size'_k + ε) · T / (T + K ε))` with `T = Σ size'`.
    /// An entry whose smoothed size is zero (only possible with ε = 0) keeps
    /// its previous value.
    pub fn ema_update(&mut self, tokens: ArrayView2<f64>, indices: &[usize]) -> Result<()> {
        self.check_tokens(tokens)?;
        let (counts, sums) = self.assignment_stats(tokens, indices)?;
        self.ema_apply(&counts, &sums);
        Ok(())
    }

    pub(crate) fn ema_apply(&mut self, counts: &Array1<f64>, sums: &Array2<f64>) {
        let g = self.decay;
        self.ema_cluster_size
            .zip_mut_with(counts, |s, &n| *s = g * *s + (1.0 - g) * n);
        self.ema_embed_sum
            .zip_mut_with(sums, |s, &x| *s = g * *s + (1.0 - g) * x);
        let k = self.size() as f64;
        let eps = self.laplace_eps;
        let total: f64 = self.ema_cluster_size.sum();
        for ((mut e, sum), &size) in self
            .entries
            .rows_mut()
            .into_iter()
            .zip(self.ema_embed_sum.rows())
            .zip(self.ema_cluster_size.iter())
        {
            let smoothed = (size + eps) * total / (total + k * eps);
            if smoothed > 0.0 && smoothed.is_finite() {
                e.zip_mut_with(&sum, |v, &s| *v = s / smoothed);
            }
        }
    }

    /// Re-seeds entries whose EMA cluster size fell below `threshold` with
    /// random rows of `tokens`. Returns how many entries were restarted.
    pub fn restart_dead(
        &mut self,
        tokens: ArrayView2<f64>,
        threshold: f64,
        rng: &mut Rng,
    ) -> Result<usize> {
        self.check_tokens(tokens)?;
        if tokens.nrows() == 0 {
            return Ok(0);
        }
        let mut restarted = 0;
        for k in 0..self.size() {
            if self.ema_cluster_size[k] < threshold {
                let row = tokens.row(rng.random_range(0..tokens.nrows()));
                self.entries.row_mut(k).assign(&row);
                self.ema_embed_sum.row_mut(k).assign(&row);
                self.ema_cluster_size[k] = 1.0;
                restarted += 1;
            }
        }
        Ok(restarted)
    }
}

/// Perplexity `exp(-Σ p ln p)` and the fraction of never-used entries for
/// a set of assignments into a codebook of size `k`.
pub fn usage_stats(indices: &[usize], k: usize) -> UsageStats {
    let mut counts = vec![0usize; k];
    for &i in indices {
        if i < k {
            counts[i] += 1;
        }
    }
    usage_from_counts(&counts)
}

pub(crate) fn usage_from_counts(counts: &[usize]) -> UsageStats {
    let k = counts.len();
    let total: usize = counts.iter().sum();
    if k == 0 {
        return UsageStats {
            perplexity: 0.0,
            dead_fraction: 0.0,
        };
    }
    let dead = counts.iter().filter(|&&c| c == 0).count();
    let entropy: f64 = if total == 0 {
        0.0
    } else {
        counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / total as f64;
                -p * p.ln()
            })
            .sum()
    };
    UsageStats {
        perplexity: entropy.exp(),
        dead_fraction: dead as f64 / k as f64,
    }
}
