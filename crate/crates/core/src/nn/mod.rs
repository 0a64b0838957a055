//! Minimal dense layers with hand-written backward passes.
//!
//! Every layer keeps its parameters as [`Param`]s (value plus accumulated
//! gradient). `forward` returns the output together with whatever the
//! matching `backward` needs; `backward` accumulates parameter gradients and
//! returns the gradient with respect to the layer input.

mod attention;
mod dropout;
mod feed_forward;
mod layer_norm;
mod linear;
mod optim;
mod param;

pub use attention::{AttentionCache, MultiHeadAttention};
pub(crate) use dropout::dropout_backward;
pub use dropout::Ctx;
pub use feed_forward::{FeedForward, FeedForwardCache};
pub use layer_norm::{LayerNorm, LayerNormCache};
pub use linear::Linear;
pub use optim::AdamW;
pub use param::Param;

/// Deterministic generator used for every random draw in the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Seeded generator; the same seed always yields the same stream.
pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}

/// Row-wise softmax in place.
pub(crate) fn softmax_rows(m: &mut ndarray::Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        row.mapv_inplace(|v| {
            let e = (v - max).exp();
            sum += e;
            e
        });
        row.mapv_inplace(|v| v / sum);
    }
}
