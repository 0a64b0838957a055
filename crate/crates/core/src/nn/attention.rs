use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::{softmax_rows, Linear, Param, Rng};

/// Multi-head scaled dot-product attention over a batch of token blocks.
///
/// Inputs are stacked `(batch · tokens) × width` matrices; image `b` owns
/// rows `b·n .. (b+1)·n`. Queries and keys/values may have different token
/// counts, and keys and values may come from different inputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

#[derive(Clone, Debug)]
pub struct AttentionCache {
    q_in: Array2<f64>,
    k_in: Array2<f64>,
    v_in: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    mixed: Array2<f64>,
    n_q: usize,
    n_k: usize,
}

impl AttentionCache {
    /// Softmax weights, one `n_q × n_k` matrix per (image, head), image-major.
    pub fn probs(&self) -> &[Array2<f64>] {
        &self.probs
    }
}

impl MultiHeadAttention {
    pub fn new(width: usize, heads: usize, rng: &mut Rng) -> Self {
        assert!(
            heads > 0 && width.is_multiple_of(heads),
            "width {width} not divisible by {heads} heads"
        );
        MultiHeadAttention {
            query: Linear::new(width, width, rng),
            key: Linear::new(width, width, rng),
            value: Linear::new(width, width, rng),
            output: Linear::new(width, width, rng),
            heads,
        }
    }

    pub fn width(&self) -> usize {
        self.query.in_dim()
    }

    pub fn forward(
        &self,
        q_in: ArrayView2<f64>,
        k_in: ArrayView2<f64>,
        v_in: ArrayView2<f64>,
        n_q: usize,
        n_k: usize,
    ) -> (Array2<f64>, AttentionCache) {
        let batch = q_in.nrows() / n_q;
        debug_assert_eq!(batch * n_k, k_in.nrows());
        let width = self.width();
        let dh = width / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.query.forward(q_in);
        let k = self.key.forward(k_in);
        let v = self.value.forward(v_in);
        let mut mixed = Array2::zeros((q.nrows(), width));
        let mut probs = Vec::with_capacity(batch * self.heads);
        for b in 0..batch {
            let (qr, kr) = (b * n_q..(b + 1) * n_q, b * n_k..(b + 1) * n_k);
            for h in 0..self.heads {
                let cols = h * dh..(h + 1) * dh;
                let qs = q.slice(s![qr.clone(), cols.clone()]);
                let ks = k.slice(s![kr.clone(), cols.clone()]);
                let vs = v.slice(s![kr.clone(), cols.clone()]);
                let mut p = qs.dot(&ks.t());
                p *= scale;
                softmax_rows(&mut p);
                mixed.slice_mut(s![qr.clone(), cols]).assign(&p.dot(&vs));
                probs.push(p);
            }
        }
        let y = self.output.forward(mixed.view());
        let cache = AttentionCache {
            q_in: q_in.to_owned(),
            k_in: k_in.to_owned(),
            v_in: v_in.to_owned(),
            q,
            k,
            v,
            probs,
            mixed,
            n_q,
            n_k,
        };
        (y, cache)
    }

    /// Returns gradients with respect to (query input, key input, value input).
    pub fn backward(
        &mut self,
        cache: &AttentionCache,
        dy: ArrayView2<f64>,
    ) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let (n_q, n_k) = (cache.n_q, cache.n_k);
        let batch = cache.q.nrows() / n_q;
        let dh = self.width() / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let dmixed = self.output.backward(cache.mixed.view(), dy);
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for b in 0..batch {
            let (qr, kr) = (b * n_q..(b + 1) * n_q, b * n_k..(b + 1) * n_k);
            for h in 0..self.heads {
                let cols = h * dh..(h + 1) * dh;
                let p = &cache.probs[b * self.heads + h];
                let qs = cache.q.slice(s![qr.clone(), cols.clone()]);
                let ks = cache.k.slice(s![kr.clone(), cols.clone()]);
                let vs = cache.v.slice(s![kr.clone(), cols.clone()]);
                let dout = dmixed.slice(s![qr.clone(), cols.clone()]);
                let dp = dout.dot(&vs.t());
                dv.slice_mut(s![kr.clone(), cols.clone()])
                    .assign(&p.t().dot(&dout));
                let inner = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
                let mut ds = (&dp - &inner) * p;
                ds *= scale;
                dq.slice_mut(s![qr.clone(), cols.clone()])
                    .assign(&ds.dot(&ks));
                dk.slice_mut(s![kr.clone(), cols]).assign(&ds.t().dot(&qs));
            }
        }
        let dq_in = self.query.backward(cache.q_in.view(), dq.view());
        let dk_in = self.key.backward(cache.k_in.view(), dk.view());
        let dv_in = self.value.backward(cache.v_in.view(), dv.view());
        (dq_in, dk_in, dv_in)
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.query.params_mut(out);
        self.key.params_mut(out);
        self.value.params_mut(out);
        self.output.params_mut(out);
    }
}
