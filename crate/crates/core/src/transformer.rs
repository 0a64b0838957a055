//! Cascaded transformer encoder and the prototype-attending decoder.
//!
//! Both stacks use post-norm residual blocks. Token grids for a batch are
//! stacked row-wise: image `b` owns rows `b·N .. (b+1)·N`.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::dropout_backward;
use crate::nn::{
    AttentionCache, Ctx, FeedForward, FeedForwardCache, LayerNorm, LayerNormCache,
    MultiHeadAttention, Param, Rng,
};
use crate::TokenGrid;

/// Repeats an `N × C` matrix `times` times along rows.
pub(crate) fn tile_rows(m: &Array2<f64>, times: usize) -> Array2<f64> {
    let (n, c) = m.dim();
    let mut out = Array2::zeros((n * times, c));
    for b in 0..times {
        out.slice_mut(s![b * n..(b + 1) * n, ..]).assign(m);
    }
    out
}

/// Adjoint of [`tile_rows`]: sums the `N`-row blocks.
pub(crate) fn fold_rows(m: &Array2<f64>, n: usize) -> Array2<f64> {
    let mut out = Array2::zeros((n, m.ncols()));
    for block in m.axis_chunks_iter(Axis(0), n) {
        out += &block;
    }
    out
}

fn embedding(n: usize, c: usize, rng: &mut Rng) -> Param {
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    Param::new(Array2::from_shape_simple_fn((n, c), || normal.sample(rng)))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct EncoderLayerCache {
    attn: AttentionCache,
    drop1: Option<Array2<f64>>,
    norm1: LayerNormCache,
    ffn: FeedForwardCache,
    drop2: Option<Array2<f64>>,
    norm2: LayerNormCache,
}

impl EncoderLayerCache {
    pub fn attention(&self) -> &AttentionCache {
        &self.attn
    }
}

impl EncoderLayer {
    pub fn new(width: usize, heads: usize, hidden: usize, rng: &mut Rng) -> Self {
        EncoderLayer {
            attn: MultiHeadAttention::new(width, heads, rng),
            norm1: LayerNorm::new(width),
            ffn: FeedForward::new(width, hidden, rng),
            norm2: LayerNorm::new(width),
        }
    }

    pub fn forward(
        &self,
        x: ArrayView2<f64>,
        n: usize,
        ctx: &mut Ctx,
    ) -> (Array2<f64>, EncoderLayerCache) {
        let (a, attn) = self.attn.forward(x, x, x, n, n);
        let (a, drop1) = ctx.dropout(a);
        let (y1, norm1) = self.norm1.forward((&x + &a).view());
        let (f, ffn) = self.ffn.forward(y1.view());
        let (f, drop2) = ctx.dropout(f);
        let (y2, norm2) = self.norm2.forward((&y1 + &f).view());
        let cache = EncoderLayerCache {
            attn,
            drop1,
            norm1,
            ffn,
            drop2,
            norm2,
        };
        (y2, cache)
    }

    pub fn backward(&mut self, cache: &EncoderLayerCache, dy: ArrayView2<f64>) -> Array2<f64> {
        let dr2 = self.norm2.backward(&cache.norm2, dy);
        let df = dropout_backward(&dr2, &cache.drop2);
        let dy1 = &dr2 + &self.ffn.backward(&cache.ffn, df.view());
        let dr1 = self.norm1.backward(&cache.norm1, dy1.view());
        let da = dropout_backward(&dr1, &cache.drop1);
        let (dq, dk, dv) = self.attn.backward(&cache.attn, da.view());
        dr1 + dq + dk + dv
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.attn.params_mut(out);
        self.norm1.params_mut(out);
        self.ffn.params_mut(out);
        self.norm2.params_mut(out);
    }
}

/// Learned absolute positions added once to the input, then `L` layers;
/// every intermediate output is kept.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Encoder {
    pub positional: Param,
    pub layers: Vec<EncoderLayer>,
}

#[derive(Clone, Debug)]
pub struct EncoderCache {
    layers: Vec<EncoderLayerCache>,
    n_tokens: usize,
}

impl EncoderCache {
    pub fn layer(&self, l: usize) -> &EncoderLayerCache {
        &self.layers[l]
    }
}

impl Encoder {
    pub fn new(
        tokens: usize,
        width: usize,
        layers: usize,
        heads: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Self {
        let positional = embedding(tokens, width, rng);
        let layers = (0..layers)
            .map(|_| EncoderLayer::new(width, heads, hidden, rng))
            .collect();
        Encoder { positional, layers }
    }

    pub fn tokens(&self) -> usize {
        self.positional.value.nrows()
    }

    pub fn width(&self) -> usize {
        self.positional.value.ncols()
    }

    fn check(&self, h0: ArrayView2<f64>) -> Result<usize> {
        let n = self.tokens();
        if h0.ncols() != self.width() || h0.nrows() == 0 || !h0.nrows().is_multiple_of(n) {
            return Err(Error::config(format!(
                "encoder expects blocks of {}×{}, got {:?}",
                n,
                self.width(),
                h0.dim()
            )));
        }
        Ok(h0.nrows() / n)
    }

    /// Batched forward; returns `[h¹ … hᴸ]`.
    pub fn forward(
        &self,
        h0: ArrayView2<f64>,
        ctx: &mut Ctx,
    ) -> Result<(Vec<Array2<f64>>, EncoderCache)> {
        let batch = self.check(h0)?;
        let n = self.tokens();
        let mut x = &h0 + &tile_rows(&self.positional.value, batch);
        let mut outs = Vec::with_capacity(self.layers.len());
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, c) = layer.forward(x.view(), n, ctx);
            caches.push(c);
            outs.push(y.clone());
            x = y;
        }
        Ok((
            outs,
            EncoderCache {
                layers: caches,
                n_tokens: n,
            },
        ))
    }

    /// Single-image, eval-mode convenience wrapper.
    pub fn encode(&self, h0: &TokenGrid) -> Result<Vec<TokenGrid>> {
        Ok(self.forward(h0.view(), &mut Ctx::eval())?.0)
    }

    /// `grads[l]` is the loss gradient arriving directly at `hˡ⁺¹`. Returns
    /// the gradient with respect to the (frozen) input tokens.
    pub fn backward(&mut self, cache: &EncoderCache, grads: &[Array2<f64>]) -> Array2<f64> {
        let mut g = grads.last().expect("at least one layer").clone();
        for l in (0..self.layers.len()).rev() {
            let mut dx = self.layers[l].backward(&cache.layers[l], g.view());
            if l > 0 {
                dx += &grads[l - 1];
            }
            g = dx;
        }
        self.positional.grad += &fold_rows(&g, cache.n_tokens);
        g
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.positional);
        for layer in &mut self.layers {
            layer.params_mut(out);
        }
    }
}

/// Self-attention over the running decoder tokens, cross-attention into
/// quantized prototypes, then a feed-forward block.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub norm3: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct DecoderLayerCache {
    self_attn: AttentionCache,
    drop1: Option<Array2<f64>>,
    norm1: LayerNormCache,
    cross_attn: AttentionCache,
    drop2: Option<Array2<f64>>,
    norm2: LayerNormCache,
    ffn: FeedForwardCache,
    drop3: Option<Array2<f64>>,
    norm3: LayerNormCache,
}

impl DecoderLayerCache {
    pub fn self_attention(&self) -> &AttentionCache {
        &self.self_attn
    }

    pub fn cross_attention(&self) -> &AttentionCache {
        &self.cross_attn
    }
}

impl DecoderLayer {
    pub fn new(width: usize, heads: usize, hidden: usize, rng: &mut Rng) -> Self {
        DecoderLayer {
            self_attn: MultiHeadAttention::new(width, heads, rng),
            norm1: LayerNorm::new(width),
            cross_attn: MultiHeadAttention::new(width, heads, rng),
            norm2: LayerNorm::new(width),
            ffn: FeedForward::new(width, hidden, rng),
            norm3: LayerNorm::new(width),
        }
    }

    /// `key_pos` is added to the cross-attention keys only; values are the
    /// prototypes themselves.
    pub fn forward(
        &self,
        d_next: ArrayView2<f64>,
        z: ArrayView2<f64>,
        key_pos: ArrayView2<f64>,
        n: usize,
        ctx: &mut Ctx,
    ) -> (Array2<f64>, DecoderLayerCache) {
        let (a, self_attn) = self.self_attn.forward(d_next, d_next, d_next, n, n);
        let (a, drop1) = ctx.dropout(a);
        let (q, norm1) = self.norm1.forward((&d_next + &a).view());
        let keys = &z + &key_pos;
        let (c, cross_attn) = self.cross_attn.forward(q.view(), keys.view(), z, n, n);
        let (c, drop2) = ctx.dropout(c);
        let (t, norm2) = self.norm2.forward((&q + &c).view());
        let (f, ffn) = self.ffn.forward(t.view());
        let (f, drop3) = ctx.dropout(f);
        let (y, norm3) = self.norm3.forward((&t + &f).view());
        let cache = DecoderLayerCache {
            self_attn,
            drop1,
            norm1,
            cross_attn,
            drop2,
            norm2,
            ffn,
            drop3,
            norm3,
        };
        (y, cache)
    }

    /// Returns gradients for (d_next, z, key_pos).
    pub fn backward(
        &mut self,
        cache: &DecoderLayerCache,
        dy: ArrayView2<f64>,
    ) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let dr3 = self.norm3.backward(&cache.norm3, dy);
        let df = dropout_backward(&dr3, &cache.drop3);
        let dt = &dr3 + &self.ffn.backward(&cache.ffn, df.view());
        let dr2 = self.norm2.backward(&cache.norm2, dt.view());
        let dc = dropout_backward(&dr2, &cache.drop2);
        let (dq_cross, dkeys, dvals) = self.cross_attn.backward(&cache.cross_attn, dc.view());
        let dq = dr2 + dq_cross;
        let dr1 = self.norm1.backward(&cache.norm1, dq.view());
        let da = dropout_backward(&dr1, &cache.drop1);
        let (d1, d2, d3) = self.self_attn.backward(&cache.self_attn, da.view());
        let dd = dr1 + d1 + d2 + d3;
        let dz = &dkeys + &dvals;
        (dd, dz, dkeys)
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.self_attn.params_mut(out);
        self.norm1.params_mut(out);
        self.cross_attn.params_mut(out);
        self.norm2.params_mut(out);
        self.ffn.params_mut(out);
        self.norm3.params_mut(out);
    }
}

/// Decoder stack. `layers[l - 1]` is decoder layer `l`; decoding starts from
/// the learned queries and runs `l = L … 1`, layer `l` attending to `zˡ`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Decoder {
    pub queries: Param,
    pub positional: Param,
    pub layers: Vec<DecoderLayer>,
}

#[derive(Clone, Debug)]
pub struct DecoderCache {
    /// Indexed like `layers`.
    layers: Vec<DecoderLayerCache>,
    batch: usize,
}

impl DecoderCache {
    pub fn layer(&self, l: usize) -> &DecoderLayerCache {
        &self.layers[l]
    }
}

impl Decoder {
    pub fn new(
        tokens: usize,
        width: usize,
        layers: usize,
        heads: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Self {
        let queries = embedding(tokens, width, rng);
        let positional = embedding(tokens, width, rng);
        let layers = (0..layers)
            .map(|_| DecoderLayer::new(width, heads, hidden, rng))
            .collect();
        Decoder {
            queries,
            positional,
            layers,
        }
    }

    pub fn tokens(&self) -> usize {
        self.queries.value.nrows()
    }

    pub fn width(&self) -> usize {
        self.queries.value.ncols()
    }

    fn check_z(&self, z: ArrayView2<f64>) -> Result<usize> {
        let n = self.tokens();
        if z.ncols() != self.width() || z.nrows() == 0 || !z.nrows().is_multiple_of(n) {
            return Err(Error::config(format!(
                "decoder expects blocks of {}×{}, got {:?}",
                n,
                self.width(),
                z.dim()
            )));
        }
        Ok(z.nrows() / n)
    }

    /// Batched forward over `z_list = [z¹ … zᴸ]`; returns `d⁰`.
    pub fn forward(
        &self,
        z_list: &[Array2<f64>],
        ctx: &mut Ctx,
    ) -> Result<(Array2<f64>, DecoderCache)> {
        if z_list.len() != self.layers.len() {
            return Err(Error::config(format!(
                "decoder has {} layers but received {} quantized grids",
                self.layers.len(),
                z_list.len()
            )));
        }
        let batch = self.check_z(z_list[0].view())?;
        for z in z_list {
            if self.check_z(z.view())? != batch {
                return Err(Error::config("quantized grids disagree on batch size"));
            }
        }
        let n = self.tokens();
        let pos = tile_rows(&self.positional.value, batch);
        let mut d = tile_rows(&self.queries.value, batch);
        let mut caches: Vec<Option<DecoderLayerCache>> = vec![None; self.layers.len()];
        for l in (0..self.layers.len()).rev() {
            let (y, c) = self.layers[l].forward(d.view(), z_list[l].view(), pos.view(), n, ctx);
            caches[l] = Some(c);
            d = y;
        }
        let layers = caches
            .into_iter()
            .map(|c| c.expect("every layer ran"))
            .collect();
        Ok((d, DecoderCache { layers, batch }))
    }

    /// Eval-mode decoding of one image.
    pub fn decode(&self, z_list: &[TokenGrid]) -> Result<TokenGrid> {
        Ok(self.forward(z_list, &mut Ctx::eval())?.0)
    }

    /// One eval-mode decoder layer: `layer` is 1-based.
    pub fn decode_layer(
        &self,
        d_next: &TokenGrid,
        z: &TokenGrid,
        layer: usize,
    ) -> Result<TokenGrid> {
        if layer == 0 || layer > self.layers.len() {
            return Err(Error::config(format!("decoder layer {layer} out of range")));
        }
        let batch = self.check_z(z.view())?;
        if d_next.dim() != z.dim() {
            return Err(Error::config(
                "decoder input and quantized grid shapes differ",
            ));
        }
        let pos = tile_rows(&self.positional.value, batch);
        let (y, _) = self.layers[layer - 1].forward(
            d_next.view(),
            z.view(),
            pos.view(),
            self.tokens(),
            &mut Ctx::eval(),
        );
        Ok(y)
    }

    /// Returns `dL/dzˡ` for every layer (same order as `z_list`).
    pub fn backward(&mut self, cache: &DecoderCache, dd0: &Array2<f64>) -> Vec<Array2<f64>> {
        let n = self.tokens();
        let mut dz = vec![Array2::zeros((0, 0)); self.layers.len()];
        let mut dpos = Array2::zeros(dd0.raw_dim());
        let mut g = dd0.clone();
        for ((layer, lc), dzl) in self.layers.iter_mut().zip(&cache.layers).zip(dz.iter_mut()) {
            let (dd, d, dkp) = layer.backward(lc, g.view());
            *dzl = d;
            dpos += &dkp;
            g = dd;
        }
        debug_assert_eq!(g.nrows(), cache.batch * n);
        self.queries.grad += &fold_rows(&g, n);
        self.positional.grad += &fold_rows(&dpos, n);
        dz
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.queries);
        out.push(&mut self.positional);
        for layer in &mut self.layers {
            layer.params_mut(out);
        }
    }
}
