//! The assembled autoencoder: encoder, hierarchical quantizers, decoder and
//! class-switched experts, with a batched forward pass and the matching
//! hand-written backward pass.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::codebook::{Codebook, DEFAULT_DECAY, DEFAULT_LAPLACE_EPS};
use crate::error::{Error, Result};
use crate::hvq::{HierarchyConfig, HierarchyMode};
use crate::nn::{seeded_rng, Ctx, FeedForwardCache, Param, Rng};
use crate::pot::{cost_matrix, pot_score, sinkhorn, SinkhornConfig};
use crate::scoring::recon_score;
use crate::switching::{select, softmax, Switch};
use crate::transformer::{Decoder, DecoderCache, Encoder, EncoderCache};
use crate::TokenGrid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Tokens per image `N`.
    pub tokens: usize,
    /// Token width `C`.
    pub width: usize,
    /// Encoder/decoder depth `L`.
    pub layers: usize,
    pub heads: usize,
    /// FFN hidden width as a multiple of `C`.
    pub ffn_mult: usize,
    /// Prototypes per codebook `K`.
    pub codebook_size: usize,
    /// Number of classes `M`; filled in from the training data.
    pub classes: usize,
    pub hierarchy: HierarchyMode,
    /// `false` skips quantization entirely (`zˡ := Υˡ(…)`).
    pub vq: bool,
    pub switch_codebook: bool,
    pub switch_expert: bool,
    pub decay: f64,
    pub laplace_eps: f64,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            tokens: 196,
            width: 64,
            layers: 4,
            heads: 4,
            ffn_mult: 4,
            codebook_size: 128,
            classes: 1,
            hierarchy: HierarchyMode::Global,
            vq: true,
            switch_codebook: true,
            switch_expert: true,
            decay: DEFAULT_DECAY,
            laplace_eps: DEFAULT_LAPLACE_EPS,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tokens", self.tokens),
            ("width", self.width),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ffn_mult", self.ffn_mult),
            ("codebook_size", self.codebook_size),
            ("classes", self.classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::config(format!(
                "decay must lie in (0, 1), got {}",
                self.decay
            )));
        }
        if !(self.laplace_eps >= 0.0 && self.laplace_eps.is_finite()) {
            return Err(Error::config("laplace_eps must be a nonnegative number"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn codebook_groups(&self) -> usize {
        if self.switch_codebook {
            self.classes
        } else {
            1
        }
    }

    pub fn expert_count(&self) -> usize {
        if self.switch_expert {
            self.classes
        } else {
            1
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HvqTrans {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub hierarchy: HierarchyConfig,
    pub switch: Switch,
    /// `codebooks[group][l - 1]` is the layer-`l` codebook of a group.
    pub codebooks: Vec<Vec<Codebook>>,
}

/// Everything the backward pass and the losses need from one batch.
pub struct Forward {
    pub batch: usize,
    pub pooled: Array2<f64>,
    pub logits: Array2<f64>,
    pub probs: Array2<f64>,
    /// Class used for routing, per image.
    pub routes: Vec<usize>,
    /// `[h⁰, h¹, …, hᴸ]`.
    pub hs: Vec<Array2<f64>>,
    /// Quantized top level, present in global mode.
    pub theta: Option<Array2<f64>>,
    pub theta_indices: Vec<usize>,
    pub fusion_inputs: Vec<Array2<f64>>,
    /// Quantizer inputs `u¹ … uᴸ`.
    pub fused: Vec<Array2<f64>>,
    /// Decoder memories `z¹ … zᴸ`.
    pub quantized: Vec<Array2<f64>>,
    /// Prototype indices per layer (empty without VQ).
    pub indices: Vec<Vec<usize>>,
    pub d0: Array2<f64>,
    pub recon: Array2<f64>,
    encoder_cache: EncoderCache,
    decoder_cache: DecoderCache,
    expert_caches: Vec<FeedForwardCache>,
}

/// Quantization offsets `e − u` recorded from a forward pass.
#[derive(Clone, Debug)]
pub struct FrozenOffsets {
    pub theta: Option<Array2<f64>>,
    pub layers: Vec<Array2<f64>>,
}

impl FrozenOffsets {
    pub fn from_forward(fwd: &Forward) -> Self {
        FrozenOffsets {
            theta: fwd.theta.as_ref().map(|t| t - &fwd.hs[fwd.hs.len() - 1]),
            layers: fwd
                .quantized
                .iter()
                .zip(&fwd.fused)
                .map(|(z, u)| z - u)
                .collect(),
        }
    }
}

/// Per-token scores of one image.
#[derive(Clone, Debug)]
pub struct ImageScores {
    pub class: usize,
    pub probs: Array1<f64>,
    pub s_org: Array1<f64>,
    /// One entry per layer; empty when POT scoring is off or VQ is disabled.
    pub s_pot: Vec<Array1<f64>>,
}

fn block(x: &Array2<f64>, b: usize, n: usize) -> ArrayView2<'_, f64> {
    x.slice(s![b * n..(b + 1) * n, ..])
}

impl HvqTrans {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed);
        let c = config.width;
        let hidden = config.ffn_mult * c;
        let encoder = Encoder::new(
            config.tokens,
            c,
            config.layers,
            config.heads,
            hidden,
            &mut rng,
        );
        let decoder = Decoder::new(
            config.tokens,
            c,
            config.layers,
            config.heads,
            hidden,
            &mut rng,
        );
        let hierarchy = HierarchyConfig::new(config.layers, c, config.hierarchy, &mut rng);
        let switch = Switch::new(c, config.classes, config.expert_count(), hidden, &mut rng)?;
        let mut codebooks = Vec::with_capacity(config.codebook_groups());
        for g in 0..config.codebook_groups() {
            let mut group = Vec::with_capacity(config.layers);
            for l in 1..=config.layers {
                group.push(Codebook::new(
                    config.codebook_size,
                    c,
                    g,
                    l,
                    config.decay,
                    config.laplace_eps,
                    &mut rng,
                )?);
            }
            codebooks.push(group);
        }
        let mut model = HvqTrans {
            config,
            encoder,
            decoder,
            hierarchy,
            switch,
            codebooks,
        };
        model.zero_grad();
        Ok(model)
    }

    /// Checks internal shape consistency, e.g. after deserialization.
    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        self.hierarchy.validate(cfg.width)?;
        let ok = self.encoder.tokens() == cfg.tokens
            && self.encoder.width() == cfg.width
            && self.decoder.tokens() == cfg.tokens
            && self.hierarchy.layers() == cfg.layers
            && self.hierarchy.mode == cfg.hierarchy
            && self.switch.classes() == cfg.classes
            && self.switch.experts.len() == cfg.expert_count()
            && self.codebooks.len() == cfg.codebook_groups()
            && self.codebooks.iter().all(|g| {
                g.len() == cfg.layers
                    && g.iter()
                        .all(|b| b.size() == cfg.codebook_size && b.width() == cfg.width)
            });
        if ok {
            Ok(())
        } else {
            Err(Error::config(
                "model parameters disagree with its configuration",
            ))
        }
    }

    pub fn codebook_group(&self, class: usize) -> usize {
        if self.config.switch_codebook {
            class
        } else {
            0
        }
    }

    pub fn expert_index(&self, class: usize) -> usize {
        if self.config.switch_expert {
            class
        } else {
            0
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        self.encoder.params_mut(&mut out);
        self.decoder.params_mut(&mut out);
        self.hierarchy.params_mut(&mut out);
        self.switch.params_mut(&mut out);
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
        for book in self.codebooks.iter_mut().flatten() {
            book.zero_grad();
        }
    }

    fn check_input(&self, h0: ArrayView2<f64>) -> Result<usize> {
        let n = self.config.tokens;
        if h0.ncols() != self.config.width || h0.nrows() == 0 || !h0.nrows().is_multiple_of(n) {
            return Err(Error::config(format!(
                "model expects blocks of {}×{} backbone tokens, got {:?}",
                n,
                self.config.width,
                h0.dim()
            )));
        }
        Ok(h0.nrows() / n)
    }

    fn classify_batch(&self, h0: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let pooled = Switch::pool(h0, self.config.tokens);
        let logits = self.switch.logits(pooled.view());
        let mut probs = logits.clone();
        for mut row in probs.rows_mut() {
            let p = softmax(row.view());
            row.assign(&p);
        }
        (pooled, logits, probs)
    }

    /// Quantizes each image block of `x` against its group's layer codebook.
    fn quantize_blocks(
        &self,
        x: &Array2<f64>,
        layer: usize,
        routes: &[usize],
    ) -> Result<(Array2<f64>, Vec<usize>)> {
        if !self.config.vq {
            return Ok((x.clone(), Vec::new()));
        }
        let n = self.config.tokens;
        let mut out = Array2::zeros(x.raw_dim());
        let mut indices = Vec::with_capacity(x.nrows());
        for (b, &m) in routes.iter().enumerate() {
            let book = &self.codebooks[self.codebook_group(m)][layer - 1];
            let q = book.quantize(block(x, b, n))?;
            out.slice_mut(s![b * n..(b + 1) * n, ..])
                .assign(&q.quantized);
            indices.extend(q.indices);
        }
        Ok((out, indices))
    }

    fn fusion_input(
        &self,
        layer: usize,
        hs: &[Array2<f64>],
        theta: Option<&Array2<f64>>,
    ) -> Result<Array2<f64>> {
        let views: Vec<_> = hs.iter().map(|h| h.view()).collect();
        self.hierarchy
            .fusion_input(layer, &views, theta.map(|t| t.view()))
    }

    fn resolve_routes(&self, probs: &Array2<f64>, routes: Option<&[usize]>) -> Result<Vec<usize>> {
        match routes {
            Some(r) => {
                if r.len() != probs.nrows() {
                    return Err(Error::config("one route per image is required"));
                }
                if let Some(&bad) = r.iter().find(|&&m| m >= self.config.classes) {
                    return Err(Error::input(format!(
                        "class {bad} outside [0, {})",
                        self.config.classes
                    )));
                }
                Ok(r.to_vec())
            }
            None => Ok(probs.rows().into_iter().map(|p| select(p)).collect()),
        }
    }

    /// Batched forward over stacked `B·N × C` backbone tokens. `routes`
    /// overrides the classifier's argmax (teacher forcing).
    pub fn forward(
        &self,
        h0: ArrayView2<f64>,
        routes: Option<&[usize]>,
        ctx: &mut Ctx,
    ) -> Result<Forward> {
        self.forward_inner(h0, routes, ctx, None)
    }

    /// Forward pass in which every quantizer output is replaced by its
    /// input plus a fixed offset, `z = u + sg(e − u)` with the offsets taken
    /// from an earlier pass. Its exact derivatives are the straight-through
    /// ones, which makes it a reference for gradient checks.
    pub fn forward_frozen(
        &self,
        h0: ArrayView2<f64>,
        routes: Option<&[usize]>,
        ctx: &mut Ctx,
        offsets: &FrozenOffsets,
    ) -> Result<Forward> {
        self.forward_inner(h0, routes, ctx, Some(offsets))
    }

    fn forward_inner(
        &self,
        h0: ArrayView2<f64>,
        routes: Option<&[usize]>,
        ctx: &mut Ctx,
        frozen: Option<&FrozenOffsets>,
    ) -> Result<Forward> {
        let batch = self.check_input(h0)?;
        let n = self.config.tokens;
        let layers = self.config.layers;
        let (pooled, logits, probs) = self.classify_batch(h0);
        let routes = self.resolve_routes(&probs, routes)?;

        let (enc_out, encoder_cache) = self.encoder.forward(h0, ctx)?;
        let mut hs = Vec::with_capacity(layers + 1);
        hs.push(h0.to_owned());
        hs.extend(enc_out);

        let (theta, theta_indices) = if self.config.hierarchy.uses_theta() {
            match frozen.and_then(|f| f.theta.as_ref()) {
                Some(off) => (Some(&hs[layers] + off), Vec::new()),
                None => {
                    let (t, idx) = self.quantize_blocks(&hs[layers], layers, &routes)?;
                    (Some(t), idx)
                }
            }
        } else {
            (None, Vec::new())
        };

        let mut fusion_inputs = Vec::with_capacity(layers);
        let mut fused = Vec::with_capacity(layers);
        let mut quantized = Vec::with_capacity(layers);
        let mut indices = Vec::with_capacity(layers);
        for l in 1..=layers {
            let input = self.fusion_input(l, &hs, theta.as_ref())?;
            let u = self.hierarchy.fusion[l - 1].forward(input.view());
            let (z, idx) = match frozen {
                Some(f) => (&u + &f.layers[l - 1], Vec::new()),
                None => self.quantize_blocks(&u, l, &routes)?,
            };
            fusion_inputs.push(input);
            fused.push(u);
            quantized.push(z);
            indices.push(idx);
        }

        let (d0, decoder_cache) = self.decoder.forward(&quantized, ctx)?;
        let mut recon = Array2::zeros(d0.raw_dim());
        let mut expert_caches = Vec::with_capacity(batch);
        for (b, &m) in routes.iter().enumerate() {
            let (y, cache) = self.switch.experts[self.expert_index(m)].forward(block(&d0, b, n));
            recon.slice_mut(s![b * n..(b + 1) * n, ..]).assign(&y);
            expert_caches.push(cache);
        }

        Ok(Forward {
            batch,
            pooled,
            logits,
            probs,
            routes,
            hs,
            theta,
            theta_indices,
            fusion_inputs,
            fused,
            quantized,
            indices,
            d0,
            recon,
            encoder_cache,
            decoder_cache,
            expert_caches,
        })
    }

    /// Backward pass given loss gradients at the reconstruction, extra
    /// gradients on the quantizer inputs `uˡ` (commitment), an extra
    /// gradient on `hᴸ` from the `θ` site, and the classifier logits.
    /// Quantization is crossed straight-through. Accumulates into parameter
    /// gradients; codebook gradients are handled by the caller.
    pub fn backward(
        &mut self,
        fwd: &Forward,
        drecon: &Array2<f64>,
        dfused_extra: &[Array2<f64>],
        dtop_extra: Option<&Array2<f64>>,
        dlogits: &Array2<f64>,
    ) -> Result<()> {
        let n = self.config.tokens;
        let layers = self.config.layers;
        let c = self.config.width;
        if drecon.dim() != fwd.recon.dim() || dfused_extra.len() != layers {
            return Err(Error::internal(
                "backward received gradients of the wrong shape",
            ));
        }

        let mut dd0 = Array2::zeros(fwd.d0.raw_dim());
        for (b, &m) in fwd.routes.iter().enumerate() {
            let e = self.expert_index(m);
            let g = self.switch.experts[e].backward(&fwd.expert_caches[b], block(drecon, b, n));
            dd0.slice_mut(s![b * n..(b + 1) * n, ..]).assign(&g);
        }
        let dz = self.decoder.backward(&fwd.decoder_cache, &dd0);

        let mut dh: Vec<Array2<f64>> = (0..layers)
            .map(|_| Array2::zeros(fwd.d0.raw_dim()))
            .collect();
        let mut dtheta = Array2::<f64>::zeros(fwd.d0.raw_dim());
        for l in 1..=layers {
            let du = &dz[l - 1] + &dfused_extra[l - 1];
            let dinput =
                self.hierarchy.fusion[l - 1].backward(fwd.fusion_inputs[l - 1].view(), du.view());
            let (dprev, dsecond) = self.hierarchy.split_grad(dinput, c);
            if let Some(dp) = dprev {
                if l >= 2 {
                    dh[l - 2] += &dp;
                }
            }
            match self.hierarchy.mode {
                HierarchyMode::Plain | HierarchyMode::Adjacent => dh[l - 1] += &dsecond,
                HierarchyMode::Global => dtheta += &dsecond,
            }
        }
        if self.hierarchy.mode.uses_theta() {
            dh[layers - 1] += &dtheta;
        }
        if let Some(extra) = dtop_extra {
            dh[layers - 1] += extra;
        }
        self.encoder.backward(&fwd.encoder_cache, &dh);
        self.switch
            .classifier_backward(fwd.pooled.view(), dlogits.view());
        Ok(())
    }

    /// Data-dependent initialization of every codebook that is still
    /// random and receives tokens in this batch. Runs the quantization
    /// levels in dependency order (`θ` first) without dropout.
    pub fn init_codebooks(
        &mut self,
        h0: ArrayView2<f64>,
        routes: Option<&[usize]>,
        rng: &mut Rng,
    ) -> Result<bool> {
        if !self.config.vq || self.codebooks.iter().flatten().all(|b| b.is_initialized()) {
            return Ok(false);
        }
        self.check_input(h0)?;
        let n = self.config.tokens;
        let layers = self.config.layers;
        let (_, _, probs) = self.classify_batch(h0);
        let routes = self.resolve_routes(&probs, routes)?;
        let (enc_out, _) = self.encoder.forward(h0, &mut Ctx::eval())?;
        let mut hs = vec![h0.to_owned()];
        hs.extend(enc_out);

        let mut changed = false;
        let theta = if self.config.hierarchy.uses_theta() {
            changed |= self.init_layer(&hs[layers], layers, &routes, n, rng)?;
            Some(self.quantize_blocks(&hs[layers], layers, &routes)?.0)
        } else {
            None
        };
        for l in 1..=layers {
            let input = self.fusion_input(l, &hs, theta.as_ref())?;
            let u = self.hierarchy.fusion[l - 1].forward(input.view());
            changed |= self.init_layer(&u, l, &routes, n, rng)?;
        }
        Ok(changed)
    }

    fn init_layer(
        &mut self,
        x: &Array2<f64>,
        layer: usize,
        routes: &[usize],
        n: usize,
        rng: &mut Rng,
    ) -> Result<bool> {
        let mut changed = false;
        for g in 0..self.codebooks.len() {
            if self.codebooks[g][layer - 1].is_initialized() {
                continue;
            }
            let rows: Vec<usize> = routes
                .iter()
                .enumerate()
                .filter(|(_, &m)| self.codebook_group(m) == g)
                .flat_map(|(b, _)| b * n..(b + 1) * n)
                .collect();
            if rows.is_empty() {
                continue;
            }
            let tokens = x.select(Axis(0), &rows);
            self.codebooks[g][layer - 1].init_from_tokens(tokens.view(), rng)?;
            changed = true;
        }
        Ok(changed)
    }

    /// Eval-mode scores for a batch of images. POT scores are computed
    /// against the routed group's codebooks only, with one solver setting
    /// per layer.
    pub fn score_batch(
        &self,
        h0: ArrayView2<f64>,
        pot: Option<&[SinkhornConfig]>,
    ) -> Result<Vec<ImageScores>> {
        if let Some(cfgs) = pot {
            if cfgs.len() != self.config.layers {
                return Err(Error::config(format!(
                    "{} sinkhorn settings for {} layers",
                    cfgs.len(),
                    self.config.layers
                )));
            }
        }
        let fwd = self.forward(h0, None, &mut Ctx::eval())?;
        let n = self.config.tokens;
        let mut out = Vec::with_capacity(fwd.batch);
        for b in 0..fwd.batch {
            let m = fwd.routes[b];
            let s_org = recon_score(block(&fwd.hs[0], b, n), block(&fwd.recon, b, n))?;
            let mut s_pot = Vec::new();
            if let (Some(cfg), true) = (pot, self.config.vq) {
                let group = &self.codebooks[self.codebook_group(m)];
                for (l, u) in fwd.fused.iter().enumerate() {
                    let cost = cost_matrix(block(u, b, n), group[l].entries().view())?;
                    s_pot.push(pot_score(&sinkhorn(&cost, &cfg[l])?));
                }
            }
            out.push(ImageScores {
                class: m,
                probs: fwd.probs.row(b).to_owned(),
                s_org,
                s_pot,
            });
        }
        Ok(out)
    }

    /// Single-image reconstruction `h̃⁰`.
    pub fn reconstruct(&self, h0: &TokenGrid) -> Result<TokenGrid> {
        Ok(self.forward(h0.view(), None, &mut Ctx::eval())?.recon)
    }
}
