//! Objective, optimization loop and EMA codebook maintenance.
//!
//! All squared-error terms are per-element means. Quantization is crossed
//! straight-through; the prototype term and the transport loss reach the
//! codebooks only when EMA updates are switched off, and are reported
//! without gradient otherwise.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::codebook::{usage_from_counts, UsageStats};
use crate::error::{Error, Result};
use crate::model::{Forward, HvqTrans};
use crate::nn::{seeded_rng, AdamW, Ctx, Rng};
use crate::pot::{
    cost_matrix, layer_configs, pot_loss, pot_loss_grad_entries, sinkhorn, SinkhornConfig,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Epoch at which the learning rate drops; defaults to 80% of `epochs`.
    pub lr_drop_epoch: Option<usize>,
    pub lr_drop_factor: f64,
    /// Commitment weights `βˡ`: one per layer, or a single broadcast value.
    pub beta: Vec<f64>,
    /// Transport-loss weights `αˡ`, same convention as `beta`.
    pub alpha: Vec<f64>,
    pub seed: u64,
    /// Re-estimate codebooks by EMA (default) instead of by gradient.
    pub ema: bool,
    /// Route training images by their label instead of the classifier.
    pub teacher_force_switch: bool,
    /// Compute the transport loss term.
    pub pot: bool,
    pub sinkhorn: SinkhornConfig,
    /// Per-layer solver settings; empty means `sinkhorn` for every layer.
    pub sinkhorn_layers: Vec<SinkhornConfig>,
    /// Re-seed codebook entries whose EMA size falls below this value.
    pub dead_code_threshold: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 16,
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            lr_drop_epoch: None,
            lr_drop_factor: 0.1,
            beta: vec![0.25],
            alpha: vec![0.001],
            seed: 0,
            ema: true,
            teacher_force_switch: false,
            pot: true,
            sinkhorn: SinkhornConfig::default(),
            sinkhorn_layers: Vec::new(),
            dead_code_threshold: None,
        }
    }
}

fn per_layer(values: &[f64], layers: usize, name: &str) -> Result<Vec<f64>> {
    let v = match values.len() {
        1 => vec![values[0]; layers],
        n if n == layers => values.to_vec(),
        n => {
            return Err(Error::config(format!(
                "{name} has {n} entries; expected 1 or one per layer ({layers})"
            )))
        }
    };
    if v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(Error::config(format!("{name} weights must be nonnegative")));
    }
    Ok(v)
}

impl TrainConfig {
    pub fn validate(&self, layers: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.lr_drop_factor > 0.0) {
            return Err(Error::config(
                "weight_decay must be nonnegative and lr_drop_factor positive",
            ));
        }
        layer_configs(&self.sinkhorn, &self.sinkhorn_layers, layers)?;
        per_layer(&self.beta, layers, "beta")?;
        per_layer(&self.alpha, layers, "alpha")?;
        Ok(())
    }

    pub fn drop_epoch(&self) -> usize {
        self.lr_drop_epoch
            .unwrap_or_else(|| (self.epochs as f64 * 0.8).round() as usize)
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.drop_epoch() {
            self.learning_rate * self.lr_drop_factor
        } else {
            self.learning_rate
        }
    }
}

/// The five objective terms and their sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub proto: f64,
    pub commit: f64,
    pub pot: f64,
    pub ce: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn finish(mut self) -> Self {
        self.total = self.recon + self.proto + self.commit + self.pot + self.ce;
        self
    }

    fn add_scaled(&mut self, other: &LossBreakdown, w: f64) {
        self.recon += w * other.recon;
        self.proto += w * other.proto;
        self.commit += w * other.commit;
        self.pot += w * other.pot;
        self.ce += w * other.ce;
        self.total += w * other.total;
    }
}

/// Loss gradients at the model's outputs, plus codebook gradients for the
/// gradient-trained variant.
pub struct LossGrads {
    pub recon: Array2<f64>,
    pub fused: Vec<Array2<f64>>,
    pub top: Option<Array2<f64>>,
    pub logits: Array2<f64>,
    /// `[group][layer - 1]`, present only when codebooks learn by gradient.
    pub codebooks: Option<Vec<Vec<Array2<f64>>>>,
}

fn mean_sq_diff(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    let n = a.len().max(1) as f64;
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n
}

type Site<'a> = (&'a Array2<f64>, &'a Array2<f64>, &'a [usize], usize);

/// Evaluates the objective on a forward pass and its gradients.
pub fn compute_loss(
    model: &HvqTrans,
    fwd: &Forward,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, LossGrads)> {
    let mc = &model.config;
    let layers = mc.layers;
    let n = mc.tokens;
    if labels.len() != fwd.batch {
        return Err(Error::internal("one label per image is required"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= mc.classes) {
        return Err(Error::input(format!(
            "label {bad} outside [0, {})",
            mc.classes
        )));
    }
    let beta = per_layer(&cfg.beta, layers, "beta")?;
    let alpha = per_layer(&cfg.alpha, layers, "alpha")?;
    let grad_books = mc.vq && !cfg.ema;
    let mut out = LossBreakdown::default();

    let h0 = &fwd.hs[0];
    let numel = h0.len() as f64;
    out.recon = mean_sq_diff(h0.view(), fwd.recon.view());
    let drecon = (&fwd.recon - h0) * (2.0 / numel);

    let mut dfused: Vec<Array2<f64>> = (0..layers).map(|_| Array2::zeros(h0.raw_dim())).collect();
    let mut dtop = None;
    let mut dbooks: Option<Vec<Vec<Array2<f64>>>> = grad_books.then(|| {
        model
            .codebooks
            .iter()
            .map(|g| {
                g.iter()
                    .map(|b| Array2::zeros(b.entries().raw_dim()))
                    .collect()
            })
            .collect()
    });

    // (tokens, quantized, indices, layer) for each quantization site
    if mc.vq {
        let mut sites: Vec<Site> = Vec::new();
        if let Some(theta) = &fwd.theta {
            sites.push((&fwd.hs[layers], theta, &fwd.theta_indices, layers));
        }
        for l in 1..=layers {
            sites.push((
                &fwd.fused[l - 1],
                &fwd.quantized[l - 1],
                &fwd.indices[l - 1],
                l,
            ));
        }
        for (site, &(u, z, idx, l)) in sites.iter().enumerate() {
            let is_theta = fwd.theta.is_some() && site == 0;
            let d = mean_sq_diff(u.view(), z.view());
            out.proto += d;
            out.commit += beta[l - 1] * d;
            let g = (u - z) * (2.0 * beta[l - 1] / numel);
            if is_theta {
                dtop = Some(g);
            } else {
                dfused[l - 1] += &g;
            }
            if let Some(books) = dbooks.as_mut() {
                for (i, &k) in idx.iter().enumerate() {
                    let group = model.codebook_group(fwd.routes[i / n]);
                    let mut row = books[group][l - 1].row_mut(k);
                    row.scaled_add(2.0 / numel, &(&z.row(i) - &u.row(i)));
                }
            }
        }
        if cfg.pot {
            let solvers = layer_configs(&cfg.sinkhorn, &cfg.sinkhorn_layers, layers)?;
            let b = fwd.batch as f64;
            for l in 1..=layers {
                let u = &fwd.fused[l - 1];
                for (img, &m) in fwd.routes.iter().enumerate() {
                    let group = model.codebook_group(m);
                    let book = &model.codebooks[group][l - 1];
                    let tokens = u.slice(s![img * n..(img + 1) * n, ..]);
                    let cost = cost_matrix(tokens, book.entries().view())?;
                    let plan = sinkhorn(&cost, &solvers[l - 1])?;
                    out.pot += alpha[l - 1] * pot_loss(&plan) / b;
                    if let Some(books) = dbooks.as_mut() {
                        let g = pot_loss_grad_entries(&plan, tokens, book.entries().view());
                        books[group][l - 1].scaled_add(alpha[l - 1] / b, &g);
                    }
                }
            }
        }
    }

    let b = fwd.batch as f64;
    let mut dlogits = fwd.probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        out.ce -= fwd.probs[[i, y]].max(f64::MIN_POSITIVE).ln() / b;
        dlogits[[i, y]] -= 1.0;
    }
    dlogits /= b;

    Ok((
        out.finish(),
        LossGrads {
            recon: drecon,
            fused: dfused,
            top: dtop,
            logits: dlogits,
            codebooks: dbooks,
        },
    ))
}

/// Stacked backbone tokens of normal training images with class labels.
#[derive(Clone, Debug)]
pub struct TrainSet {
    /// `B·N × C`
    pub tokens: Array2<f64>,
    pub labels: Vec<usize>,
    pub tokens_per_image: usize,
}

impl TrainSet {
    pub fn new(tokens: Array2<f64>, labels: Vec<usize>, tokens_per_image: usize) -> Result<Self> {
        if tokens_per_image == 0 || tokens.nrows() != labels.len() * tokens_per_image {
            return Err(Error::config(
                "token rows do not match the number of labels",
            ));
        }
        Ok(TrainSet {
            tokens,
            labels,
            tokens_per_image,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn gather(&self, images: &[usize]) -> Array2<f64> {
        let n = self.tokens_per_image;
        let rows: Vec<usize> = images.iter().flat_map(|&i| i * n..(i + 1) * n).collect();
        self.tokens.select(Axis(0), &rows)
    }
}

/// One line of the per-epoch metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    /// Mean codebook perplexity per layer over the epoch's assignments.
    pub perplexity: Vec<f64>,
    pub dead_fraction: Vec<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct TrainState {
    pub epochs_done: usize,
    pub steps: u64,
}

fn stream_rng(seed: u64, stream: u64) -> Rng {
    let mut r = seeded_rng(seed);
    r.set_stream(stream);
    r
}

const SHUFFLE_STREAM: u64 = 1 << 40;
const INIT_STREAM: u64 = 1 << 41;
const RESTART_STREAM: u64 = 1 << 42;

/// Assignment counts per `[group][layer - 1]` codebook.
#[derive(Clone, Debug)]
pub struct UsageCounter {
    counts: Vec<Vec<Vec<usize>>>,
}

impl UsageCounter {
    pub fn new(model: &HvqTrans) -> Self {
        UsageCounter {
            counts: model
                .codebooks
                .iter()
                .map(|g| g.iter().map(|b| vec![0; b.size()]).collect())
                .collect(),
        }
    }

    pub fn record(&mut self, model: &HvqTrans, fwd: &Forward) {
        let n = model.config.tokens;
        let layers = model.config.layers;
        let mut add = |idx: &[usize], l: usize| {
            for (i, &k) in idx.iter().enumerate() {
                let g = model.codebook_group(fwd.routes[i / n]);
                self.counts[g][l - 1][k] += 1;
            }
        };
        add(&fwd.theta_indices, layers);
        for l in 1..=fwd.indices.len() {
            add(&fwd.indices[l - 1], l);
        }
    }

    /// Usage of every codebook that received at least one assignment.
    pub fn per_codebook(&self) -> Vec<Vec<Option<UsageStats>>> {
        self.counts
            .iter()
            .map(|g| {
                g.iter()
                    .map(|c| (c.iter().sum::<usize>() > 0).then(|| usage_from_counts(c)))
                    .collect()
            })
            .collect()
    }

    /// Per-layer mean over the groups that were used.
    pub fn per_layer(&self) -> Vec<UsageStats> {
        let books = self.per_codebook();
        let layers = books.first().map_or(0, |g| g.len());
        (0..layers)
            .map(|l| {
                let used: Vec<UsageStats> = books.iter().filter_map(|g| g[l]).collect();
                let k = used.len().max(1) as f64;
                UsageStats {
                    perplexity: used.iter().fold(0.0, |a, u| a + u.perplexity) / k,
                    dead_fraction: used.iter().fold(0.0, |a, u| a + u.dead_fraction) / k,
                }
            })
            .collect()
    }

    /// Mean dead fraction over all used codebooks.
    pub fn mean_dead_fraction(&self) -> f64 {
        let used: Vec<UsageStats> = self
            .per_codebook()
            .into_iter()
            .flatten()
            .flatten()
            .collect();
        used.iter().fold(0.0, |a, u| a + u.dead_fraction) / used.len().max(1) as f64
    }
}

/// One EMA update per codebook from every token quantized against it.
fn ema_step(model: &mut HvqTrans, fwd: &Forward) -> Result<()> {
    let n = model.config.tokens;
    let layers = model.config.layers;
    let groups = model.codebooks.len();
    for g in 0..groups {
        let images: Vec<usize> = (0..fwd.batch)
            .filter(|&b| model.codebook_group(fwd.routes[b]) == g)
            .collect();
        if images.is_empty() {
            continue;
        }
        let rows: Vec<usize> = images.iter().flat_map(|&b| b * n..(b + 1) * n).collect();
        for l in 1..=layers {
            let book = &model.codebooks[g][l - 1];
            let mut counts = Array1::zeros(book.size());
            let mut sums = Array2::zeros(book.entries().raw_dim());
            let mut sites: Vec<(&Array2<f64>, &[usize])> =
                vec![(&fwd.fused[l - 1], &fwd.indices[l - 1])];
            if l == layers && fwd.theta.is_some() {
                sites.push((&fwd.hs[layers], &fwd.theta_indices));
            }
            for (tokens, idx) in sites {
                let sel = tokens.select(Axis(0), &rows);
                let sel_idx: Vec<usize> = rows.iter().map(|&r| idx[r]).collect();
                let (c, s) = book.assignment_stats(sel.view(), &sel_idx)?;
                counts += &c;
                sums += &s;
            }
            model.codebooks[g][l - 1].ema_apply(&counts, &sums);
        }
    }
    Ok(())
}

fn restart_dead_codes(
    model: &mut HvqTrans,
    fwd: &Forward,
    threshold: f64,
    rng: &mut Rng,
) -> Result<()> {
    let n = model.config.tokens;
    for g in 0..model.codebooks.len() {
        let rows: Vec<usize> = (0..fwd.batch)
            .filter(|&b| model.codebook_group(fwd.routes[b]) == g)
            .flat_map(|b| b * n..(b + 1) * n)
            .collect();
        if rows.is_empty() {
            continue;
        }
        for l in 1..=model.config.layers {
            let tokens = fwd.fused[l - 1].select(Axis(0), &rows);
            model.codebooks[g][l - 1].restart_dead(tokens.view(), threshold, rng)?;
        }
    }
    Ok(())
}

/// Trainer state that survives between epochs.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub state: TrainState,
    optimizer: AdamW,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Self {
        let optimizer = AdamW::new(cfg.learning_rate, cfg.weight_decay);
        Trainer {
            cfg,
            state: TrainState::default(),
            optimizer,
        }
    }

    /// One optimization step on a batch of image indices.
    pub fn step(
        &mut self,
        model: &mut HvqTrans,
        data: &TrainSet,
        images: &[usize],
        lr: f64,
    ) -> Result<(LossBreakdown, Forward)> {
        let h0 = data.gather(images);
        let labels: Vec<usize> = images.iter().map(|&i| data.labels[i]).collect();
        let routes = self.cfg.teacher_force_switch.then_some(labels.as_slice());
        if model.config.vq {
            let mut rng = stream_rng(self.cfg.seed, INIT_STREAM + self.state.steps);
            model.init_codebooks(h0.view(), routes, &mut rng)?;
        }
        let mut ctx = Ctx::train(
            model.config.dropout,
            stream_rng(self.cfg.seed, self.state.steps),
        );
        let fwd = model.forward(h0.view(), routes, &mut ctx)?;
        let (loss, grads) = compute_loss(model, &fwd, &labels, &self.cfg)?;
        if !loss.total.is_finite() {
            return Err(Error::internal(format!(
                "loss became non-finite at step {}",
                self.state.steps
            )));
        }
        model.zero_grad();
        model.backward(
            &fwd,
            &grads.recon,
            &grads.fused,
            grads.top.as_ref(),
            &grads.logits,
        )?;
        if let Some(books) = &grads.codebooks {
            for (group, gb) in model.codebooks.iter_mut().zip(books) {
                for (book, g) in group.iter_mut().zip(gb) {
                    book.grad.assign(g);
                }
            }
        }

        self.optimizer.lr = lr;
        let train_books = model.config.vq && !self.cfg.ema;
        {
            let HvqTrans {
                encoder,
                decoder,
                hierarchy,
                switch,
                codebooks,
                ..
            } = model;
            let mut params = Vec::new();
            encoder.params_mut(&mut params);
            decoder.params_mut(&mut params);
            hierarchy.params_mut(&mut params);
            switch.params_mut(&mut params);
            let mut slots: Vec<(&mut Array2<f64>, &Array2<f64>)> = params
                .into_iter()
                .map(|p| (&mut p.value, &p.grad))
                .collect();
            if train_books {
                for book in codebooks.iter_mut().flatten() {
                    slots.push(book.entries_and_grad());
                }
            }
            self.optimizer.step(slots);
        }

        if model.config.vq && self.cfg.ema {
            ema_step(model, &fwd)?;
        }
        if let (true, Some(threshold)) = (model.config.vq, self.cfg.dead_code_threshold) {
            let mut rng = stream_rng(self.cfg.seed, RESTART_STREAM + self.state.steps);
            restart_dead_codes(model, &fwd, threshold, &mut rng)?;
        }
        self.state.steps += 1;
        Ok((loss, fwd))
    }

    /// Runs one epoch in a seeded shuffled order.
    pub fn epoch(&mut self, model: &mut HvqTrans, data: &TrainSet) -> Result<EpochRecord> {
        let epoch = self.state.epochs_done;
        let lr = self.cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut stream_rng(
            self.cfg.seed,
            SHUFFLE_STREAM + epoch as u64,
        ));
        let mut total = LossBreakdown::default();
        let mut usage = UsageCounter::new(model);
        for chunk in order.chunks(self.cfg.batch_size) {
            let (loss, fwd) = self.step(model, data, chunk, lr)?;
            total.add_scaled(&loss, chunk.len() as f64 / data.len() as f64);
            if model.config.vq {
                usage.record(model, &fwd);
            }
        }
        self.state.epochs_done += 1;
        let layers = usage.per_layer();
        Ok(EpochRecord {
            epoch,
            lr,
            loss: total,
            perplexity: layers.iter().map(|u| u.perplexity).collect(),
            dead_fraction: layers.iter().map(|u| u.dead_fraction).collect(),
        })
    }
}

/// Trains `model` in place for `cfg.epochs` epochs, handing each epoch
/// record to `on_epoch`.
pub fn train(
    model: &mut HvqTrans,
    data: &TrainSet,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainState> {
    cfg.validate(model.config.layers)?;
    if data.is_empty() {
        return Err(Error::input("training set is empty"));
    }
    if data.tokens_per_image != model.config.tokens || data.tokens.ncols() != model.config.width {
        return Err(Error::config(
            "training tokens do not match the model's token grid",
        ));
    }
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= model.config.classes) {
        return Err(Error::input(format!(
            "label {bad} outside [0, {})",
            model.config.classes
        )));
    }
    let mut trainer = Trainer::new(cfg.clone());
    for _ in 0..cfg.epochs {
        let record = trainer.epoch(model, data)?;
        log::info!(
            "epoch {} lr {:.2e} total {:.5} recon {:.5} ce {:.4}",
            record.epoch,
            record.lr,
            record.loss.total,
            record.loss.recon,
            record.loss.ce
        );
        on_epoch(&record);
    }
    Ok(trainer.state)
}

/// Codebook usage over a token set, in eval mode.
pub fn usage_over(
    model: &HvqTrans,
    tokens: ArrayView2<f64>,
    batch_images: usize,
) -> Result<UsageCounter> {
    let n = model.config.tokens;
    let mut usage = UsageCounter::new(model);
    if !model.config.vq {
        return Ok(usage);
    }
    let images = tokens.nrows() / n;
    let step = batch_images.max(1);
    for start in (0..images).step_by(step) {
        let end = (start + step).min(images);
        let fwd = model.forward(
            tokens.slice(s![start * n..end * n, ..]),
            None,
            &mut Ctx::eval(),
        )?;
        usage.record(model, &fwd);
    }
    Ok(usage)
}
