//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! The property checks (1 to 5) run in seconds. Criteria 6 to 12 share eight
//! desk-scale training runs on one synthetic corpus; set
//! `HVQ_ACCEPTANCE=fast` to skip them while iterating.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use hvq_core::codebook::{Codebook, DEFAULT_DECAY, DEFAULT_LAPLACE_EPS};
use hvq_core::config::RunConfig;
use hvq_core::data::{class_name, gen_synthetic, LabeledSample};
use hvq_core::hvq::HierarchyMode;
use hvq_core::model::{FrozenOffsets, HvqTrans, ModelConfig};
use hvq_core::nn::{seeded_rng, Ctx, Rng};
use hvq_core::pipeline::{evaluate, train_run, Checkpoint, EvalOptions, Report};
use hvq_core::pot::{sinkhorn, SinkhornConfig};
use hvq_core::scoring::auroc;
use hvq_core::training::{compute_loss, TrainConfig};
use hvq_core::transformer::{DecoderLayer, EncoderLayer, EncoderLayerCache};
use ndarray::{Array1, Array2, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

struct Verdict {
    id: u8,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn verdict(id: u8, name: &'static str, pass: bool, detail: String) -> Verdict {
    Verdict {
        id,
        name,
        pass,
        detail,
    }
}

fn randn(rows: usize, cols: usize, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

fn rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}

// ---------------------------------------------------------------- 1

fn sinkhorn_feasibility() -> Verdict {
    let mut rng = seeded_rng(101);
    let cfg = SinkhornConfig::default();
    let (mut worst, mut slowest, mut largest) = (0.0f64, Duration::ZERO, (0, 0));
    let mut failures = 0;
    for trial in 0..50 {
        // the first few trials pin the largest size; the rest are random
        let (n, k) = if trial < 5 {
            (196, 512)
        } else {
            (rng.random_range(1..=196), rng.random_range(1..=512))
        };
        // uniform entries, or distances between Gaussian clouds scaled into [0, 1]
        let cost = if trial % 2 == 0 {
            let (x, y) = (randn(n, 8, &mut rng), randn(k, 8, &mut rng));
            let c = hvq_core::pot::cost_matrix(x.view(), y.view()).unwrap();
            let max = c.iter().cloned().fold(0.0, f64::max).max(1e-12);
            c / max
        } else {
            Array2::from_shape_simple_fn((n, k), || rng.random_range(0.0..1.0))
        };
        let start = Instant::now();
        let plan = sinkhorn(&cost, &cfg).unwrap();
        let took = start.elapsed();
        let rows = plan.plan.sum_axis(Axis(1));
        let cols = plan.plan.sum_axis(Axis(0));
        let dev = rows
            .iter()
            .map(|r| (r - 1.0 / n as f64).abs())
            .chain(cols.iter().map(|c| (c - 1.0 / k as f64).abs()))
            .fold(0.0, f64::max);
        if dev > 1e-6 || took.as_secs_f64() >= 0.5 {
            failures += 1;
        }
        worst = worst.max(dev);
        if took > slowest {
            slowest = took;
            largest = (n, k);
        }
    }
    verdict(
        1,
        "Sinkhorn feasibility",
        failures == 0,
        format!(
            "50 solves, max marginal deviation {worst:.2e}, slowest {:.3}s at {}x{}",
            slowest.as_secs_f64(),
            largest.0,
            largest.1
        ),
    )
}

// ---------------------------------------------------------------- 2

/// Exact transport cost with uniform marginals. Scaling the marginals by
/// `lcm(N, K)` makes them integral; the polytope is integral, so the optimum
/// sits on an integer table, and all integer tables are enumerated.
fn lp_oracle(cost: &Array2<f64>) -> f64 {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    let (n, k) = cost.dim();
    let total = n * k / gcd(n, k);
    let row = total / n;
    let mut cols = vec![total / k; k];
    let mut best = f64::INFINITY;

    fn fill_row(
        cost: &Array2<f64>,
        i: usize,
        j: usize,
        left: usize,
        cols: &mut [usize],
        row: usize,
        acc: f64,
        best: &mut f64,
    ) {
        let (n, k) = cost.dim();
        if j == k - 1 {
            if left > cols[j] {
                return;
            }
            cols[j] -= left;
            let acc = acc + left as f64 * cost[[i, j]];
            if i == n - 1 {
                *best = best.min(acc);
            } else {
                fill_row(cost, i + 1, 0, row, cols, row, acc, best);
            }
            cols[j] += left;
            return;
        }
        for x in 0..=left.min(cols[j]) {
            cols[j] -= x;
            fill_row(
                cost,
                i,
                j + 1,
                left - x,
                cols,
                row,
                acc + x as f64 * cost[[i, j]],
                best,
            );
            cols[j] += x;
        }
    }
    fill_row(cost, 0, 0, row, &mut cols, row, 0.0, &mut best);
    best / total as f64
}

fn ot_oracle() -> Verdict {
    let mut rng = seeded_rng(202);
    let cfg = SinkhornConfig {
        epsilon: 0.005,
        max_iter: 20_000,
        tol: 1e-10,
    };
    let mut worst = 0.0f64;
    let mut cases = 0;
    for n in 1..=4 {
        for k in 1..=4 {
            for _ in 0..100 {
                let cost = Array2::from_shape_simple_fn((n, k), || rng.random_range(0.0..1.0));
                let exact = lp_oracle(&cost);
                let got = sinkhorn(&cost, &cfg).unwrap().transport_cost();
                // absolute floor for optima that are essentially zero
                let err = (got - exact).abs() / exact.max(1e-3);
                worst = worst.max(err);
                cases += 1;
            }
        }
    }
    verdict(
        2,
        "OT oracle equivalence",
        worst <= 0.02,
        format!(
            "{cases} costs over all N, K <= 4, worst relative gap {:.3}%",
            100.0 * worst
        ),
    )
}

// ---------------------------------------------------------------- 3

fn toy_model(mode: HierarchyMode) -> HvqTrans {
    let config = ModelConfig {
        tokens: 3,
        width: 8,
        layers: 2,
        heads: 2,
        ffn_mult: 2,
        codebook_size: 5,
        classes: 2,
        hierarchy: mode,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let mut model = HvqTrans::new(config, 9).unwrap();
    let mut rng = seeded_rng(10);
    let h0 = randn(6, 8, &mut rng);
    model
        .init_codebooks(h0.view(), Some(&[0, 1]), &mut rng)
        .unwrap();
    model
}

/// Analytic gradients of the training loss (commitment off) against central
/// differences of the pass with frozen quantization offsets, whose exact
/// derivative is the straight-through one.
fn straight_through_rel_err(mode: HierarchyMode) -> f64 {
    let mut model = toy_model(mode);
    let mut rng = seeded_rng(11);
    let h0 = randn(6, 8, &mut rng);
    let labels = [0usize, 1];
    let cfg = TrainConfig {
        beta: vec![0.0],
        pot: false,
        ..TrainConfig::default()
    };
    let fwd = model.forward(h0.view(), None, &mut Ctx::eval()).unwrap();
    let offsets = FrozenOffsets::from_forward(&fwd);
    let (_, grads) = compute_loss(&model, &fwd, &labels, &cfg).unwrap();
    model.zero_grad();
    model
        .backward(
            &fwd,
            &grads.recon,
            &grads.fused,
            grads.top.as_ref(),
            &grads.logits,
        )
        .unwrap();
    let analytic: Vec<Array2<f64>> = model
        .params_mut()
        .into_iter()
        .map(|p| p.grad.clone())
        .collect();

    let loss_at = |m: &HvqTrans| {
        let f = m
            .forward_frozen(h0.view(), Some(&fwd.routes), &mut Ctx::eval(), &offsets)
            .unwrap();
        compute_loss(m, &f, &labels, &cfg).unwrap().0.total
    };
    let h = 1e-5;
    let mut numeric = Vec::new();
    for p in 0..analytic.len() {
        let shape = analytic[p].raw_dim();
        let mut g = Array2::zeros(shape);
        for idx in 0..analytic[p].len() {
            let (r, c) = (idx / analytic[p].ncols(), idx % analytic[p].ncols());
            let orig = model.params_mut()[p].value[[r, c]];
            model.params_mut()[p].value[[r, c]] = orig + h;
            let up = loss_at(&model);
            model.params_mut()[p].value[[r, c]] = orig - h;
            let down = loss_at(&model);
            model.params_mut()[p].value[[r, c]] = orig;
            g[[r, c]] = (up - down) / (2.0 * h);
        }
        numeric.push(g);
    }
    rel_err(&flatten(&analytic), &flatten(&numeric))
}

fn layer_rel_errs() -> (f64, f64) {
    let mut rng = seeded_rng(12);
    let n = 3;
    let x = randn(2 * n, 8, &mut rng);
    let probe = randn(2 * n, 8, &mut rng);
    let h = 1e-5;

    let mut enc = EncoderLayer::new(8, 2, 16, &mut rng);
    let (_, cache): (_, EncoderLayerCache) = enc.forward(x.view(), n, &mut Ctx::eval());
    let mut params = Vec::new();
    enc.params_mut(&mut params);
    params.iter_mut().for_each(|p| p.zero_grad());
    let dx = enc.backward(&cache, probe.view());
    let enc_loss = |e: &EncoderLayer, x: &Array2<f64>| {
        (&e.forward(x.view(), n, &mut Ctx::eval()).0 * &probe).sum()
    };
    let mut num_dx = Array2::zeros(x.raw_dim());
    for idx in 0..x.len() {
        let (r, c) = (idx / 8, idx % 8);
        let mut xp = x.clone();
        xp[[r, c]] += h;
        let up = enc_loss(&enc, &xp);
        xp[[r, c]] -= 2.0 * h;
        let down = enc_loss(&enc, &xp);
        num_dx[[r, c]] = (up - down) / (2.0 * h);
    }
    let enc_err = rel_err(&dx, &num_dx).max(param_fd_err(&mut enc, |e| enc_loss(e, &x)));

    let mut dec = DecoderLayer::new(8, 2, 16, &mut rng);
    let z = randn(2 * n, 8, &mut rng);
    let pos = randn(2 * n, 8, &mut rng);
    let (_, cache) = dec.forward(x.view(), z.view(), pos.view(), n, &mut Ctx::eval());
    let mut params = Vec::new();
    dec.params_mut(&mut params);
    params.iter_mut().for_each(|p| p.zero_grad());
    let (dd, dz, _) = dec.backward(&cache, probe.view());
    let dec_loss = |d: &DecoderLayer, x: &Array2<f64>, z: &Array2<f64>| {
        (&d.forward(x.view(), z.view(), pos.view(), n, &mut Ctx::eval())
            .0
            * &probe)
            .sum()
    };
    let mut num_dd = Array2::zeros(x.raw_dim());
    let mut num_dz = Array2::zeros(z.raw_dim());
    for idx in 0..x.len() {
        let (r, c) = (idx / 8, idx % 8);
        let mut xp = x.clone();
        xp[[r, c]] += h;
        let up = dec_loss(&dec, &xp, &z);
        xp[[r, c]] -= 2.0 * h;
        num_dd[[r, c]] = (up - dec_loss(&dec, &xp, &z)) / (2.0 * h);
        let mut zp = z.clone();
        zp[[r, c]] += h;
        let up = dec_loss(&dec, &x, &zp);
        zp[[r, c]] -= 2.0 * h;
        num_dz[[r, c]] = (up - dec_loss(&dec, &x, &zp)) / (2.0 * h);
    }
    let dec_err = rel_err(&dd, &num_dd)
        .max(rel_err(&dz, &num_dz))
        .max(param_fd_err(&mut dec, |d| dec_loss(d, &x, &z)));
    (enc_err, dec_err)
}

trait HasParams {
    fn params(&mut self) -> Vec<&mut hvq_core::nn::Param>;
}

impl HasParams for EncoderLayer {
    fn params(&mut self) -> Vec<&mut hvq_core::nn::Param> {
        let mut v = Vec::new();
        self.params_mut(&mut v);
        v
    }
}

impl HasParams for DecoderLayer {
    fn params(&mut self) -> Vec<&mut hvq_core::nn::Param> {
        let mut v = Vec::new();
        self.params_mut(&mut v);
        v
    }
}

/// Compares all accumulated parameter gradients, flattened into one vector,
/// with central differences. Some entries are exactly zero (key biases under
/// softmax), so a per-tensor ratio would be meaningless.
fn param_fd_err<L: HasParams>(layer: &mut L, loss: impl Fn(&L) -> f64) -> f64 {
    let h = 1e-5;
    let analytic: Vec<Array2<f64>> = layer.params().into_iter().map(|p| p.grad.clone()).collect();
    let mut numeric = Vec::new();
    for (p, a) in analytic.iter().enumerate() {
        let mut g = Array2::zeros(a.raw_dim());
        for idx in 0..a.len() {
            let (r, c) = (idx / a.ncols(), idx % a.ncols());
            let orig = layer.params()[p].value[[r, c]];
            layer.params()[p].value[[r, c]] = orig + h;
            let up = loss(layer);
            layer.params()[p].value[[r, c]] = orig - h;
            let down = loss(layer);
            layer.params()[p].value[[r, c]] = orig;
            g[[r, c]] = (up - down) / (2.0 * h);
        }
        numeric.push(g);
    }
    rel_err(&flatten(&analytic), &flatten(&numeric))
}

fn flatten(v: &[Array2<f64>]) -> Array2<f64> {
    let data: Vec<f64> = v.iter().flat_map(|a| a.iter().copied()).collect();
    Array2::from_shape_vec((1, data.len()), data).unwrap()
}

fn straight_through() -> Verdict {
    let mut parts = Vec::new();
    let mut worst = 0.0f64;
    for mode in HierarchyMode::ALL {
        let e = straight_through_rel_err(mode);
        worst = worst.max(e);
        parts.push(format!("{mode} {e:.1e}"));
    }
    let (enc, dec) = layer_rel_errs();
    worst = worst.max(enc).max(dec);
    parts.push(format!("encoder layer {enc:.1e}"));
    parts.push(format!("decoder layer {dec:.1e}"));
    verdict(
        3,
        "Straight-through gradient identity",
        worst <= 1e-4,
        parts.join(", "),
    )
}

// ---------------------------------------------------------------- 4

fn ema_closed_form() -> Verdict {
    let mut rng = seeded_rng(404);
    let mut worst = 0.0f64;
    for case in 0..50 {
        let k = rng.random_range(1..=8);
        let c = rng.random_range(1..=6);
        let decay = rng.random_range(0.5..0.999);
        let eps = 10f64.powf(rng.random_range(-6.0..-1.0));
        let mut book = Codebook::new(k, c, 0, 1, decay, eps, &mut rng).unwrap();
        let init = randn(k, c, &mut rng);
        book.init_from_tokens(init.view(), &mut rng).unwrap();
        // reference state: init picks K rows, sums start at the entries, sizes at one
        let mut sums = book.entries().clone();
        let mut sizes = Array1::<f64>::ones(k);
        for _ in 0..1 + case % 5 {
            let n = rng.random_range(0..=10);
            let tokens = randn(n, c, &mut rng);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            book.ema_update(tokens.view(), &idx).unwrap();
            let mut counts = Array1::<f64>::zeros(k);
            let mut batch = Array2::<f64>::zeros((k, c));
            for (t, &j) in tokens.rows().into_iter().zip(&idx) {
                counts[j] += 1.0;
                let mut row = batch.row_mut(j);
                row += &t;
            }
            sizes = &sizes * decay + &(&counts * (1.0 - decay));
            sums = &sums * decay + &(&batch * (1.0 - decay));
            let total = sizes.sum();
            let mut expected = Array2::<f64>::zeros((k, c));
            for j in 0..k {
                let smoothed = (sizes[j] + eps) / (total + k as f64 * eps) * total;
                expected.row_mut(j).assign(&(&sums.row(j) / smoothed));
            }
            let diff = (&expected - book.entries())
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            worst = worst.max(diff);
        }
    }
    let decay_check = DEFAULT_DECAY == 0.99 && DEFAULT_LAPLACE_EPS == 1e-5;
    verdict(
        4,
        "EMA closed form",
        worst <= 1e-10 && decay_check,
        format!("50 randomized codebooks, max deviation {worst:.1e}"),
    )
}

// ---------------------------------------------------------------- 5

fn auroc_oracle() -> Verdict {
    let mut rng = seeded_rng(505);
    let mut mismatches = 0;
    let mut done = 0;
    while done < 100 {
        let n = rng.random_range(2..=100);
        // few distinct values so ties are common
        let levels = rng.random_range(1..=10);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        let (pos, neg) = (
            labels.iter().filter(|&&l| l).count(),
            labels.iter().filter(|&&l| !l).count(),
        );
        if pos == 0 || neg == 0 {
            continue;
        }
        let mut twice = 0u64;
        for (si, &li) in scores.iter().zip(&labels) {
            for (sj, &lj) in scores.iter().zip(&labels) {
                if li && !lj {
                    twice += if si > sj {
                        2
                    } else if si == sj {
                        1
                    } else {
                        0
                    };
                }
            }
        }
        let pairwise = twice as f64 / (2 * pos * neg) as f64;
        if auroc(&scores, &labels).unwrap() != pairwise {
            mismatches += 1;
        }
        done += 1;
    }
    verdict(
        5,
        "AUROC oracle",
        mismatches == 0,
        format!("100 tied instances, {mismatches} mismatches"),
    )
}

// ---------------------------------------------------------------- desk-scale runs

/// Desk-scale setting shared by every training criterion.
fn desk() -> RunConfig {
    let mut run = RunConfig::default();
    run.data.classes = 3;
    run.data.per_class = 200;
    run.data.image = (64, 64);
    run.model.width = 32;
    run.train.epochs = 100;
    run.train.learning_rate = 1e-3;
    run
}

struct Outcome {
    ckpt: Checkpoint,
    report: Report,
    seconds: f64,
}

struct Corpus {
    names: Vec<String>,
    train: Vec<LabeledSample>,
    test: Vec<LabeledSample>,
}

fn execute(label: &str, run: &RunConfig, corpus: &Corpus) -> Outcome {
    let start = Instant::now();
    let ckpt = train_run(run, &corpus.names, &corpus.train, |_| {}).unwrap();
    let (report, _) = evaluate(&ckpt, &corpus.test, &EvalOptions::from(&ckpt.run.eval)).unwrap();
    let seconds = start.elapsed().as_secs_f64();
    eprintln!(
        "  run {label:<10} {:>7.1}s  det/loc {}  dead {:.3}",
        seconds, report.mean, ckpt.train_dead_fraction
    );
    Outcome {
        ckpt,
        report,
        seconds,
    }
}

fn desk_runs(out: &mut Vec<Verdict>) {
    let base = desk();
    let (train, test) = gen_synthetic(&base.data).unwrap();
    let corpus = Corpus {
        names: (0..base.data.classes).map(class_name).collect(),
        train,
        test,
    };
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut r = base.clone();
        f(&mut r);
        r
    };

    let full = execute("full", &base, &corpus);
    let repeat = execute("repeat", &base, &corpus);
    let no_vq = execute(
        "no-vq",
        &with(&|r| {
            r.model.vq = false;
            r.train.pot = false;
            r.eval.pot = false;
        }),
        &corpus,
    );
    let adjacent = execute(
        "adjacent",
        &with(&|r| r.model.hierarchy = HierarchyMode::Adjacent),
        &corpus,
    );
    let plain = execute(
        "plain",
        &with(&|r| r.model.hierarchy = HierarchyMode::Plain),
        &corpus,
    );
    let k64 = execute("K=64", &with(&|r| r.model.codebook_size = 64), &corpus);
    let k256 = execute("K=256", &with(&|r| r.model.codebook_size = 256), &corpus);
    let single = execute(
        "single",
        &with(&|r| {
            r.model.codebook_size *= r.model.layers;
            r.model.layers = 1;
            r.model.hierarchy = HierarchyMode::Plain;
        }),
        &corpus,
    );

    // 6
    let (img, px) = (
        full.report.mean_image_auroc,
        full.report.mean_pixel_auroc.unwrap_or(0.0),
    );
    out.push(verdict(
        6,
        "End-to-end desk-scale run",
        img >= 0.90 && px >= 0.85 && full.seconds <= 1800.0,
        format!(
            "image {img:.3}, pixel {px:.3}, {:.0}s train+eval",
            full.seconds
        ),
    ));

    // 7
    let gap = img - no_vq.report.mean_image_auroc;
    out.push(verdict(
        7,
        "VQ ablation direction",
        gap >= 0.10,
        format!(
            "with VQ {img:.3}, without {:.3}, gap {gap:.3}",
            no_vq.report.mean_image_auroc
        ),
    ));

    // 8
    let (g, a, p) = (
        img,
        adjacent.report.mean_image_auroc,
        plain.report.mean_image_auroc,
    );
    out.push(verdict(
        8,
        "Hierarchy ordering",
        g >= a - 0.01 && a >= p - 0.01,
        format!("global {g:.3}, adjacent {a:.3}, plain {p:.3}"),
    ));

    // 9
    let ks = [
        k64.report.mean_image_auroc,
        img,
        k256.report.mean_image_auroc,
    ];
    let spread =
        ks.iter().cloned().fold(f64::MIN, f64::max) - ks.iter().cloned().fold(f64::MAX, f64::min);
    out.push(verdict(
        9,
        "Prototype-count robustness",
        spread <= 0.03,
        format!(
            "K=64 {:.3}, K=128 {:.3}, K=256 {:.3}, spread {spread:.3}",
            ks[0], ks[1], ks[2]
        ),
    ));

    // 10
    let mut off = EvalOptions::from(&full.ckpt.run.eval);
    off.pot = false;
    let (without, _) = evaluate(&full.ckpt, &corpus.test, &off).unwrap();
    let delta = img - without.mean_image_auroc;
    let means = full.report.pot_patch_means.clone();
    let ordered = means.as_ref().is_some_and(|m| m.anomalous > m.normal);
    out.push(verdict(
        10,
        "POT calibration non-harm",
        delta >= -0.01 && ordered,
        match means {
            Some(m) => format!(
                "AUROC change {delta:+.4}, POT patch mean anomalous {:.4} vs normal {:.4}",
                m.anomalous, m.normal
            ),
            None => format!("AUROC change {delta:+.4}, no POT patch statistics"),
        },
    ));

    // 11
    let (hier, one) = (
        full.ckpt.train_dead_fraction,
        single.ckpt.train_dead_fraction,
    );
    out.push(verdict(
        11,
        "Collapse diagnostic",
        hier < one,
        format!(
            "dead fraction hierarchical {hier:.3}, single layer of K={} {one:.3}",
            single.ckpt.model.config.codebook_size
        ),
    ));

    // 12
    let same_report = full.report.to_json().unwrap() == repeat.report.to_json().unwrap();
    let same_model =
        serde_json::to_string(&full.ckpt).unwrap() == serde_json::to_string(&repeat.ckpt).unwrap();
    out.push(verdict(
        12,
        "Determinism",
        same_report && same_model,
        format!("reports identical: {same_report}, checkpoints identical: {same_model}"),
    ));
}

fn main() -> ExitCode {
    let fast = std::env::var("HVQ_ACCEPTANCE").is_ok_and(|v| v == "fast");
    let start = Instant::now();
    let mut verdicts = vec![
        sinkhorn_feasibility(),
        ot_oracle(),
        straight_through(),
        ema_closed_form(),
        auroc_oracle(),
    ];
    if !fast {
        desk_runs(&mut verdicts);
    }
    for v in &verdicts {
        println!(
            "{} criterion {:>2} {}: {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.id,
            v.name,
            v.detail
        );
    }
    let failed = verdicts.iter().filter(|v| !v.pass).count();
    println!(
        "{} of {} criteria passed in {:.0}s",
        verdicts.len() - failed,
        verdicts.len(),
        start.elapsed().as_secs_f64()
    );
    // red criteria are reported, not hidden; strict mode turns them into a failing exit
    let strict = std::env::var("HVQ_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if failed == 0 || !strict {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
