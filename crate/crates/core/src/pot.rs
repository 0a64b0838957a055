//! Entropic optimal transport between image tokens and codebook prototypes.
//!
//! Tokens carry uniform mass `1/N`, prototypes uniform mass `1/K`. The
//! solver keeps dual potentials in the log domain and runs cheap scaling
//! iterations on top of an absorbed kernel, folding the scalings back into
//! the potentials whenever they drift out of a safe range.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            epsilon: 0.05,
            max_iter: 100,
            tol: 1e-6,
        }
    }
}

/// One solver setting per layer: `overrides` when given (exactly one per
/// layer), otherwise `base` everywhere.
pub fn layer_configs(
    base: &SinkhornConfig,
    overrides: &[SinkhornConfig],
    layers: usize,
) -> Result<Vec<SinkhornConfig>> {
    let cfgs = match overrides.len() {
        0 => vec![*base; layers],
        n if n == layers => overrides.to_vec(),
        n => {
            return Err(Error::config(format!(
                "sinkhorn_layers has {n} entries for {layers} layers"
            )))
        }
    };
    for c in &cfgs {
        if !(c.epsilon > 0.0 && c.epsilon.is_finite() && c.tol >= 0.0) {
            return Err(Error::config(format!(
                "sinkhorn settings need epsilon > 0 and tol >= 0, got {c:?}"
            )));
        }
    }
    Ok(cfgs)
}

/// Coupling between `N` tokens and `K` prototypes.
#[derive(Clone, Debug)]
pub struct TransportPlan {
    pub plan: Array2<f64>,
    pub cost: Array2<f64>,
    pub epsilon: f64,
    pub iterations_used: usize,
    pub converged: bool,
}

impl TransportPlan {
    /// `⟨M, C⟩`.
    pub fn transport_cost(&self) -> f64 {
        (&self.plan * &self.cost).sum()
    }

    /// Largest absolute deviation of either marginal from uniform.
    pub fn marginal_violation(&self) -> f64 {
        marginal_violation(&self.plan)
    }
}

fn marginal_violation(plan: &Array2<f64>) -> f64 {
    let (n, k) = plan.dim();
    let a = 1.0 / n as f64;
    let b = 1.0 / k as f64;
    let rows = plan
        .sum_axis(Axis(1))
        .iter()
        .fold(0.0f64, |m, &r| m.max((r - a).abs()));
    let cols = plan
        .sum_axis(Axis(0))
        .iter()
        .fold(0.0f64, |m, &c| m.max((c - b).abs()));
    rows.max(cols)
}

/// Euclidean distances `C[i, j] = ‖tokens_i − entries_j‖₂`.
pub fn cost_matrix(tokens: ArrayView2<f64>, entries: ArrayView2<f64>) -> Result<Array2<f64>> {
    if tokens.ncols() != entries.ncols() {
        return Err(Error::config(format!(
            "token width {} does not match prototype width {}",
            tokens.ncols(),
            entries.ncols()
        )));
    }
    if tokens.iter().chain(entries.iter()).any(|v| !v.is_finite()) {
        return Err(Error::input("cost inputs must be finite"));
    }
    let mut cost = Array2::zeros((tokens.nrows(), entries.nrows()));
    for (mut out, t) in cost.rows_mut().into_iter().zip(tokens.rows()) {
        for (c, e) in out.iter_mut().zip(entries.rows()) {
            *c = t
                .iter()
                .zip(e.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
        }
    }
    Ok(cost)
}

fn log_sum_exp<I: Iterator<Item = f64> + Clone>(it: I) -> f64 {
    let max = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + it.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Exact log-domain half steps: potentials `f` then `g`.
fn log_domain_step(f: &mut Array1<f64>, g: &mut Array1<f64>, cost: &Array2<f64>, eps: f64) {
    let (n, k) = cost.dim();
    let ln_a = -(n as f64).ln();
    let ln_b = -(k as f64).ln();
    for (i, fi) in f.iter_mut().enumerate() {
        let row = cost.row(i);
        let lse = log_sum_exp(row.iter().zip(g.iter()).map(|(&c, &gj)| (gj - c) / eps));
        *fi = eps * (ln_a - lse);
    }
    for (j, gj) in g.iter_mut().enumerate() {
        let col = cost.column(j);
        let lse = log_sum_exp(col.iter().zip(f.iter()).map(|(&c, &fi)| (fi - c) / eps));
        *gj = eps * (ln_b - lse);
    }
}

fn absorbed_kernel(f: &Array1<f64>, g: &Array1<f64>, cost: &Array2<f64>, eps: f64) -> Array2<f64> {
    let mut kernel = cost.clone();
    for (mut row, &fi) in kernel.rows_mut().into_iter().zip(f.iter()) {
        for (c, &gj) in row.iter_mut().zip(g.iter()) {
            *c = ((fi + gj - *c) / eps).exp();
        }
    }
    kernel
}

const SCALING_BOUND: f64 = 1e8;

fn out_of_range(v: &Array1<f64>) -> bool {
    v.iter()
        .any(|&x| !(x.is_finite() && x < SCALING_BOUND && x > 1.0 / SCALING_BOUND))
}

/// Entropy-regularized transport with uniform marginals.
///
/// Approximately minimizes `⟨M, C⟩ + ε Σ M ln M` subject to row sums `1/N`
/// and column sums `1/K`. Stops once the largest marginal violation drops
/// below `tol` or after `max_iter` iterations; running out of iterations
/// only clears the `converged` flag.
pub fn sinkhorn(cost: &Array2<f64>, cfg: &SinkhornConfig) -> Result<TransportPlan> {
    let eps = cfg.epsilon;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::config(format!(
            "epsilon must be positive, got {eps}"
        )));
    }
    let (n, k) = cost.dim();
    if n == 0 || k == 0 {
        return Err(Error::config("cost matrix must be non-empty"));
    }
    if cost.iter().any(|&c| !c.is_finite() || c < 0.0) {
        return Err(Error::input("cost matrix must be finite and nonnegative"));
    }
    let a = 1.0 / n as f64;
    let b = 1.0 / k as f64;
    let mut f = Array1::zeros(n);
    let mut g = Array1::zeros(k);
    log_domain_step(&mut f, &mut g, cost, eps);
    let mut kernel = absorbed_kernel(&f, &g, cost, eps);
    let mut u = Array1::<f64>::ones(n);
    let mut v = Array1::<f64>::ones(k);
    let mut iterations = 1;
    let max_iter = cfg.max_iter.max(1);
    while iterations < max_iter {
        let kv = kernel.dot(&v);
        let row_err = u
            .iter()
            .zip(kv.iter())
            .fold(0.0f64, |m, (&ui, &s)| m.max((ui * s - a).abs()));
        if row_err < cfg.tol {
            break;
        }
        u = kv.mapv(|s| a / s);
        v = kernel.t().dot(&u).mapv(|s| b / s);
        iterations += 1;
        if out_of_range(&u) || out_of_range(&v) {
            let ok = u.iter().chain(v.iter()).all(|&x| x.is_finite() && x > 0.0);
            if ok {
                f.zip_mut_with(&u, |fi, &ui| *fi += eps * ui.ln());
                g.zip_mut_with(&v, |gj, &vj| *gj += eps * vj.ln());
            } else {
                log_domain_step(&mut f, &mut g, cost, eps);
            }
            kernel = absorbed_kernel(&f, &g, cost, eps);
            u.fill(1.0);
            v.fill(1.0);
        }
    }
    let mut plan = kernel;
    for (mut row, &ui) in plan.rows_mut().into_iter().zip(u.iter()) {
        row.zip_mut_with(&v, |m, &vj| *m *= ui * vj);
    }
    let converged = marginal_violation(&plan) < cfg.tol;
    Ok(TransportPlan {
        plan,
        cost: cost.clone(),
        epsilon: eps,
        iterations_used: iterations,
        converged,
    })
}

/// `Σ M C + Σ M ln M` with `0 ln 0 = 0` (entropy term unweighted).
pub fn pot_loss(plan: &TransportPlan) -> f64 {
    plan.plan
        .iter()
        .zip(plan.cost.iter())
        .map(|(&m, &c)| m * c + if m > 0.0 { m * m.ln() } else { 0.0 })
        .sum()
}

/// Per-token transport cost `s_i = Σ_j M_ij C_ij`.
pub fn pot_score(plan: &TransportPlan) -> Array1<f64> {
    (&plan.plan * &plan.cost).sum_axis(Axis(1))
}

/// Gradient of [`pot_loss`] with respect to the prototypes, treating the
/// plan as a constant: `∂/∂e_j = Σ_i M_ij (e_j − t_i) / C_ij`.
pub fn pot_loss_grad_entries(
    plan: &TransportPlan,
    tokens: ArrayView2<f64>,
    entries: ArrayView2<f64>,
) -> Array2<f64> {
    let mut grad = Array2::zeros(entries.raw_dim());
    for (i, t) in tokens.rows().into_iter().enumerate() {
        for (j, (e, mut gj)) in entries.rows().into_iter().zip(grad.rows_mut()).enumerate() {
            let c = plan.cost[[i, j]];
            if c > 0.0 {
                let w = plan.plan[[i, j]] / c;
                gj.zip_mut_with(&(&e - &t), |g, &d| *g += w * d);
            }
        }
    }
    grad
}
