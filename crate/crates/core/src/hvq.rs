//! Hierarchical quantization: the top encoder level is quantized into a
//! global grid `θ`, then each level `l` fuses lower-level tokens with `θ`
//! through `Υˡ` and quantizes the result into `zˡ`.
//!
//! Quantization is non-differentiable; backward passes copy the gradient
//! arriving at `zˡ` (or `θ`) straight onto the pre-quantization tokens.

use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::codebook::{Codebook, QuantizationResult};
use crate::error::{Error, Result};
use crate::nn::{Linear, Param, Rng};
use crate::TokenGrid;

/// Which signal is fused into each quantization level.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HierarchyMode {
    /// `hˡ → zˡ`
    Plain,
    /// `hˡ⁻¹ ⊕ hˡ → zˡ`
    Adjacent,
    /// `hˡ⁻¹ ⊕ θ → zˡ`
    #[default]
    Global,
}

impl HierarchyMode {
    pub const ALL: [HierarchyMode; 3] = [
        HierarchyMode::Plain,
        HierarchyMode::Adjacent,
        HierarchyMode::Global,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            HierarchyMode::Plain => "plain",
            HierarchyMode::Adjacent => "adjacent",
            HierarchyMode::Global => "global",
        }
    }

    /// Input width of `Υˡ` for token width `c`.
    pub fn fusion_width(self, c: usize) -> usize {
        match self {
            HierarchyMode::Plain => c,
            HierarchyMode::Adjacent | HierarchyMode::Global => 2 * c,
        }
    }

    pub fn uses_theta(self) -> bool {
        self == HierarchyMode::Global
    }
}

impl fmt::Display for HierarchyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HierarchyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(HierarchyMode::Plain),
            "adjacent" => Ok(HierarchyMode::Adjacent),
            "global" => Ok(HierarchyMode::Global),
            other => Err(Error::config(format!(
                "unknown hierarchy mode `{other}` (expected plain, adjacent or global)"
            ))),
        }
    }
}

/// Mode plus the per-level fusion maps `Υ¹ … Υᴸ` (`fusion[l - 1]` is `Υˡ`).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HierarchyConfig {
    pub mode: HierarchyMode,
    pub fusion: Vec<Linear>,
}

impl HierarchyConfig {
    pub fn new(layers: usize, width: usize, mode: HierarchyMode, rng: &mut Rng) -> Self {
        let fusion = (0..layers)
            .map(|_| Linear::new(mode.fusion_width(width), width, rng))
            .collect();
        HierarchyConfig { mode, fusion }
    }

    pub fn layers(&self) -> usize {
        self.fusion.len()
    }

    pub fn validate(&self, width: usize) -> Result<()> {
        for (l, f) in self.fusion.iter().enumerate() {
            if f.in_dim() != self.mode.fusion_width(width) || f.out_dim() != width {
                return Err(Error::config(format!(
                    "fusion map {} is {}→{}, mode {} needs {}→{}",
                    l + 1,
                    f.in_dim(),
                    f.out_dim(),
                    self.mode,
                    self.mode.fusion_width(width),
                    width
                )));
            }
        }
        Ok(())
    }

    /// Concatenated input to `Υˡ` (`layer` is 1-based). `hs` holds
    /// `[h⁰, h¹, …, hᴸ]`; `theta` is required in global mode.
    pub fn fusion_input(
        &self,
        layer: usize,
        hs: &[ArrayView2<f64>],
        theta: Option<ArrayView2<f64>>,
    ) -> Result<Array2<f64>> {
        if layer == 0 || layer > self.layers() || hs.len() <= layer {
            return Err(Error::config(format!(
                "layer {layer} outside hierarchy of {} levels",
                self.layers()
            )));
        }
        let joined = match self.mode {
            HierarchyMode::Plain => Ok(hs[layer].to_owned()),
            HierarchyMode::Adjacent => concatenate(Axis(1), &[hs[layer - 1], hs[layer]]),
            HierarchyMode::Global => {
                let theta = theta.ok_or_else(|| Error::config("global mode needs θ"))?;
                concatenate(Axis(1), &[hs[layer - 1], theta])
            }
        };
        joined.map_err(|e| Error::config(format!("cannot fuse level {layer}: {e}")))
    }

    /// Splits the gradient of a fusion input back onto its sources:
    /// `(d h_prev, d second)` where `second` is `hˡ` (adjacent) or `θ`
    /// (global); plain mode puts everything on `hˡ` and returns no `h_prev`.
    pub(crate) fn split_grad(
        &self,
        dinput: Array2<f64>,
        width: usize,
    ) -> (Option<Array2<f64>>, Array2<f64>) {
        match self.mode {
            HierarchyMode::Plain => (None, dinput),
            HierarchyMode::Adjacent | HierarchyMode::Global => (
                Some(dinput.slice(s![.., ..width]).to_owned()),
                dinput.slice(s![.., width..]).to_owned(),
            ),
        }
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        for f in &mut self.fusion {
            f.params_mut(out);
        }
    }
}

/// `θ`: token-wise nearest top-level prototypes of `hᴸ`.
pub fn global_quantize(h_top: &TokenGrid, book: &Codebook) -> Result<QuantizationResult> {
    book.quantize(h_top.view())
}

/// Fused tokens `Υˡ([…])` and their quantization `zˡ`.
#[derive(Clone, Debug)]
pub struct FusedQuantization {
    pub fused: TokenGrid,
    pub result: QuantizationResult,
}

/// Fuses level `layer` according to the configured mode and quantizes it
/// against `book`. `hs` holds `[h⁰ … hᴸ]`.
pub fn fuse_quantize(
    hs: &[TokenGrid],
    theta: Option<&TokenGrid>,
    layer: usize,
    cfg: &HierarchyConfig,
    book: &Codebook,
) -> Result<FusedQuantization> {
    let views: Vec<_> = hs.iter().map(|h| h.view()).collect();
    let input = cfg.fusion_input(layer, &views, theta.map(|t| t.view()))?;
    let map = &cfg.fusion[layer - 1];
    if input.ncols() != map.in_dim() {
        return Err(Error::config(format!(
            "fusion input width {} does not match Υ{} input width {}",
            input.ncols(),
            layer,
            map.in_dim()
        )));
    }
    let fused = map.forward(input.view());
    let result = book.quantize(fused.view())?;
    Ok(FusedQuantization { fused, result })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded_rng;
    use crate::testutil::{numeric_grad, randn, rel_err};
    use ndarray::{array, Array1};

    fn book(entries: Array2<f64>) -> Codebook {
        let k = entries.nrows();
        Codebook::with_state(entries.clone(), Array1::ones(k), entries, 0.99, 1e-5).unwrap()
    }

    fn cfg_with(mode: HierarchyMode, maps: Vec<Linear>) -> HierarchyConfig {
        HierarchyConfig { mode, fusion: maps }
    }

    #[test]
    fn theta_fixed_point_and_toy() {
        let entries = array![[0.0, 1.0], [3.0, 3.0], [-1.0, -1.0]];
        let b = book(entries.clone());
        let h = entries.select(Axis(0), &[2, 0, 1]);
        assert_eq!(global_quantize(&h, &b).unwrap().quantized, h);

        let b = book(array![[0.0, 1.0], [3.0, 3.0]]);
        let theta = global_quantize(&array![[0.0, 0.0], [3.0, 4.0]], &b).unwrap();
        assert_eq!(theta.quantized, array![[0.0, 1.0], [3.0, 3.0]]);
    }

    #[test]
    fn theta_full_size_shape() {
        let mut rng = seeded_rng(0);
        let b = Codebook::new(512, 256, 0, 4, 0.99, 1e-5, &mut rng).unwrap();
        let h = randn(196, 256, &mut rng);
        assert_eq!(global_quantize(&h, &b).unwrap().quantized.dim(), (196, 256));
    }

    #[test]
    fn identity_plain_fusion_is_fixed_point() {
        let entries = array![[1.0, 2.0], [-1.0, 0.5]];
        let b = book(entries.clone());
        let cfg = cfg_with(HierarchyMode::Plain, vec![Linear::identity(2)]);
        let h1 = entries.select(Axis(0), &[1, 1, 0]);
        let hs = vec![Array2::zeros((3, 2)), h1.clone()];
        let out = fuse_quantize(&hs, None, 1, &cfg, &b).unwrap();
        assert_eq!(out.result.quantized, h1);
    }

    #[test]
    fn left_projection_global_reduces_to_plain_on_previous_level() {
        let mut rng = seeded_rng(1);
        let c = 3;
        let b = Codebook::new(6, c, 0, 1, 0.99, 1e-5, &mut rng).unwrap();
        let mut w = Array2::zeros((2 * c, c));
        w.slice_mut(s![..c, ..]).assign(&Array2::eye(c));
        let global = cfg_with(
            HierarchyMode::Global,
            vec![Linear::from_parts(w, Array1::zeros(c))],
        );
        let plain = cfg_with(HierarchyMode::Plain, vec![Linear::identity(c)]);
        let h0 = randn(5, c, &mut rng);
        let h1 = randn(5, c, &mut rng);
        let theta = randn(5, c, &mut rng);
        let g = fuse_quantize(&[h0.clone(), h1], Some(&theta), 1, &global, &b).unwrap();
        let p = fuse_quantize(&[Array2::zeros((5, c)), h0], None, 1, &plain, &b).unwrap();
        assert_eq!(g.result, p.result);
    }

    #[test]
    fn averaging_fusion_matches_enumeration() {
        // Υ averages the two blocks: [a, b] ↦ (a + b) / 2
        let c = 2;
        let mut w = Array2::zeros((2 * c, c));
        for i in 0..c {
            w[[i, i]] = 0.5;
            w[[c + i, i]] = 0.5;
        }
        let cfg = cfg_with(
            HierarchyMode::Global,
            vec![Linear::from_parts(w, Array1::zeros(c))],
        );
        let entries = array![[1.0, 1.0], [-1.0, 2.0]];
        let b = book(entries.clone());
        let h0 = array![[2.0, 0.0], [-2.0, 4.0]];
        let theta = array![[0.0, 2.0], [0.0, 0.0]];
        let out = fuse_quantize(
            &[h0.clone(), Array2::zeros((2, 2))],
            Some(&theta),
            1,
            &cfg,
            &b,
        )
        .unwrap();
        // fused rows: [1, 1] and [-1, 2]
        let fused = (&h0 + &theta) * 0.5;
        assert_eq!(out.fused, fused);
        for (i, row) in fused.rows().into_iter().enumerate() {
            let d: Vec<f64> = entries
                .rows()
                .into_iter()
                .map(|e| (&row - &e).mapv(|v| v * v).sum())
                .collect();
            let best = if d[0] <= d[1] { 0 } else { 1 };
            assert_eq!(out.result.indices[i], best);
        }
        assert_eq!(out.result.indices, vec![0, 1]);
    }

    #[test]
    fn nearest_prototype_optimality() {
        let mut rng = seeded_rng(2);
        let c = 4;
        let b = Codebook::new(5, c, 0, 1, 0.99, 1e-5, &mut rng).unwrap();
        for mode in HierarchyMode::ALL {
            let cfg = HierarchyConfig::new(2, c, mode, &mut rng);
            let hs: Vec<_> = (0..3).map(|_| randn(7, c, &mut rng)).collect();
            let theta = global_quantize(&hs[2], &b).unwrap().quantized;
            for layer in 1..=2 {
                let out = fuse_quantize(&hs, Some(&theta), layer, &cfg, &b).unwrap();
                for (i, u) in out.fused.rows().into_iter().enumerate() {
                    let chosen = (&u - &out.result.quantized.row(i))
                        .mapv(|v| v * v)
                        .sum()
                        .sqrt();
                    for e in b.entries().rows() {
                        assert!(chosen <= (&u - &e).mapv(|v| v * v).sum().sqrt() + 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn global_equals_adjacent_with_one_level_on_prototypes() {
        let mut rng = seeded_rng(3);
        let c = 3;
        let b = Codebook::new(4, c, 0, 1, 0.99, 1e-5, &mut rng).unwrap();
        let adj = HierarchyConfig::new(1, c, HierarchyMode::Adjacent, &mut rng);
        let glob = HierarchyConfig {
            mode: HierarchyMode::Global,
            fusion: adj.fusion.clone(),
        };
        let h0 = randn(6, c, &mut rng);
        let h1 = b.entries().select(Axis(0), &[0, 3, 2, 2, 1, 0]);
        let theta = global_quantize(&h1, &b).unwrap().quantized;
        assert_eq!(theta, h1);
        let hs = vec![h0, h1];
        let a = fuse_quantize(&hs, None, 1, &adj, &b).unwrap();
        let g = fuse_quantize(&hs, Some(&theta), 1, &glob, &b).unwrap();
        assert_eq!(a.fused, g.fused);
        assert_eq!(a.result, g.result);
    }

    #[test]
    fn mode_width_mismatch_is_config_error() {
        let mut rng = seeded_rng(4);
        let b = Codebook::new(4, 3, 0, 1, 0.99, 1e-5, &mut rng).unwrap();
        let mut cfg = HierarchyConfig::new(1, 3, HierarchyMode::Plain, &mut rng);
        cfg.mode = HierarchyMode::Adjacent;
        let hs = vec![randn(2, 3, &mut rng), randn(2, 3, &mut rng)];
        assert!(matches!(
            fuse_quantize(&hs, None, 1, &cfg, &b),
            Err(Error::Config(_))
        ));
        assert!(cfg.validate(3).is_err());
        let glob = HierarchyConfig::new(1, 3, HierarchyMode::Global, &mut rng);
        assert!(matches!(
            fuse_quantize(&hs, None, 1, &glob, &b),
            Err(Error::Config(_))
        ));
        assert!("bogus".parse::<HierarchyMode>().is_err());
        assert_eq!(
            "global".parse::<HierarchyMode>().unwrap(),
            HierarchyMode::Global
        );
    }

    /// Straight-through: the analytic gradient at the fused input equals the
    /// gradient of the loss with respect to `z`, i.e. the derivative of
    /// `ℓ(u + sg(e − u))` with the offset frozen.
    #[test]
    fn straight_through_matches_frozen_offset_differences() {
        let mut rng = seeded_rng(5);
        let c = 4;
        let n = 3;
        let b = Codebook::new(5, c, 0, 1, 0.99, 1e-5, &mut rng).unwrap();
        let mut cfg = HierarchyConfig::new(1, c, HierarchyMode::Global, &mut rng);
        let hs = vec![randn(n, c, &mut rng), randn(n, c, &mut rng)];
        let theta = global_quantize(&hs[1], &b).unwrap().quantized;
        let w = randn(n, c, &mut rng);
        let loss = |z: &Array2<f64>| (z * &w).sum() + 0.25 * z.mapv(|v| v.powi(4)).sum();

        let input = cfg
            .fusion_input(1, &[hs[0].view(), hs[1].view()], Some(theta.view()))
            .unwrap();
        let out = fuse_quantize(&hs, Some(&theta), 1, &cfg, &b).unwrap();
        let z = out.result.quantized.clone();
        let dz = &w + &z.mapv(|v| v.powi(3));
        // straight-through: du = dz, then through Υ
        let dinput = cfg.fusion[0].backward(input.view(), dz.view());

        let offset = &z - &out.fused;
        let map = cfg.fusion[0].clone();
        let fd = numeric_grad(&input, 1e-6, |x| {
            let u = map.forward(x.view());
            loss(&(&u + &offset))
        });
        assert!(rel_err(&dinput, &fd) < 1e-4);
        let (dprev, dtheta) = cfg.split_grad(dinput, c);
        assert_eq!(dprev.unwrap().dim(), (n, c));
        assert_eq!(dtheta.dim(), (n, c));
    }
}
