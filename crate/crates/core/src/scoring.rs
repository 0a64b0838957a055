//! Anomaly scores: reconstruction error, transport calibration, pixel maps
//! and AUROC.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Default Gaussian smoothing of pixel maps, in pixels.
pub const DEFAULT_SIGMA: f64 = 4.0;

/// `s[i] = ‖h⁰ᵢ − h̃⁰ᵢ‖²`.
pub fn recon_score(h0: ArrayView2<f64>, h0_tilde: ArrayView2<f64>) -> Result<Array1<f64>> {
    if h0.dim() != h0_tilde.dim() {
        return Err(Error::config(format!(
            "reconstruction shape {:?} does not match input {:?}",
            h0_tilde.dim(),
            h0.dim()
        )));
    }
    Ok(h0
        .rows()
        .into_iter()
        .zip(h0_tilde.rows())
        .map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum())
        .collect())
}

/// `s_org + λ Σ_l s_potˡ`.
pub fn calibrate(
    s_org: &Array1<f64>,
    s_pot_layers: &[Array1<f64>],
    lambda: f64,
) -> Result<Array1<f64>> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::config(format!(
            "lambda must be nonnegative, got {lambda}"
        )));
    }
    let mut out = s_org.clone();
    for (l, s) in s_pot_layers.iter().enumerate() {
        if s.len() != out.len() {
            return Err(Error::config(format!(
                "POT score of layer {} has {} entries, expected {}",
                l + 1,
                s.len(),
                out.len()
            )));
        }
        out.scaled_add(lambda, s);
    }
    Ok(out)
}

/// Bilinear resize with half-pixel centers and clamped borders.
pub fn bilinear_resize(src: ArrayView2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    let taps = |dst: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let scale = n_in as f64 / n_out as f64;
        let x = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (x.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, x - i0 as f64)
    };
    let rows: Vec<_> = (0..out_h).map(|y| taps(y, h, out_h)).collect();
    let cols: Vec<_> = (0..out_w).map(|x| taps(x, w, out_w)).collect();
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, fy) = rows[y];
        let (x0, x1, fx) = cols[x];
        let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
        let bottom = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with replicated borders; `sigma = 0` is a copy.
pub fn gaussian_blur(src: ArrayView2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return src.to_owned();
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let (h, w) = src.dim();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let horizontal = Array2::from_shape_fn((h, w), |(y, x)| {
        kernel
            .iter()
            .enumerate()
            .map(|(t, k)| k * src[[y, clamp(x as isize + t as isize - r, w)]])
            .sum::<f64>()
    });
    Array2::from_shape_fn((h, w), |(y, x)| {
        kernel
            .iter()
            .enumerate()
            .map(|(t, k)| k * horizontal[[clamp(y as isize + t as isize - r, h), x]])
            .sum::<f64>()
    })
}

/// Patch scores on a `g_h × g_w` grid upsampled to `H × W` and smoothed.
pub fn pixel_map(
    patch_scores: ArrayView1<f64>,
    grid: (usize, usize),
    image: (usize, usize),
) -> Result<Array2<f64>> {
    pixel_map_with_sigma(patch_scores, grid, image, DEFAULT_SIGMA)
}

pub fn pixel_map_with_sigma(
    patch_scores: ArrayView1<f64>,
    grid: (usize, usize),
    image: (usize, usize),
    sigma: f64,
) -> Result<Array2<f64>> {
    let (gh, gw) = grid;
    if gh * gw != patch_scores.len() || gh == 0 || gw == 0 {
        return Err(Error::config(format!(
            "{} patch scores do not fill a {gh}×{gw} grid",
            patch_scores.len()
        )));
    }
    if image.0 == 0 || image.1 == 0 {
        return Err(Error::config("pixel map must be non-empty"));
    }
    let coarse = patch_scores
        .to_owned()
        .into_shape_with_order((gh, gw))
        .map_err(|e| Error::internal(e.to_string()))?;
    let up = bilinear_resize(coarse.view(), image.0, image.1);
    Ok(gaussian_blur(up.view(), sigma))
}

/// Patch scores with their pixel map; the image score is the map maximum.
#[derive(Clone, Debug)]
pub struct ScoreMap {
    pub patch_scores: Array1<f64>,
    pub pixel_map: Array2<f64>,
    pub image_score: f64,
}

impl ScoreMap {
    pub fn new(
        patch_scores: Array1<f64>,
        grid: (usize, usize),
        image: (usize, usize),
    ) -> Result<Self> {
        let pixel_map = pixel_map(patch_scores.view(), grid, image)?;
        let image_score = pixel_map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(ScoreMap {
            patch_scores,
            pixel_map,
            image_score,
        })
    }
}

/// Mann–Whitney AUROC: the fraction of (positive, negative) pairs ranked
/// correctly, ties counting one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::config("scores and labels differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::input("scores contain NaN"));
    }
    let pos = labels.iter().filter(|&&l| l).count() as u128;
    let neg = labels.len() as u128 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUROC needs at least one positive and one negative label".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the U statistic, kept integral so the result is exact
    let mut twice_u: u128 = 0;
    let mut negatives_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut q) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                p += 1;
            } else {
                q += 1;
            }
            j += 1;
        }
        twice_u += 2 * p * negatives_below + p * q;
        negatives_below += q;
        i = j;
    }
    Ok(twice_u as f64 / (2 * pos * neg) as f64)
}

const MAP_MAGIC: &[u8; 4] = b"HVQM";
const DTYPE_F64_LE: u8 = 1;

/// Flat binary dump: magic, `u32` rows, `u32` cols, dtype byte, three
/// padding bytes, then row-major little-endian `f64` values.
pub fn write_map_bin(path: &Path, map: &Array2<f64>) -> Result<()> {
    let (h, w) = map.dim();
    let mut buf = Vec::with_capacity(16 + 8 * h * w);
    buf.extend_from_slice(MAP_MAGIC);
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    buf.extend_from_slice(&[DTYPE_F64_LE, 0, 0, 0]);
    for v in map.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_map_bin(path: &Path) -> Result<Array2<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..4] != MAP_MAGIC {
        return Err(Error::input(format!(
            "{} is not a score map",
            path.display()
        )));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if bytes[12] != DTYPE_F64_LE {
        return Err(Error::input(format!(
            "unsupported score map dtype {}",
            bytes[12]
        )));
    }
    let body = &bytes[16..];
    if body.len() != 8 * h * w {
        return Err(Error::input(format!(
            "score map body has {} bytes, expected {}",
            body.len(),
            8 * h * w
        )));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Array2::from_shape_vec((h, w), values).map_err(|e| Error::internal(e.to_string()))
}

fn to_gray(v: f64, lo: f64, hi: f64) -> u8 {
    if hi > lo {
        (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8
    } else {
        0
    }
}

/// Grayscale rendering of a map, linearly scaled from `[lo, hi]`.
pub fn map_to_gray(map: &Array2<f64>, lo: f64, hi: f64) -> image::GrayImage {
    let (h, w) = map.dim();
    image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([to_gray(map[[y as usize, x as usize]], lo, hi)])
    })
}

pub fn write_map_png(path: &Path, map: &Array2<f64>, lo: f64, hi: f64) -> Result<()> {
    map_to_gray(map, lo, hi)
        .save(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Input image, ground-truth mask and score map side by side.
pub fn triptych(
    img: &Array3<f64>,
    mask: Option<&Array2<u8>>,
    map: &Array2<f64>,
    lo: f64,
    hi: f64,
) -> Result<image::RgbImage> {
    let (h, w, _) = img.dim();
    if map.dim() != (h, w) || mask.is_some_and(|m| m.dim() != (h, w)) {
        return Err(Error::config("triptych panels differ in size"));
    }
    let byte = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let out = image::RgbImage::from_fn(3 * w as u32, h as u32, |x, y| {
        let (panel, x) = ((x as usize) / w, (x as usize) % w);
        let y = y as usize;
        match panel {
            0 => image::Rgb([
                byte(img[[y, x, 0]]),
                byte(img[[y, x, 1]]),
                byte(img[[y, x, 2]]),
            ]),
            1 => {
                let v = mask.map_or(0, |m| if m[[y, x]] > 0 { 255 } else { 0 });
                image::Rgb([v, v, v])
            }
            _ => {
                let v = to_gray(map[[y, x]], lo, hi);
                image::Rgb([v, v, v])
            }
        }
    });
    Ok(out)
}
