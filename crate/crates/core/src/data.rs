//! Synthetic multi-class texture corpus, the frozen feature extractor that
//! turns images into token grids, and an MVTec-style directory layout.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Rng;
use crate::TokenGrid;

/// Side length of the square image patch behind one token.
pub const PATCH: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    /// `H × W × 3`, values in `[0, 1]`.
    pub image: Array3<f64>,
    pub class_id: usize,
    pub is_anomalous: bool,
    /// `H × W`, 1 marks an anomalous pixel.
    pub mask: Option<Array2<u8>>,
    /// Defect type name for anomalous samples.
    pub defect: Option<String>,
}

impl LabeledSample {
    pub fn dims(&self) -> (usize, usize) {
        (self.image.dim().0, self.image.dim().1)
    }

    /// `is_anomalous` agrees with the mask whenever a mask is present.
    pub fn is_consistent(&self) -> bool {
        match &self.mask {
            Some(m) => self.is_anomalous == m.iter().any(|&v| v > 0),
            None => true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnomalyKind {
    /// Rectangle copied from another class's texture.
    Transplant,
    /// Smooth blob of an out-of-palette color.
    Blob,
    /// Pixels shuffled inside a rectangle.
    Scramble,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 3] = [
        AnomalyKind::Transplant,
        AnomalyKind::Blob,
        AnomalyKind::Scramble,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AnomalyKind::Transplant => "transplant",
            AnomalyKind::Blob => "blob",
            AnomalyKind::Scramble => "scramble",
        }
    }
}

impl fmt::Display for AnomalyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AnomalyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AnomalyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown anomaly kind `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub classes: usize,
    /// Normal training images per class.
    pub per_class: usize,
    pub test_normal: usize,
    pub test_anomalous: usize,
    /// `(H, W)`, both multiples of the 16-pixel patch.
    pub image: (usize, usize),
    pub kinds: Vec<AnomalyKind>,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            classes: 3,
            per_class: 200,
            test_normal: 50,
            test_anomalous: 50,
            image: (224, 224),
            kinds: AnomalyKind::ALL.to_vec(),
            noise: 0.02,
            seed: 7,
        }
    }
}

/// Per-class texture parameters: a two-tone grating plus a weaker cross
/// grating, each with its own wave vector.
#[derive(Clone, Debug)]
struct TextureFamily {
    palette: [[f64; 3]; 2],
    main: (f64, f64),
    cross: (f64, f64),
    cross_weight: f64,
}

fn class_rng(seed: u64, class: usize, stream: u64) -> Rng {
    let mut r = Rng::seed_from_u64(seed);
    r.set_stream(
        stream
            .wrapping_mul(1_000_003)
            .wrapping_add(class as u64 + 1),
    );
    r
}

impl TextureFamily {
    fn new(seed: u64, class: usize, classes: usize) -> Self {
        let mut rng = class_rng(seed, class, 1);
        // periods from {4, 8, 16} pixels keep patches statistically alike
        let periods = [4.0, 8.0, 16.0];
        let angle =
            std::f64::consts::PI * (class as f64 + rng.random::<f64>() * 0.5) / classes as f64;
        let period = periods[class % periods.len()];
        let k = 2.0 * std::f64::consts::PI / period;
        let main = (k * angle.cos(), k * angle.sin());
        let cross_period = periods[(class + 1) % periods.len()];
        let kc = 2.0 * std::f64::consts::PI / cross_period;
        let cross = (-kc * angle.sin(), kc * angle.cos());
        let hue = class as f64 / classes as f64;
        let palette = [hsv(hue, 0.7, 0.85), hsv(hue + 0.08, 0.5, 0.3)];
        TextureFamily {
            palette,
            main,
            cross,
            cross_weight: 0.2 + 0.2 * rng.random::<f64>(),
        }
    }

    fn render(&self, h: usize, w: usize, noise: f64, rng: &mut Rng) -> Array3<f64> {
        let phase_main = rng.random::<f64>() * std::f64::consts::TAU;
        let phase_cross = rng.random::<f64>() * std::f64::consts::TAU;
        let jitter = Normal::new(0.0, noise.max(0.0)).expect("valid normal");
        let mut img = Array3::zeros((h, w, 3));
        for y in 0..h {
            for x in 0..w {
                let (xf, yf) = (x as f64, y as f64);
                let a = (self.main.0 * xf + self.main.1 * yf + phase_main).sin();
                let b = (self.cross.0 * xf + self.cross.1 * yf + phase_cross).sin();
                let t = (0.5 + 0.5 * ((1.0 - self.cross_weight) * a + self.cross_weight * b))
                    .clamp(0.0, 1.0);
                for c in 0..3 {
                    let v = (1.0 - t) * self.palette[0][c] + t * self.palette[1][c];
                    let n = if noise > 0.0 { jitter.sample(rng) } else { 0.0 };
                    img[[y, x, c]] = (v + n).clamp(0.0, 1.0);
                }
            }
        }
        img
    }

    /// A color far from both palette entries.
    fn foreign_color(&self) -> [f64; 3] {
        let mean: Vec<f64> = (0..3)
            .map(|c| 0.5 * (self.palette[0][c] + self.palette[1][c]))
            .collect();
        [1.0 - mean[0], 1.0 - mean[1], 1.0 - mean[2]].map(|v| {
            if (v - 0.5).abs() < 0.25 {
                if v < 0.5 {
                    0.05
                } else {
                    0.95
                }
            } else {
                v
            }
        })
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u8 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Target anomaly area as a fraction of the image.
const AREA_RANGE: (f64, f64) = (0.02, 0.08);

fn random_rect(h: usize, w: usize, rng: &mut Rng) -> (usize, usize, usize, usize) {
    let frac = rng.random_range(AREA_RANGE.0..AREA_RANGE.1);
    let area = frac * (h * w) as f64;
    let aspect: f64 = rng.random_range(0.5..2.0);
    let rh = ((area * aspect).sqrt().round() as usize).clamp(2, h - 1);
    let rw = ((area / rh as f64).round() as usize).clamp(2, w - 1);
    let y0 = rng.random_range(0..=h - rh);
    let x0 = rng.random_range(0..=w - rw);
    (y0, x0, rh, rw)
}

fn rect_mask(h: usize, w: usize, (y0, x0, rh, rw): (usize, usize, usize, usize)) -> Array2<u8> {
    let mut m = Array2::zeros((h, w));
    m.slice_mut(s![y0..y0 + rh, x0..x0 + rw]).fill(1);
    m
}

fn inject(
    img: &mut Array3<f64>,
    kind: AnomalyKind,
    family: &TextureFamily,
    donor: &Array3<f64>,
    rng: &mut Rng,
) -> Array2<u8> {
    let (h, w, _) = img.dim();
    match kind {
        AnomalyKind::Transplant => {
            let r = random_rect(h, w, rng);
            let (y0, x0, rh, rw) = r;
            img.slice_mut(s![y0..y0 + rh, x0..x0 + rw, ..])
                .assign(&donor.slice(s![y0..y0 + rh, x0..x0 + rw, ..]));
            rect_mask(h, w, r)
        }
        AnomalyKind::Scramble => {
            let r = random_rect(h, w, rng);
            let (y0, x0, rh, rw) = r;
            let mut coords: Vec<(usize, usize)> = (y0..y0 + rh)
                .flat_map(|y| (x0..x0 + rw).map(move |x| (y, x)))
                .collect();
            let original = img.clone();
            let targets = coords.clone();
            coords.shuffle(rng);
            for ((ty, tx), (sy, sx)) in targets.into_iter().zip(coords) {
                for c in 0..3 {
                    img[[ty, tx, c]] = original[[sy, sx, c]];
                }
            }
            rect_mask(h, w, r)
        }
        AnomalyKind::Blob => {
            let frac = rng.random_range(AREA_RANGE.0..AREA_RANGE.1);
            let radius = (frac * (h * w) as f64 / std::f64::consts::PI).sqrt();
            let margin = (radius.ceil() as usize + 1).min(h / 2).min(w / 2);
            let cy = rng.random_range(margin..=h - margin);
            let cx = rng.random_range(margin..=w - margin);
            // alpha falls to 1/2 on the mask boundary
            let s2 = radius * radius / (2.0 * std::f64::consts::LN_2);
            let color = family.foreign_color();
            let mut m = Array2::zeros((h, w));
            for y in 0..h {
                for x in 0..w {
                    let d2 =
                        (y as f64 + 0.5 - cy as f64).powi(2) + (x as f64 + 0.5 - cx as f64).powi(2);
                    let alpha = (-d2 / (2.0 * s2)).exp();
                    if alpha < 1e-3 {
                        continue;
                    }
                    for c in 0..3 {
                        img[[y, x, c]] = (1.0 - alpha) * img[[y, x, c]] + alpha * color[c];
                    }
                    if d2 <= radius * radius {
                        m[[y, x]] = 1;
                    }
                }
            }
            m
        }
    }
}

fn check_image_dims(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(PATCH) || !w.is_multiple_of(PATCH) {
        return Err(Error::config(format!(
            "image size {h}×{w} must be a positive multiple of {PATCH}"
        )));
    }
    Ok(())
}

/// Generates `(train, test)`. Training images are all normal; test images
/// per class are `test_normal` normal ones followed by `test_anomalous`
/// anomalous ones cycling through the configured kinds.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>)> {
    if cfg.classes < 2 {
        return Err(Error::config(format!(
            "need at least 2 classes, got {}",
            cfg.classes
        )));
    }
    let (h, w) = cfg.image;
    check_image_dims(h, w)?;
    if cfg.test_anomalous > 0 && cfg.kinds.is_empty() {
        return Err(Error::config(
            "anomalous test images need at least one anomaly kind",
        ));
    }
    let families: Vec<_> = (0..cfg.classes)
        .map(|c| TextureFamily::new(cfg.seed, c, cfg.classes))
        .collect();
    let mut train = Vec::with_capacity(cfg.classes * cfg.per_class);
    let mut test = Vec::with_capacity(cfg.classes * (cfg.test_normal + cfg.test_anomalous));
    for (class, family) in families.iter().enumerate() {
        let mut rng = class_rng(cfg.seed, class, 2);
        for _ in 0..cfg.per_class {
            train.push(LabeledSample {
                image: family.render(h, w, cfg.noise, &mut rng),
                class_id: class,
                is_anomalous: false,
                mask: None,
                defect: None,
            });
        }
        let mut rng = class_rng(cfg.seed, class, 3);
        for _ in 0..cfg.test_normal {
            test.push(LabeledSample {
                image: family.render(h, w, cfg.noise, &mut rng),
                class_id: class,
                is_anomalous: false,
                mask: None,
                defect: None,
            });
        }
        for i in 0..cfg.test_anomalous {
            let kind = cfg.kinds[i % cfg.kinds.len()];
            let mut image = family.render(h, w, cfg.noise, &mut rng);
            let other = (class + 1 + rng.random_range(0..cfg.classes - 1)) % cfg.classes;
            let donor = families[other].render(h, w, cfg.noise, &mut rng);
            let mask = inject(&mut image, kind, family, &donor, &mut rng);
            test.push(LabeledSample {
                image,
                class_id: class,
                is_anomalous: true,
                mask: Some(mask),
                defect: Some(kind.as_str().to_string()),
            });
        }
    }
    Ok((train, test))
}

/// Frozen two-stage strided convolution: 4×4/stride-4 to a hidden width,
/// ReLU, then 4×4/stride-4 to the token width. One token per 16×16 patch.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BackboneStub {
    /// `hidden × 3 × 4 × 4`
    conv1: Array4<f64>,
    bias1: ndarray::Array1<f64>,
    /// `width × hidden × 4 × 4`
    conv2: Array4<f64>,
    bias2: ndarray::Array1<f64>,
}

impl BackboneStub {
    pub fn new(width: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = Rng::seed_from_u64(seed);
        let std1 = (2.0 / 48.0f64).sqrt();
        let std2 = (2.0 / (16 * hidden) as f64).sqrt();
        let n1 = Normal::new(0.0, std1).expect("valid normal");
        let n2 = Normal::new(0.0, std2).expect("valid normal");
        let nb = Normal::new(0.0, 0.1).expect("valid normal");
        let conv1 = Array4::from_shape_simple_fn((hidden, 3, 4, 4), || n1.sample(&mut rng));
        let bias1 = ndarray::Array1::from_shape_simple_fn(hidden, || nb.sample(&mut rng));
        let conv2 = Array4::from_shape_simple_fn((width, hidden, 4, 4), || n2.sample(&mut rng));
        let bias2 = ndarray::Array1::from_shape_simple_fn(width, || nb.sample(&mut rng));
        BackboneStub {
            conv1,
            bias1,
            conv2,
            bias2,
        }
    }

    pub fn width(&self) -> usize {
        self.conv2.dim().0
    }

    /// Grid shape `(H/16, W/16)` for an image.
    pub fn grid(h: usize, w: usize) -> (usize, usize) {
        (h / PATCH, w / PATCH)
    }

    /// Tokens in row-major grid order: `(H/16)·(W/16) × C`.
    pub fn extract(&self, image: &Array3<f64>) -> Result<TokenGrid> {
        let (h, w, ch) = image.dim();
        if ch != 3 || h == 0 || w == 0 || h % PATCH != 0 || w % PATCH != 0 {
            return Err(Error::input(format!(
                "image of shape {h}×{w}×{ch} is not an RGB image with sides divisible by {PATCH}"
            )));
        }
        let hidden = self.conv1.dim().0;
        let (h4, w4) = (h / 4, w / 4);
        let k1 = self
            .conv1
            .view()
            .into_shape_with_order((hidden, 48))
            .map_err(|e| Error::internal(e.to_string()))?;
        // first stage: each 4×4×3 cell flattened in (channel, dy, dx) order
        let mut cells = Array2::zeros((h4 * w4, 48));
        for y in 0..h4 {
            for x in 0..w4 {
                let mut row = cells.row_mut(y * w4 + x);
                for c in 0..3 {
                    for dy in 0..4 {
                        for dx in 0..4 {
                            row[c * 16 + dy * 4 + dx] = image[[4 * y + dy, 4 * x + dx, c]];
                        }
                    }
                }
            }
        }
        let mut mid = cells.dot(&k1.t());
        mid += &self.bias1;
        mid.mapv_inplace(|v| v.max(0.0));

        let width = self.width();
        let k2 = self
            .conv2
            .view()
            .into_shape_with_order((width, hidden * 16))
            .map_err(|e| Error::internal(e.to_string()))?;
        let (gh, gw) = Self::grid(h, w);
        let mut patches = Array2::zeros((gh * gw, hidden * 16));
        for y in 0..gh {
            for x in 0..gw {
                let mut row = patches.row_mut(y * gw + x);
                for c in 0..hidden {
                    for dy in 0..4 {
                        for dx in 0..4 {
                            row[c * 16 + dy * 4 + dx] = mid[[(4 * y + dy) * w4 + 4 * x + dx, c]];
                        }
                    }
                }
            }
        }
        let mut out = patches.dot(&k2.t());
        out += &self.bias2;
        Ok(out)
    }

    /// Token produced by an all-zero patch.
    pub fn bias_response(&self) -> ndarray::Array1<f64> {
        let relu_b1 = self.bias1.mapv(|v| v.max(0.0));
        let summed = self.conv2.sum_axis(Axis(3)).sum_axis(Axis(2));
        summed.dot(&relu_b1) + &self.bias2
    }

    /// Stacked tokens of many images: `B·N × C`.
    pub fn extract_all(&self, samples: &[LabeledSample]) -> Result<Array2<f64>> {
        let grids = samples
            .iter()
            .map(|s| self.extract(&s.image))
            .collect::<Result<Vec<_>>>()?;
        let views: Vec<_> = grids.iter().map(|g| g.view()).collect();
        ndarray::concatenate(Axis(0), &views).map_err(|e| Error::internal(e.to_string()))
    }
}

/// Per-channel standardization fitted on training tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenNormalizer {
    pub mean: ndarray::Array1<f64>,
    pub std: ndarray::Array1<f64>,
}

impl TokenNormalizer {
    pub fn fit(tokens: &Array2<f64>) -> Result<Self> {
        let mean = tokens
            .mean_axis(Axis(0))
            .ok_or_else(|| Error::input("cannot fit a normalizer on zero tokens"))?;
        let std = tokens.std_axis(Axis(0), 0.0).mapv(|s| s.max(1e-6));
        Ok(TokenNormalizer { mean, std })
    }

    pub fn apply(&self, tokens: &Array2<f64>) -> Array2<f64> {
        (tokens - &self.mean) / &self.std
    }
}

fn class_dirs(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if path.is_dir() {
            out.push((entry.file_name().to_string_lossy().into_owned(), path));
        }
    }
    out.sort();
    Ok(out)
}

fn pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn subdirs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    class_dirs(dir)
}

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

fn read_rgb(path: &Path, size: (usize, usize)) -> Result<Array3<f64>> {
    let img = image::open(path).map_err(image_err(path))?.to_rgb8();
    let (h, w) = size;
    let img = if img.dimensions() != (w as u32, h as u32) {
        image::imageops::resize(
            &img,
            w as u32,
            h as u32,
            image::imageops::FilterType::Triangle,
        )
    } else {
        img
    };
    Ok(Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    }))
}

fn read_mask(path: &Path, size: (usize, usize)) -> Result<Array2<u8>> {
    let img = image::open(path).map_err(image_err(path))?.to_luma8();
    let (h, w) = size;
    let img = if img.dimensions() != (w as u32, h as u32) {
        image::imageops::resize(
            &img,
            w as u32,
            h as u32,
            image::imageops::FilterType::Triangle,
        )
    } else {
        img
    };
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        u8::from(img.get_pixel(x as u32, y as u32)[0] as f64 / 255.0 >= 0.5)
    }))
}

fn to_rgb8(image: &Array3<f64>) -> image::RgbImage {
    let (h, w, _) = image.dim();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| (image[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

fn save(img: impl FnOnce(&Path) -> image::ImageResult<()>, path: &Path) -> Result<()> {
    img(path).map_err(image_err(path))
}

/// Class directory names used when writing a corpus.
pub fn class_name(class: usize) -> String {
    format!("class_{class:02}")
}

/// Writes samples in the MVTec layout under `root`.
pub fn write_mvtec_style(
    root: &Path,
    train: &[LabeledSample],
    test: &[LabeledSample],
) -> Result<()> {
    let mut counters = std::collections::BTreeMap::<(usize, String, bool), usize>::new();
    let mut next = |class: usize, split: &str, train: bool| {
        let c = counters
            .entry((class, split.to_string(), train))
            .or_insert(0);
        *c += 1;
        *c - 1
    };
    for (samples, is_train) in [(train, true), (test, false)] {
        for s in samples {
            if is_train && s.is_anomalous {
                return Err(Error::input("anomalous sample in training split"));
            }
            let defect = if s.is_anomalous {
                s.defect.clone().unwrap_or_else(|| "defect".to_string())
            } else {
                "good".to_string()
            };
            let class_root = root.join(class_name(s.class_id));
            let dir = class_root
                .join(if is_train { "train" } else { "test" })
                .join(&defect);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let idx = next(s.class_id, &defect, is_train);
            let path = dir.join(format!("{idx:03}.png"));
            let rgb = to_rgb8(&s.image);
            save(|p| rgb.save(p), &path)?;
            if let (false, Some(mask)) = (is_train, &s.mask) {
                if s.is_anomalous {
                    let gt = class_root.join("ground_truth").join(&defect);
                    fs::create_dir_all(&gt).map_err(|e| Error::io(&gt, e))?;
                    let (h, w) = mask.dim();
                    let gray = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
                        image::Luma([if mask[[y as usize, x as usize]] > 0 {
                            255
                        } else {
                            0
                        }])
                    });
                    let mpath = gt.join(format!("{idx:03}_mask.png"));
                    save(|p| gray.save(p), &mpath)?;
                }
            }
        }
    }
    Ok(())
}

/// Corpus read back from disk.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub class_names: Vec<String>,
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

/// Reads `root/<class>/{train,test,ground_truth}`, resizing images to
/// `size` and binarizing masks at one half.
pub fn load_mvtec_style(root: &Path, size: (usize, usize)) -> Result<Corpus> {
    check_image_dims(size.0, size.1)?;
    let classes = class_dirs(root)?;
    if classes.is_empty() {
        return Err(Error::input(format!(
            "no class directories under {}",
            root.display()
        )));
    }
    let mut corpus = Corpus {
        class_names: Vec::new(),
        train: Vec::new(),
        test: Vec::new(),
    };
    for (class_id, (name, dir)) in classes.into_iter().enumerate() {
        for (split, _) in subdirs(&dir.join("train"))? {
            if split != "good" {
                return Err(Error::input(format!(
                    "{name}/train/{split}: training split may only contain normal images"
                )));
            }
        }
        for path in pngs(&dir.join("train").join("good"))? {
            corpus.train.push(LabeledSample {
                image: read_rgb(&path, size)?,
                class_id,
                is_anomalous: false,
                mask: None,
                defect: None,
            });
        }
        for (defect, sub) in subdirs(&dir.join("test"))? {
            for path in pngs(&sub)? {
                let image = read_rgb(&path, size)?;
                if defect == "good" {
                    corpus.test.push(LabeledSample {
                        image,
                        class_id,
                        is_anomalous: false,
                        mask: None,
                        defect: None,
                    });
                    continue;
                }
                let stem = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                let mpath = dir
                    .join("ground_truth")
                    .join(&defect)
                    .join(format!("{stem}_mask.png"));
                let mask = if mpath.is_file() {
                    Some(read_mask(&mpath, size)?)
                } else {
                    log::warn!(
                        "{} has no ground-truth mask; excluded from pixel metrics",
                        path.display()
                    );
                    None
                };
                corpus.test.push(LabeledSample {
                    image,
                    class_id,
                    is_anomalous: true,
                    mask,
                    defect: Some(defect.clone()),
                });
            }
        }
        corpus.class_names.push(name);
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests;
