//! End-to-end glue: feature extraction, training runs, checkpoints and the
//! evaluation report.

use std::fmt;
use std::path::Path;

use ndarray::{s, Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::codebook::UsageStats;
use crate::config::RunConfig;
use crate::data::{BackboneStub, LabeledSample, TokenNormalizer, PATCH};
use crate::error::{Error, Result};
use crate::model::HvqTrans;
use crate::scoring::{auroc, calibrate, pixel_map_with_sigma};
use crate::training::{train, usage_over, EpochRecord, TrainSet, TrainState};

/// Frozen feature extractor plus the optional token standardization.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Features {
    pub backbone: BackboneStub,
    pub normalizer: Option<TokenNormalizer>,
}

impl Features {
    pub fn extract(&self, samples: &[LabeledSample]) -> Result<Array2<f64>> {
        let raw = self.backbone.extract_all(samples)?;
        Ok(match &self.normalizer {
            Some(n) => n.apply(&raw),
            None => raw,
        })
    }
}

/// Builds the feature extractor from training images and returns their tokens.
/// Anomalous samples are rejected.
pub fn prepare_train(run: &RunConfig, samples: &[LabeledSample]) -> Result<(Features, TrainSet)> {
    if samples.is_empty() {
        return Err(Error::input("no training samples"));
    }
    if let Some(s) = samples.iter().find(|s| s.is_anomalous) {
        return Err(Error::input(format!(
            "training split contains an anomalous sample of class {}",
            s.class_id
        )));
    }
    if let Some(s) = samples.iter().find(|s| s.dims() != run.data.image) {
        return Err(Error::input(format!(
            "training image of size {:?} does not match configured {:?}",
            s.dims(),
            run.data.image
        )));
    }
    let backbone = BackboneStub::new(run.model.width, run.backbone.hidden, run.backbone.seed);
    let raw = backbone.extract_all(samples)?;
    let (normalizer, tokens) = if run.backbone.normalize {
        let n = TokenNormalizer::fit(&raw)?;
        let t = n.apply(&raw);
        (Some(n), t)
    } else {
        (None, raw)
    };
    let labels = samples.iter().map(|s| s.class_id).collect();
    let set = TrainSet::new(tokens, labels, run.model.tokens)?;
    Ok((
        Features {
            backbone,
            normalizer,
        },
        set,
    ))
}

/// Everything needed to score new images with a trained model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub run: RunConfig,
    pub class_names: Vec<String>,
    pub features: Features,
    pub model: HvqTrans,
    pub state: TrainState,
    /// Codebook usage on the training set after the last epoch.
    pub train_usage: Vec<UsageStats>,
    pub train_dead_fraction: f64,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut ckpt: Checkpoint = serde_json::from_str(&text)?;
        ckpt.model.validate()?;
        ckpt.model.zero_grad();
        Ok(ckpt)
    }
}

/// Trains a fresh model on normal images. The class count comes from
/// `class_names`; the token count from the configured image size.
pub fn train_run(
    run: &RunConfig,
    class_names: &[String],
    train_samples: &[LabeledSample],
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<Checkpoint> {
    let mut run = run.clone();
    run.model.classes = class_names.len();
    let run = run.resolve()?;
    if let Some(s) = train_samples
        .iter()
        .find(|s| s.class_id >= class_names.len())
    {
        return Err(Error::input(format!(
            "sample class {} has no name",
            s.class_id
        )));
    }
    let (features, set) = prepare_train(&run, train_samples)?;
    let mut model = HvqTrans::new(run.model.clone(), run.train.seed)?;
    let state = train(&mut model, &set, &run.train, on_epoch)?;
    let usage = usage_over(&model, set.tokens.view(), run.train.batch_size)?;
    model.zero_grad();
    Ok(Checkpoint {
        class_names: class_names.to_vec(),
        features,
        state,
        train_usage: usage.per_layer(),
        train_dead_fraction: usage.mean_dead_fraction(),
        model,
        run,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub lambda: f64,
    pub pot: bool,
    pub sinkhorn: crate::pot::SinkhornConfig,
    pub sinkhorn_layers: Vec<crate::pot::SinkhornConfig>,
    pub sigma: f64,
    pub batch_size: usize,
}

impl From<&crate::config::EvalConfig> for EvalOptions {
    fn from(e: &crate::config::EvalConfig) -> Self {
        EvalOptions {
            lambda: e.lambda,
            pot: e.pot,
            sinkhorn: e.sinkhorn,
            sinkhorn_layers: e.sinkhorn_layers.clone(),
            sigma: e.sigma,
            batch_size: e.batch_size,
        }
    }
}

/// Scores of one test image.
#[derive(Clone, Debug)]
pub struct SampleResult {
    pub class_id: usize,
    pub is_anomalous: bool,
    pub predicted_class: usize,
    pub patch_scores: Array1<f64>,
    pub pixel_map: Array2<f64>,
    pub image_score: f64,
    /// Transport scores summed over layers, per patch. Empty without POT.
    pub pot_patch: Array1<f64>,
    pub mask: Option<Array2<u8>>,
}

impl SampleResult {
    /// Fraction of defect pixels under each 16×16 patch; zeros for normal images.
    pub fn patch_coverage(&self) -> Array1<f64> {
        let (h, w) = self.pixel_map.dim();
        let (gh, gw) = (h / PATCH, w / PATCH);
        let mut out = Array1::zeros(gh * gw);
        if let Some(m) = &self.mask {
            for y in 0..gh {
                for x in 0..gw {
                    let cell = m.slice(s![y * PATCH..(y + 1) * PATCH, x * PATCH..(x + 1) * PATCH]);
                    out[y * gw + x] =
                        cell.iter().filter(|&&v| v > 0).count() as f64 / (PATCH * PATCH) as f64;
                }
            }
        }
        out
    }
}

/// Runs the model over test images and builds per-image score maps.
pub fn score_samples(
    ckpt: &Checkpoint,
    samples: &[LabeledSample],
    opts: &EvalOptions,
) -> Result<Vec<SampleResult>> {
    let image = ckpt.run.data.image;
    let grid = (image.0 / PATCH, image.1 / PATCH);
    let n = ckpt.model.config.tokens;
    if grid.0 * grid.1 != n {
        return Err(Error::config("checkpoint grid does not match its model"));
    }
    if let Some(s) = samples.iter().find(|s| s.dims() != image) {
        return Err(Error::input(format!(
            "test image of size {:?} does not match {:?}",
            s.dims(),
            image
        )));
    }
    let solvers = crate::pot::layer_configs(
        &opts.sinkhorn,
        &opts.sinkhorn_layers,
        ckpt.model.config.layers,
    )?;
    let pot_cfg = opts.pot.then_some(solvers.as_slice());
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(opts.batch_size.max(1)) {
        let tokens = ckpt.features.extract(chunk)?;
        let scores = ckpt.model.score_batch(tokens.view(), pot_cfg)?;
        for (sample, sc) in chunk.iter().zip(scores) {
            let patch_scores = if sc.s_pot.is_empty() {
                sc.s_org.clone()
            } else {
                calibrate(&sc.s_org, &sc.s_pot, opts.lambda)?
            };
            let pot_patch = sc.s_pot.iter().fold(
                Array1::zeros(if sc.s_pot.is_empty() { 0 } else { n }),
                |acc, s| acc + s,
            );
            let pixel_map = pixel_map_with_sigma(patch_scores.view(), grid, image, opts.sigma)?;
            let image_score = pixel_map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let predicted_class = sc
                .probs
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &p)| {
                    if p > best.1 {
                        (i, p)
                    } else {
                        best
                    }
                })
                .0;
            out.push(SampleResult {
                class_id: sample.class_id,
                is_anomalous: sample.is_anomalous,
                predicted_class,
                patch_scores,
                pixel_map,
                image_score,
                pot_patch,
                mask: sample.mask.clone(),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: usize,
    pub name: String,
    pub image_auroc: f64,
    /// Absent when no test image of the class carries a mask.
    pub pixel_auroc: Option<f64>,
    pub detection_localization: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PotPatchMeans {
    /// Patches with no defect pixels.
    pub normal: f64,
    /// Patches at least half covered by a defect.
    pub anomalous: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub classes: Vec<ClassMetrics>,
    pub mean_image_auroc: f64,
    pub mean_pixel_auroc: Option<f64>,
    pub mean: String,
    /// Classifier accuracy on normal test images.
    pub classifier_accuracy: f64,
    pub pot_patch_means: Option<PotPatchMeans>,
    pub test_usage: Vec<UsageStats>,
}

fn pct_pair(image: f64, pixel: Option<f64>) -> String {
    match pixel {
        Some(p) => format!("{:.1} / {:.1}", 100.0 * image, 100.0 * p),
        None => format!("{:.1} / -", 100.0 * image),
    }
}

/// Aggregates per-image results into the metrics report.
pub fn build_report(
    results: &[SampleResult],
    class_names: &[String],
    test_usage: Vec<UsageStats>,
) -> Result<Report> {
    if results.is_empty() {
        return Err(Error::input("no test results"));
    }
    let mut classes = Vec::new();
    for (c, name) in class_names.iter().enumerate() {
        let rs: Vec<&SampleResult> = results.iter().filter(|r| r.class_id == c).collect();
        if rs.is_empty() {
            continue;
        }
        let scores: Vec<f64> = rs.iter().map(|r| r.image_score).collect();
        let labels: Vec<bool> = rs.iter().map(|r| r.is_anomalous).collect();
        let image_auroc = auroc(&scores, &labels)?;

        let mut px_scores = Vec::new();
        let mut px_labels = Vec::new();
        for r in &rs {
            match (&r.mask, r.is_anomalous) {
                (Some(m), _) => {
                    px_scores.extend(r.pixel_map.iter().copied());
                    px_labels.extend(m.iter().map(|&v| v > 0));
                }
                (None, false) => {
                    px_scores.extend(r.pixel_map.iter().copied());
                    px_labels.extend(std::iter::repeat_n(false, r.pixel_map.len()));
                }
                (None, true) => {}
            }
        }
        let pixel_auroc = if px_labels.iter().any(|&l| l) && px_labels.iter().any(|&l| !l) {
            Some(auroc(&px_scores, &px_labels)?)
        } else {
            None
        };
        classes.push(ClassMetrics {
            class_id: c,
            name: name.clone(),
            image_auroc,
            pixel_auroc,
            detection_localization: pct_pair(image_auroc, pixel_auroc),
        });
    }
    if classes.is_empty() {
        return Err(Error::input("no results match the named classes"));
    }
    let mean_image_auroc =
        classes.iter().map(|c| c.image_auroc).sum::<f64>() / classes.len() as f64;
    let pixels: Vec<f64> = classes.iter().filter_map(|c| c.pixel_auroc).collect();
    let mean_pixel_auroc =
        (!pixels.is_empty()).then(|| pixels.iter().sum::<f64>() / pixels.len() as f64);

    let normals: Vec<&SampleResult> = results.iter().filter(|r| !r.is_anomalous).collect();
    let classifier_accuracy = if normals.is_empty() {
        f64::NAN
    } else {
        normals
            .iter()
            .filter(|r| r.predicted_class == r.class_id)
            .count() as f64
            / normals.len() as f64
    };

    let pot_patch_means = if results.iter().all(|r| !r.pot_patch.is_empty()) {
        let (mut normal, mut anomalous) = ((0.0, 0usize), (0.0, 0usize));
        for r in results {
            for (&p, &cov) in r.pot_patch.iter().zip(r.patch_coverage().iter()) {
                if cov == 0.0 {
                    normal = (normal.0 + p, normal.1 + 1);
                } else if cov >= 0.5 {
                    anomalous = (anomalous.0 + p, anomalous.1 + 1);
                }
            }
        }
        (normal.1 > 0 && anomalous.1 > 0).then(|| PotPatchMeans {
            normal: normal.0 / normal.1 as f64,
            anomalous: anomalous.0 / anomalous.1 as f64,
        })
    } else {
        None
    };

    Ok(Report {
        mean: pct_pair(mean_image_auroc, mean_pixel_auroc),
        classes,
        mean_image_auroc,
        mean_pixel_auroc,
        classifier_accuracy,
        pot_patch_means,
        test_usage,
    })
}

/// Scores the test images and aggregates the report.
pub fn evaluate(
    ckpt: &Checkpoint,
    test: &[LabeledSample],
    opts: &EvalOptions,
) -> Result<(Report, Vec<SampleResult>)> {
    let results = score_samples(ckpt, test, opts)?;
    let tokens = ckpt.features.extract(test)?;
    let usage = usage_over(&ckpt.model, tokens.view(), opts.batch_size)?.per_layer();
    let report = build_report(&results, &ckpt.class_names, usage)?;
    Ok((report, results))
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16} {:>16}", "class", "det / loc")?;
        for c in &self.classes {
            writeln!(f, "{:<16} {:>16}", c.name, c.detection_localization)?;
        }
        writeln!(f, "{:<16} {:>16}", "mean", self.mean)?;
        writeln!(f, "classifier accuracy {:.3}", self.classifier_accuracy)?;
        if let Some(p) = &self.pot_patch_means {
            writeln!(
                f,
                "pot patch mean: normal {:.4e} anomalous {:.4e}",
                p.normal, p.anomalous
            )?;
        }
        for (l, u) in self.test_usage.iter().enumerate() {
            writeln!(
                f,
                "layer {} perplexity {:.2} dead {:.3}",
                l + 1,
                u.perplexity,
                u.dead_fraction
            )?;
        }
        Ok(())
    }
}
