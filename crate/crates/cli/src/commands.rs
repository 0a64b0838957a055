use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use hvq_core::config::RunConfig;
use hvq_core::data::{
    class_name, gen_synthetic, load_mvtec_style, write_mvtec_style, LabeledSample,
};
use hvq_core::hvq::HierarchyMode;
use hvq_core::pipeline::{evaluate, train_run, Checkpoint, EvalOptions, Report};
use hvq_core::scoring::triptych;
use serde::Serialize;

use crate::{AblateArgs, Cli, Command, EvalArgs, GenArgs, Grid, ModelFlags, TrainArgs};

/// Bad or conflicting arguments; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match e.downcast_ref::<hvq_core::Error>() {
        Some(hvq_core::Error::Config(_)) => 2,
        _ => 1,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut run = match &cli.config {
        Some(path) => {
            RunConfig::load(path).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        run.data.seed = seed;
        run.train.seed = seed;
    }
    match cli.command {
        Command::Gen(args) => gen(run, args),
        Command::Train(args) => train(run, args),
        Command::Eval(args) => eval(cli.seed, args),
        Command::Ablate(args) => ablate(run, args),
    }
}

/// `--out`, else `$HVQ_OUT/<command>`, else the configured root.
fn out_dir(explicit: Option<PathBuf>, run: &RunConfig, command: &str) -> PathBuf {
    explicit.unwrap_or_else(|| {
        let root = std::env::var_os("HVQ_OUT")
            .map(PathBuf::from)
            .unwrap_or_else(|| run.paths.out.clone());
        root.join(command)
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn echo_config(dir: &Path, run: &RunConfig) -> Result<()> {
    run.save(&dir.join("config.toml"))?;
    Ok(())
}

fn square(side: usize) -> Result<(usize, usize)> {
    if side == 0 || !side.is_multiple_of(hvq_core::data::PATCH) {
        return Err(usage(format!(
            "image size {side} must be a positive multiple of {}",
            hvq_core::data::PATCH
        )));
    }
    Ok((side, side))
}

fn gen(mut run: RunConfig, args: GenArgs) -> Result<()> {
    let d = &mut run.data;
    d.classes = args.classes.unwrap_or(d.classes);
    d.per_class = args.per_class.unwrap_or(d.per_class);
    d.test_normal = args.test_normal.unwrap_or(d.test_normal);
    d.test_anomalous = args.test_anomalous.unwrap_or(d.test_anomalous);
    if let Some(side) = args.image_size {
        d.image = square(side)?;
    }
    let (train, test) = gen_synthetic(&run.data)?;
    let dir = out_dir(args.out, &run, "corpus");
    create_dir(&dir)?;
    write_mvtec_style(&dir, &train, &test)?;
    echo_config(&dir, &run)?;
    println!(
        "wrote {} train and {} test images to {}",
        train.len(),
        test.len(),
        dir.display()
    );
    Ok(())
}

/// Applies model flags to a run configuration, rejecting contradictions.
pub fn apply_flags(run: &mut RunConfig, f: &ModelFlags) -> Result<()> {
    if f.no_vq && (f.hierarchy.is_some() || f.k.is_some()) {
        return Err(usage("--no-vq cannot be combined with --hierarchy or --K"));
    }
    if f.no_pot && f.lambda.is_some() {
        return Err(usage("--no-pot cannot be combined with --lambda"));
    }
    if f.teacher_force_switch && f.no_switch_codebook && f.no_switch_expert {
        return Err(usage(
            "--teacher-force-switch needs codebook or expert switching",
        ));
    }
    let m = &mut run.model;
    if let Some(h) = f.hierarchy {
        m.hierarchy = h;
    }
    if let Some(k) = f.k {
        m.codebook_size = k;
    }
    if let Some(l) = f.layers {
        m.layers = l;
    }
    if let Some(w) = f.width {
        m.width = w;
    }
    if f.no_vq {
        m.vq = false;
        run.train.pot = false;
        run.eval.pot = false;
    }
    if f.no_switch_codebook {
        m.switch_codebook = false;
    }
    if f.no_switch_expert {
        m.switch_expert = false;
    }
    if f.no_pot {
        run.train.pot = false;
        run.eval.pot = false;
    }
    if let Some(lambda) = f.lambda {
        run.eval.lambda = lambda;
    }
    if f.teacher_force_switch {
        run.train.teacher_force_switch = true;
    }
    if let Some(e) = f.epochs {
        run.train.epochs = e;
        run.train.lr_drop_epoch = None;
    }
    if let Some(lr) = f.learning_rate {
        run.train.learning_rate = lr;
    }
    if let Some(side) = f.image_size {
        run.data.image = square(side)?;
    }
    Ok(())
}

struct Corpus {
    class_names: Vec<String>,
    train: Vec<LabeledSample>,
    test: Vec<LabeledSample>,
}

fn load_corpus(data: Option<&Path>, run: &RunConfig) -> Result<Corpus> {
    match data {
        Some(dir) => {
            let c = load_mvtec_style(dir, run.data.image)?;
            Ok(Corpus {
                class_names: c.class_names,
                train: c.train,
                test: c.test,
            })
        }
        None => {
            let (train, test) = gen_synthetic(&run.data)?;
            Ok(Corpus {
                class_names: (0..run.data.classes).map(class_name).collect(),
                train,
                test,
            })
        }
    }
}

fn train_logged(run: &RunConfig, corpus: &Corpus, dir: &Path) -> Result<Checkpoint> {
    let path = dir.join("metrics.jsonl");
    let mut log =
        fs::File::create(&path).with_context(|| format!("cannot create {}", path.display()))?;
    let mut failure = None;
    let ckpt = train_run(run, &corpus.class_names, &corpus.train, |record| {
        if failure.is_some() {
            return;
        }
        let line = serde_json::to_string(record).map_err(anyhow::Error::from);
        if let Err(e) = line.and_then(|l| writeln!(log, "{l}").map_err(anyhow::Error::from)) {
            failure = Some(e);
        }
    })?;
    match failure {
        Some(e) => Err(e.context(format!("writing {}", path.display()))),
        None => Ok(ckpt),
    }
}

fn train(mut run: RunConfig, args: TrainArgs) -> Result<()> {
    apply_flags(&mut run, &args.model)?;
    if let Some(dir) = &args.data {
        run.paths.corpus = Some(dir.clone());
    }
    let corpus = load_corpus(run.paths.corpus.as_deref(), &run)?;
    let dir = out_dir(args.out, &run, "train");
    create_dir(&dir)?;
    let ckpt = train_logged(&run, &corpus, &dir)?;
    echo_config(&dir, &ckpt.run)?;
    let path = dir.join("checkpoint.json");
    ckpt.save(&path)?;
    println!(
        "trained {} epochs ({} steps); train dead-code fraction {:.3}; checkpoint {}",
        ckpt.state.epochs_done,
        ckpt.state.steps,
        ckpt.train_dead_fraction,
        path.display()
    );
    Ok(())
}

fn write_report(dir: &Path, report: &Report) -> Result<()> {
    let json = dir.join("report.json");
    fs::write(&json, report.to_json()?)
        .with_context(|| format!("cannot write {}", json.display()))?;
    let text = dir.join("report.txt");
    fs::write(&text, report.to_string())
        .with_context(|| format!("cannot write {}", text.display()))?;
    Ok(())
}

fn eval(seed: Option<u64>, args: EvalArgs) -> Result<()> {
    if args.no_pot && args.lambda.is_some() {
        return Err(usage("--no-pot cannot be combined with --lambda"));
    }
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let mut run = ckpt.run.clone();
    if args.no_pot {
        run.eval.pot = false;
    }
    if let Some(lambda) = args.lambda {
        run.eval.lambda = lambda;
    }
    if let Some(seed) = seed {
        run.data.seed = seed;
    }
    let data = args.data.as_deref().or(run.paths.corpus.as_deref());
    let corpus = load_corpus(data, &run)?;
    if corpus.class_names != ckpt.class_names {
        return Err(usage(format!(
            "corpus classes {:?} differ from the checkpoint's {:?}",
            corpus.class_names, ckpt.class_names
        )));
    }
    let dir = out_dir(args.out, &run, "eval");
    create_dir(&dir)?;
    let (report, results) = evaluate(&ckpt, &corpus.test, &EvalOptions::from(&run.eval))?;
    echo_config(&dir, &run)?;
    write_report(&dir, &report)?;
    if args.plot {
        let plots = dir.join("plots");
        create_dir(&plots)?;
        let (lo, hi) = results
            .iter()
            .flat_map(|r| r.pixel_map.iter().copied())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(v), hi.max(v))
            });
        for (i, (sample, result)) in corpus.test.iter().zip(&results).enumerate() {
            if !sample.is_anomalous {
                continue;
            }
            let img = triptych(
                &sample.image,
                sample.mask.as_ref(),
                &result.pixel_map,
                lo,
                hi,
            )?;
            let name = format!(
                "{}_{:04}_{}.png",
                ckpt.class_names[sample.class_id],
                i,
                sample.defect.as_deref().unwrap_or("anomaly")
            );
            let path = plots.join(name);
            img.save(&path)
                .with_context(|| format!("cannot write {}", path.display()))?;
        }
    }
    print!("{report}");
    Ok(())
}

#[derive(Serialize)]
struct AblationRow {
    name: String,
    image_auroc: f64,
    pixel_auroc: Option<f64>,
    detection_localization: String,
    train_dead_fraction: f64,
}

/// Configurations of one ablation grid, each a label plus a modified run.
pub fn grid_runs(base: &RunConfig, args: &AblateArgs) -> Vec<(String, RunConfig)> {
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut r = base.clone();
        f(&mut r);
        r
    };
    match args.grid {
        Grid::Hierarchy => HierarchyMode::ALL
            .iter()
            .map(|&h| (h.to_string(), with(&|r| r.model.hierarchy = h)))
            .collect(),
        Grid::K => args
            .ks
            .iter()
            .map(|&k| (format!("K={k}"), with(&|r| r.model.codebook_size = k)))
            .collect(),
        Grid::Components => {
            // (label, vq, hierarchical, codebook switch, expert switch, pot)
            let rows: [(&str, bool, bool, bool, bool, bool); 8] = [
                ("w/o vq", false, false, false, false, false),
                ("single", true, false, false, false, false),
                ("single+cb", true, false, true, false, false),
                ("hier", true, true, false, false, false),
                ("hier+cb", true, true, true, false, false),
                ("hier+pot", true, true, false, false, true),
                ("hier+cb+ex", true, true, true, true, false),
                ("full", true, true, true, true, true),
            ];
            rows.iter()
                .map(|&(name, vq, hier, cb, ex, pot)| {
                    let run = with(&|r| {
                        r.model.vq = vq;
                        if !hier {
                            // one quantizer whose size matches the hierarchy's total
                            r.model.hierarchy = HierarchyMode::Plain;
                            r.model.codebook_size *= r.model.layers;
                        }
                        r.model.switch_codebook = cb;
                        r.model.switch_expert = ex;
                        r.train.pot = pot;
                        r.eval.pot = pot;
                    });
                    (name.to_string(), run)
                })
                .collect()
        }
    }
}

fn ablate(mut run: RunConfig, args: AblateArgs) -> Result<()> {
    apply_flags(&mut run, &args.model)?;
    if args.grid == Grid::K && (args.ks.is_empty() || args.ks.contains(&0)) {
        return Err(usage("--ks needs positive codebook sizes"));
    }
    if let Some(dir) = &args.data {
        run.paths.corpus = Some(dir.clone());
    }
    let corpus = load_corpus(run.paths.corpus.as_deref(), &run)?;
    let dir = out_dir(args.out.clone(), &run, "ablate");
    create_dir(&dir)?;
    echo_config(&dir, &run)?;
    let mut rows = Vec::new();
    for (name, cfg) in grid_runs(&run, &args) {
        log::info!("ablation row {name}");
        let sub = dir.join(name.replace(['/', ' ', '=', '+'], "_"));
        create_dir(&sub)?;
        let ckpt = train_logged(&cfg, &corpus, &sub)?;
        echo_config(&sub, &ckpt.run)?;
        let (report, _) = evaluate(&ckpt, &corpus.test, &EvalOptions::from(&ckpt.run.eval))?;
        write_report(&sub, &report)?;
        rows.push(AblationRow {
            name,
            image_auroc: report.mean_image_auroc,
            pixel_auroc: report.mean_pixel_auroc,
            detection_localization: report.mean,
            train_dead_fraction: ckpt.train_dead_fraction,
        });
    }
    let mut table = format!("{:<14} {:>16} {:>8}\n", "config", "det / loc", "dead");
    for r in &rows {
        table += &format!(
            "{:<14} {:>16} {:>8.3}\n",
            r.name, r.detection_localization, r.train_dead_fraction
        );
    }
    fs::write(dir.join("table.txt"), &table)?;
    fs::write(dir.join("table.json"), serde_json::to_string_pretty(&rows)?)?;
    print!("{table}");
    Ok(())
}
