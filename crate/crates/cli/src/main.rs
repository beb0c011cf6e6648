use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use qfm_core::analysis::{confusion_histogram, ConfusionHistogram};
use qfm_core::config::TrainConfig;
use qfm_core::data::{generate_synthetic, load_manifest, write_manifest, Manifest, SynthConfig};
use qfm_core::dle::{pretrain_teacher, teacher_pool_config, Teacher};
use qfm_core::eval::{cross_dataset_eval, evaluate};
use qfm_core::report::{confusion_plot, epoch_plot, sweep_table, RunReport};
use qfm_core::snm::{MatchConfig, MatchMode, MatchSpace, Pool, TemporaryMemory};
use qfm_core::sweep::{run_sweep, SweepPlan};
use qfm_core::{run_training, Model, TrainInputs};

/// Manifest name recorded in checkpoints written by `train`.
const TRAIN_MANIFEST_KEY: &str = "train_manifest";

#[derive(Parser)]
#[command(name = "qfm", version, about = "Quality-aware feature matching for image quality assessment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic distortion dataset and write its manifest.
    GenData(GenData),
    /// Train and freeze the teacher used for pool pseudo-labels.
    PretrainTeacher(PretrainTeacher),
    /// Train from a TOML config; optionally run a hyperparameter sweep.
    Train(Train),
    /// Score a labeled manifest with a checkpoint.
    Eval(Eval),
    /// Evaluate a checkpoint on manifests other than its training set.
    CrossEval(CrossEval),
    /// Show the noise-sample matches for one batch.
    MatchDebug(MatchDebug),
    /// Nearest-neighbour label-gap histogram of a checkpoint's features.
    Confusion(Confusion),
    /// Render text and SVG plots from JSON reports.
    Report(Report),
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value_t = 80)]
    contents: usize,
    #[arg(long, default_value_t = 16)]
    distortions_per_content: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long, default_value = "synth")]
    name: String,
    /// Leave scores out (an unlabeled pool).
    #[arg(long)]
    unlabeled: bool,
    /// Output directory; receives manifest.csv and images/.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainTeacher {
    /// Training config; QFM and the pool are switched off regardless.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Labeled manifest; defaults to a freshly generated teacher pool.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Seed for the generated teacher pool.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    config: PathBuf,
    /// Directory for the checkpoint and reports.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Sweep K and the mixing weights instead of a single run.
    #[arg(long)]
    sweep: bool,
    /// K values for the sweep.
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    /// Lambda values for the sweep.
    #[arg(long, value_delimiter = ',')]
    lambdas: Option<Vec<f64>>,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Write per-sample predictions and metrics as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct CrossEval {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Name of the training manifest; read from the checkpoint if omitted.
    #[arg(long)]
    train_name: Option<String>,
    #[arg(long = "manifest", required = true)]
    manifests: Vec<PathBuf>,
    #[arg(long)]
    allow_same: bool,
}

#[derive(Args)]
struct MatchDebug {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Batch taken from the start of the manifest.
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    offset: usize,
    #[arg(short, long, default_value_t = 1)]
    k: usize,
    #[arg(long)]
    no_clamp: bool,
    #[arg(long)]
    no_zscore: bool,
    #[arg(long)]
    no_layernorm: bool,
    #[arg(long, value_enum, default_value = "full")]
    mode: ModeArg,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ModeArg {
    Full,
    QualityOnly,
    FeatureOnly,
}

#[derive(Args)]
struct Confusion {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 10)]
    buckets: usize,
    /// Label gap counted as confused; defaults to 0.3 of the label range.
    #[arg(long)]
    gap_threshold: Option<f64>,
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Args)]
struct Report {
    /// `report.json` written by `train`.
    #[arg(long)]
    run: Option<PathBuf>,
    /// JSON written by `confusion --json`.
    #[arg(long)]
    confusion: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenData(a) => gen_data(a),
        Command::PretrainTeacher(a) => pretrain(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::CrossEval(a) => cross_eval(a),
        Command::MatchDebug(a) => match_debug(a),
        Command::Confusion(a) => confusion(a),
        Command::Report(a) => report(a),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn manifest(path: &Path) -> Result<Manifest> {
    load_manifest(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn load_model(path: &Path) -> Result<(Model, BTreeMap<String, String>)> {
    Model::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn gen_data(a: GenData) -> Result<()> {
    let cfg = SynthConfig {
        name: a.name,
        contents: a.contents,
        distortions_per_content: a.distortions_per_content,
        seed: a.seed,
        image_size: a.image_size,
        labeled: !a.unlabeled,
        ..SynthConfig::default()
    };
    let m = generate_synthetic(&cfg)?;
    fs::create_dir_all(&a.out)?;
    let path = a.out.join("manifest.csv");
    write_manifest(&m, &path)?;
    println!("{} samples written to {}", m.len(), path.display());
    Ok(())
}

fn pretrain(a: PretrainTeacher) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    let m = match &a.manifest {
        Some(p) => manifest(p)?,
        None => generate_synthetic(&teacher_pool_config(a.seed))?,
    };
    let (teacher, run) = pretrain_teacher(&m, &cfg)?;
    let mut meta = BTreeMap::new();
    meta.insert(TRAIN_MANIFEST_KEY.to_string(), m.meta.name.clone());
    teacher.model().save(&a.out, &meta)?;
    println!(
        "teacher: held-out plcc {:.4} srcc {:.4}, sha256 {}",
        run.report.plcc,
        run.report.srcc,
        teacher.digest()
    );
    Ok(())
}

fn train_inputs(cfg: &TrainConfig) -> Result<TrainInputs> {
    let Some(train_path) = &cfg.data.train else {
        bail!("config has no data.train manifest");
    };
    let labeled = manifest(train_path)?;
    let mut inputs = match &cfg.data.test {
        Some(t) => TrainInputs::fixed(labeled, manifest(t)?),
        None => TrainInputs::split(labeled),
    };
    if cfg.dle.enabled {
        let (Some(pool), Some(teacher)) = (&cfg.dle.pool, &cfg.dle.teacher) else {
            bail!("dle.enabled needs dle.pool and dle.teacher");
        };
        inputs = inputs.with_pool(manifest(pool)?, Teacher::load(teacher)?);
    }
    Ok(inputs)
}

fn train(a: Train) -> Result<()> {
    let mut cfg = TrainConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.optim.epochs = e;
    }
    cfg.validate()?;
    let inputs = train_inputs(&cfg)?;
    fs::create_dir_all(&a.out)?;
    if a.sweep {
        let mut plan = SweepPlan::default();
        if let Some(ks) = a.ks {
            plan.ks = ks;
        }
        if let Some(l) = a.lambdas {
            plan.lambdas = l;
        }
        let rows = run_sweep(&cfg, &inputs, &plan, &mut |r| {
            println!("{} = {:e}: plcc {:.4} srcc {:.4}", r.parameter, r.value, r.plcc, r.srcc)
        })?;
        write(&a.out.join("sweep.txt"), &sweep_table(&rows))?;
        write(&a.out.join("sweep.json"), &serde_json::to_string_pretty(&rows)?)?;
        return Ok(());
    }
    let name = inputs.labeled.meta.name.clone();
    let run = run_training(&cfg, inputs, &mut ())?;
    let mut meta = BTreeMap::new();
    meta.insert(TRAIN_MANIFEST_KEY.to_string(), name);
    run.model.save(&a.out.join("model.ckpt"), &meta)?;
    let rep = RunReport::new(&cfg, &run);
    write(&a.out.join("report.txt"), &rep.to_text())?;
    write(&a.out.join("report.json"), &rep.to_json())?;
    print!("{}", rep.to_text());
    Ok(())
}

fn eval(a: Eval) -> Result<()> {
    let (model, _) = load_model(&a.checkpoint)?;
    let m = manifest(&a.manifest)?;
    let e = evaluate(&model, &m.meta.name, &m.samples)?;
    println!("{}: n {} plcc {:.4} srcc {:.4}", e.dataset, e.predictions.len(), e.report.plcc, e.report.srcc);
    if let Some(p) = a.json {
        write(&p, &serde_json::to_string_pretty(&e)?)?;
    }
    Ok(())
}

fn cross_eval(a: CrossEval) -> Result<()> {
    let (model, meta) = load_model(&a.checkpoint)?;
    let train_name = match a.train_name.or_else(|| meta.get(TRAIN_MANIFEST_KEY).cloned()) {
        Some(n) => n,
        None => bail!("checkpoint does not record its training manifest; pass --train-name"),
    };
    let tests = a.manifests.iter().map(|p| manifest(p)).collect::<Result<Vec<_>>>()?;
    for e in cross_dataset_eval(&model, &train_name, &tests, a.allow_same)? {
        println!("{}: n {} plcc {:.4} srcc {:.4}", e.dataset, e.predictions.len(), e.report.plcc, e.report.srcc);
    }
    Ok(())
}

fn match_debug(a: MatchDebug) -> Result<()> {
    let (model, _) = load_model(&a.checkpoint)?;
    let m = manifest(&a.manifest)?;
    let end = (a.offset + a.batch).min(m.len());
    if a.offset >= end {
        bail!("batch is empty: offset {} of {} samples", a.offset, m.len());
    }
    let batch = &m.samples[a.offset..end];
    let mut maps = Vec::with_capacity(batch.len());
    let mut scores = Vec::with_capacity(batch.len());
    for s in batch {
        maps.push(model.encode_image(&s.load_image()?)?);
        let y = s.score.with_context(|| format!("sample {:?} has no score", s.id))?;
        scores.push(model.label_scale().normalize(y));
    }
    let mut memory = TemporaryMemory::new(Pool::A);
    memory.ingest(&maps, &scores)?;
    let cfg = MatchConfig {
        clamp_cos: !a.no_clamp,
        zscore_scores: !a.no_zscore,
        layernorm_features: !a.no_layernorm,
        mode: match a.mode {
            ModeArg::Full => MatchMode::Full,
            ModeArg::QualityOnly => MatchMode::QualityOnly,
            ModeArg::FeatureOnly => MatchMode::FeatureOnly,
        },
    };
    let space = MatchSpace::new(&memory, cfg);
    for (i, s) in batch.iter().enumerate() {
        let r = space.query_entry(i, a.k)?;
        let picks: Vec<String> = r
            .indices
            .iter()
            .zip(&r.scores)
            .map(|(&j, sc)| format!("{} (y {:.2}, S {:.4})", batch[j].id, batch[j].score.unwrap_or(f32::NAN), sc))
            .collect();
        println!("{} (y {:.2}) -> {}", s.id, s.score.unwrap_or(f32::NAN), picks.join(", "));
    }
    Ok(())
}

fn confusion(a: Confusion) -> Result<()> {
    let (model, _) = load_model(&a.checkpoint)?;
    let m = manifest(&a.manifest)?;
    let threshold = match (a.gap_threshold, m.meta.label_range) {
        (Some(t), _) => t,
        (None, Some((lo, hi))) => 0.3 * (hi - lo) as f64,
        (None, None) => bail!("manifest has no label range; pass --gap-threshold"),
    };
    let h = confusion_histogram(&model, &m.samples, a.buckets, threshold)?;
    println!("confused pairs (gap > {threshold}): {} of {}", h.confused, h.total());
    for (w, c) in h.edges.windows(2).zip(&h.counts) {
        println!("[{:.2}, {:.2}) {c}", w[0], w[1]);
    }
    if let Some(p) = a.json {
        write(&p, &serde_json::to_string_pretty(&h)?)?;
    }
    if let Some(p) = a.svg {
        write(&p, &confusion_plot(&h))?;
    }
    Ok(())
}

fn report(a: Report) -> Result<()> {
    if a.run.is_none() && a.confusion.is_none() {
        bail!("nothing to render: pass --run and/or --confusion");
    }
    fs::create_dir_all(&a.out)?;
    if let Some(p) = a.run {
        let rep = RunReport::from_json(&fs::read_to_string(&p)?)
            .with_context(|| format!("parsing {}", p.display()))?;
        write(&a.out.join("report.txt"), &rep.to_text())?;
        write(&a.out.join("epochs.svg"), &epoch_plot(&rep))?;
    }
    if let Some(p) = a.confusion {
        let h: ConfusionHistogram = serde_json::from_str(&fs::read_to_string(&p)?)
            .with_context(|| format!("parsing {}", p.display()))?;
        write(&a.out.join("confusion.svg"), &confusion_plot(&h))?;
    }
    println!("wrote reports to {}", a.out.display());
    Ok(())
}
