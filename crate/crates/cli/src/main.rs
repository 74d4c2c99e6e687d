//! `ageprog`: dataset preparation, training, ablation runs, age simulation,
//! evaluation and report tables.
//!
//! Exit codes: 0 success, 2 user or configuration error, 3 non-finite loss
//! during training.

mod config;
mod tables;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use ageprog::checkpoint::MANIFEST;
use ageprog::dataset::{load_image_file, load_record_image, save_strip_png, scan_directory, DatasetManifest, ImageTensor, Sex, Split, SyntheticSpec};
use ageprog::eval::{
    evaluate_models, train_embedding_net, train_gender_classifier, EmbeddingNet, EvalTools, GenderClassifier, GenderScoreTable,
};
use ageprog::experiment::StudyError;
use ageprog::nets::Caae;
use ageprog::trainer::{simulate_ages, train, TrainError, TrainingSet, FINAL_CHECKPOINT};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{ConfigError, DatasetSource, RunConfig, DATASET_FILE};

#[derive(Parser, Debug)]
#[command(name = "ageprog", version, about = "Gender- and identity-preserving face age progression")]
#[command(after_help = "Examples:
  ageprog prepare --count 2000 --identities 200 --out data/synth
  ageprog ablation --data data/synth --out runs/study --jobs 2
  ageprog simulate --checkpoint runs/study/CAAE-GV --image 3_0_0_x.png --sex male --out strip.png
  ageprog evaluate --checkpoints runs/study/CAAE,runs/study/CAAE-G,runs/study/CAAE-V,runs/study/CAAE-GV \\
      --inputs data/synth --data data/synth --out runs/study/report.json
  ageprog report --in runs/study/report.json --format table")]
struct Cli {
    /// Root for outputs whose location is not given explicitly
    #[arg(long, env = "AGEPROG_OUT_ROOT", default_value = "runs", global = true)]
    out_root: PathBuf,

    /// Only print warnings and errors
    #[arg(short, long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split a synthetic spec or an image directory into a dataset manifest
    Prepare(PrepareArgs),
    /// Train one model
    Train(TrainArgs),
    /// Train the four ablation models on the same data and seed
    Ablation(AblationArgs),
    /// Render one face at all ten age groups as a 1x10 PNG strip
    Simulate(SimulateArgs),
    /// Score trained models on young input faces and write report.json
    Evaluate(EvaluateArgs),
    /// Print the tables of a report as text or CSV
    Report(ReportArgs),
}

/// Config-file keys that can be overridden on the command line.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// Training epochs
    #[arg(long)]
    epochs: Option<usize>,
    /// Seed of the model weights and batch order
    #[arg(long)]
    seed: Option<u64>,
    /// Minibatch size
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adam learning rate
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Input and output image side length
    #[arg(long)]
    image_size: Option<usize>,
    /// Save a checkpoint every N steps; 0 disables
    #[arg(long)]
    checkpoint_every: Option<u64>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.image_size {
            cfg.image_size = v;
        }
        if let Some(v) = self.checkpoint_every {
            cfg.checkpoint_every = v;
        }
    }
}

#[derive(Args, Debug)]
struct PrepareArgs {
    /// Run config (JSON)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of age_sex_race_*.jpg/png faces; synthetic faces otherwise
    #[arg(long, conflicts_with_all = ["count", "identities", "data_seed"])]
    source: Option<PathBuf>,
    /// Number of synthetic faces
    #[arg(long)]
    count: Option<usize>,
    /// Number of synthetic identities
    #[arg(long)]
    identities: Option<usize>,
    /// Seed of the synthetic faces and of the split
    #[arg(long = "seed")]
    data_seed: Option<u64>,
    /// Image side length
    #[arg(long)]
    size: Option<usize>,
    /// Output directory for dataset.json
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Run config (JSON)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Prepared dataset directory or raw image directory
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Model variant; overrides the config's ablation flags
    #[arg(long)]
    variant: Option<String>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug)]
struct AblationArgs {
    /// Run config (JSON)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Prepared dataset directory or raw image directory
    #[arg(long)]
    data: Option<PathBuf>,
    /// Parent of the per-variant run directories
    #[arg(long)]
    out: Option<PathBuf>,
    /// Variants to train, comma separated
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<String>>,
    /// Trainings to run at once
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SexArg {
    Male,
    Female,
}

impl From<SexArg> for Sex {
    fn from(s: SexArg) -> Sex {
        match s {
            SexArg::Male => Sex::Male,
            SexArg::Female => Sex::Female,
        }
    }
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Checkpoint directory, or a run directory containing final/
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input face image
    #[arg(long)]
    image: PathBuf,
    /// Sex of the input face
    #[arg(long, value_enum)]
    sex: SexArg,
    /// Output PNG path
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Checkpoints to compare, baseline first, comma separated
    #[arg(long, value_delimiter = ',', required = true)]
    checkpoints: Vec<PathBuf>,
    /// Model names; defaults to the run directory names
    #[arg(long, value_delimiter = ',')]
    names: Option<Vec<String>>,
    /// Prepared dataset (its eval split is used) or a directory of faces
    #[arg(long)]
    inputs: PathBuf,
    /// Run config (JSON)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training data for the classifier and embedding network
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory holding trained evaluation networks; created on first use
    #[arg(long)]
    tools: Option<PathBuf>,
    /// Output report path
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Table,
    Csv,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Report written by evaluate
    #[arg(long = "in")]
    input: PathBuf,
    /// Output format
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
    /// Write to a file instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err.chain().any(|c| {
        matches!(c.downcast_ref::<TrainError>(), Some(TrainError::NonFiniteLoss { .. }))
            || matches!(c.downcast_ref::<StudyError>(), Some(StudyError::Train(TrainError::NonFiniteLoss { .. })))
    });
    if numeric {
        3
    } else {
        2
    }
}

fn run(cli: Cli) -> Result<()> {
    let root = cli.out_root.as_path();
    match cli.command {
        Command::Prepare(a) => prepare(a, root),
        Command::Train(a) => train_cmd(a, root),
        Command::Ablation(a) => ablation(a, root),
        Command::Simulate(a) => simulate(a, root),
        Command::Evaluate(a) => evaluate(a, root),
        Command::Report(a) => report(a),
    }
}

/// Flag, then config `out_dir`, then `<root>/<name>`.
fn resolve_out(flag: Option<PathBuf>, cfg: &RunConfig, root: &Path, name: &str) -> PathBuf {
    flag.or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| root.join(name))
}

fn write_manifest(manifest: &DatasetManifest, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    manifest.write(&dir.join(DATASET_FILE))?;
    Ok(())
}

fn load_set(manifest: &DatasetManifest, split: Split, size: usize) -> Result<TrainingSet> {
    Ok(TrainingSet::load(&manifest.records_in(split), size)?)
}

fn prepare(a: PrepareArgs, root: &Path) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(size) = a.size {
        cfg.image_size = size;
    }
    if let Some(src) = a.source {
        if !src.is_dir() {
            bail!(ConfigError::Invalid(format!("{} is not a directory", src.display())));
        }
        cfg.dataset = DatasetSource::Directory(src);
    } else if a.count.is_some() || a.identities.is_some() || a.data_seed.is_some() || a.size.is_some() {
        let mut spec = match &cfg.dataset {
            DatasetSource::Synthetic(s) => s.clone(),
            _ => SyntheticSpec { count: 2000, seed: 2024, age_range: [0, 100], size: cfg.image_size, identities: None },
        };
        spec.count = a.count.unwrap_or(spec.count);
        spec.seed = a.data_seed.unwrap_or(spec.seed);
        spec.size = a.size.unwrap_or(spec.size);
        if a.identities.is_some() {
            spec.identities = a.identities;
        }
        cfg.dataset = DatasetSource::Synthetic(spec);
    }
    cfg.validate()?;
    let out = resolve_out(a.out, &cfg, root, "data");
    let manifest = cfg.manifest()?;
    write_manifest(&manifest, &out)?;
    let count = |s| manifest.records.iter().filter(|r| r.split == s).count();
    println!(
        "wrote {} ({} records: train {}, val {}, test {}, eval {})",
        out.join(DATASET_FILE).display(),
        manifest.records.len(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
        count(Split::Eval)
    );
    Ok(())
}

fn train_cmd(a: TrainArgs, root: &Path) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    a.overrides.apply(&mut cfg);
    if let Some(data) = &a.data {
        cfg.dataset = DatasetSource::from_path(data);
    }
    if let Some(v) = &a.variant {
        let probe = RunConfig { variants: vec![v.clone()], ..RunConfig::default() };
        let (name, ablation) = probe.variant_list()?.remove(0);
        cfg.ablation = ablation;
        cfg.variants = vec![name];
    }
    let out = resolve_out(a.out, &cfg, root, "train");
    cfg.out_dir = Some(out.clone());
    cfg.validate()?;
    let manifest = cfg.manifest()?;
    let set = load_set(&manifest, Split::Train, cfg.image_size)?;
    write_manifest(&manifest, &out)?;
    cfg.write(&out)?;
    log::info!("training on {} faces into {}", set.len(), out.display());
    let (_, _, log) = train(&cfg.train_config(), &set, Some(&out))?;
    match log.records.last() {
        Some(r) => println!("{}: {} steps, final recon {:.4}, total {:.4}", out.display(), r.step, r.losses.recon, r.losses.total),
        None => println!("{}: no training steps", out.display()),
    }
    Ok(())
}

fn ablation(a: AblationArgs, root: &Path) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    a.overrides.apply(&mut cfg);
    if let Some(data) = &a.data {
        cfg.dataset = DatasetSource::from_path(data);
    }
    if let Some(v) = a.variants {
        cfg.variants = v;
        cfg.canonicalize_variants()?;
    }
    if a.jobs == 0 {
        bail!(ConfigError::Invalid("--jobs must be at least 1".into()));
    }
    let out = resolve_out(a.out, &cfg, root, "ablation");
    cfg.out_dir = Some(out.clone());
    cfg.validate()?;
    let variants = cfg.variant_list()?;
    let manifest = cfg.manifest()?;
    let set = load_set(&manifest, Split::Train, cfg.image_size)?;
    write_manifest(&manifest, &out)?;
    cfg.write(&out)?;

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<()>>>> = Mutex::new(variants.iter().map(|_| None).collect());
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some((name, ablation)) = variants.get(i) else { break };
        let dir = out.join(name);
        let run_cfg = RunConfig { ablation: *ablation, variants: vec![name.clone()], out_dir: Some(dir.clone()), ..cfg.clone() };
        log::info!("training {name} into {}", dir.display());
        let result = run_cfg
            .write(&dir)
            .and_then(|()| train(&run_cfg.train_config(), &set, Some(&dir)).map(|_| ()).with_context(|| format!("training {name}")));
        results.lock().expect("result slot lock")[i] = Some(result);
    };
    std::thread::scope(|s| {
        for _ in 0..a.jobs.min(variants.len()) {
            s.spawn(worker);
        }
    });
    for (result, (name, _)) in results.into_inner().expect("result slot lock").into_iter().zip(&variants) {
        result.expect("every variant ran")?;
        println!("{}", out.join(name).join(FINAL_CHECKPOINT).display());
    }
    Ok(())
}

/// A checkpoint directory, or a run directory holding `final/`.
fn checkpoint_dir(path: &Path) -> Result<PathBuf> {
    if path.join(MANIFEST).is_file() {
        return Ok(path.to_path_buf());
    }
    let fin = path.join(FINAL_CHECKPOINT);
    if fin.join(MANIFEST).is_file() {
        return Ok(fin);
    }
    bail!(ConfigError::Invalid(format!("{} is not a checkpoint or run directory", path.display())))
}

fn model_name(path: &Path) -> String {
    let last = |p: &Path| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let name = last(path);
    if name == FINAL_CHECKPOINT || name.starts_with("step-") {
        path.parent().map(last).unwrap_or(name)
    } else {
        name
    }
}

fn simulate(a: SimulateArgs, root: &Path) -> Result<()> {
    let dir = checkpoint_dir(&a.checkpoint)?;
    let (net, params) = Caae::load_checkpoint(&dir).with_context(|| format!("loading {}", dir.display()))?;
    let x = load_image_file(&a.image, net.arch.image_size)?;
    let sim = simulate_ages(&net, &params, &x, a.sex.into())?;
    let out = a.out.unwrap_or_else(|| root.join("simulation.png"));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    save_strip_png(&sim.images, &out)?;
    println!("{}", out.display());
    Ok(())
}

fn load_inputs(path: &Path, size: usize) -> Result<Vec<(ImageTensor, Sex)>> {
    let records = match DatasetSource::from_path(path) {
        DatasetSource::Manifest(m) => DatasetManifest::read(&m)?.records_in(Split::Eval),
        _ if path.is_dir() => scan_directory(path)?,
        _ => bail!(ConfigError::Invalid(format!("{} does not exist", path.display()))),
    };
    if records.is_empty() {
        bail!(ConfigError::Invalid(format!("{} holds no evaluation inputs", path.display())));
    }
    records.iter().map(|r| Ok((load_record_image(r, size)?, r.sex))).collect()
}

const CLASSIFIER_DIR: &str = "classifier";
const EMBEDDER_DIR: &str = "embedder";
const CLASSIFIER_TEST: &str = "classifier_test.json";

fn load_tools(dir: &Path) -> Result<Option<(EvalTools, Option<GenderScoreTable>)>> {
    if !dir.join(CLASSIFIER_DIR).join(MANIFEST).is_file() || !dir.join(EMBEDDER_DIR).join(MANIFEST).is_file() {
        return Ok(None);
    }
    let classifier = GenderClassifier::load(&dir.join(CLASSIFIER_DIR))?;
    let embedder = EmbeddingNet::load(&dir.join(EMBEDDER_DIR))?;
    let table = match std::fs::read_to_string(dir.join(CLASSIFIER_TEST)) {
        Ok(text) => Some(serde_json::from_str(&text)?),
        Err(_) => None,
    };
    Ok(Some((EvalTools { classifier, embedder }, table)))
}

fn build_tools(cfg: &RunConfig, size: usize, save: Option<&Path>) -> Result<(EvalTools, Option<GenderScoreTable>)> {
    let manifest = cfg.manifest()?;
    let train = load_set(&manifest, Split::Train, size)?;
    let test = load_set(&manifest, Split::Test, size)?;
    log::info!("training gender classifier on {} faces", train.len());
    let (classifier, table) = train_gender_classifier(&train, &test, &cfg.classifier)?;
    log::info!("training embedding network");
    let embedder = train_embedding_net(&train, &cfg.embedding)?;
    if let Some(dir) = save {
        classifier.save(&dir.join(CLASSIFIER_DIR))?;
        embedder.save(&dir.join(EMBEDDER_DIR))?;
        std::fs::write(dir.join(CLASSIFIER_TEST), serde_json::to_string_pretty(&table)? + "\n")?;
    }
    Ok((EvalTools { classifier, embedder }, Some(table)))
}

fn evaluate(a: EvaluateArgs, root: &Path) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(data) = &a.data {
        cfg.dataset = DatasetSource::from_path(data);
    }
    cfg.validate()?;
    if let Some(names) = &a.names {
        if names.len() != a.checkpoints.len() {
            bail!(ConfigError::Invalid(format!("{} names given for {} checkpoints", names.len(), a.checkpoints.len())));
        }
    }
    let mut models = Vec::with_capacity(a.checkpoints.len());
    for (i, path) in a.checkpoints.iter().enumerate() {
        let dir = checkpoint_dir(path)?;
        let (net, params) = Caae::load_checkpoint(&dir).with_context(|| format!("loading {}", dir.display()))?;
        let name = a.names.as_ref().map(|n| n[i].clone()).unwrap_or_else(|| model_name(path));
        models.push((name, net, params));
    }
    let size = models[0].1.arch.image_size;
    let inputs = load_inputs(&a.inputs, size)?;
    let loaded = match &a.tools {
        Some(dir) => load_tools(dir)?,
        None => None,
    };
    let (tools, classifier_test) = match loaded {
        Some(t) => {
            log::info!("using evaluation networks from {}", a.tools.as_ref().expect("tools dir").display());
            t
        }
        None => build_tools(&cfg, size, a.tools.as_deref())?,
    };
    let mut report = evaluate_models(&models, &inputs, &tools, &cfg.thresholds)?;
    report.classifier_test = classifier_test;
    let out = a.out.unwrap_or_else(|| root.join("report.json"));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&out, serde_json::to_string_pretty(&report)? + "\n").with_context(|| format!("writing {}", out.display()))?;
    println!("{}", out.display());
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let report = tables::parse_report(&text).with_context(|| a.input.display().to_string())?;
    let rendered = match a.format {
        Format::Table => tables::render_text(&report),
        Format::Csv => tables::render_csv(&report),
    };
    match a.out {
        Some(path) => std::fs::write(&path, rendered).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{rendered}"),
    }
    Ok(())
}
