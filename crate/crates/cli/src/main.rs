use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{error, info};

use jfaa_core::config::{FeatureSource, RunConfig};
use jfaa_core::ensemble::NormMode;
use jfaa_core::losses::Field;
use jfaa_core::pipeline;
use jfaa_core::probe::gradcheck::{check_probe_gradients, GradCheckConfig};
use jfaa_core::scores::read_scores;
use jfaa_core::synthetic::{synth_annotations, SynthSplit};
use jfaa_core::trainer::{CheckpointRetention, SelectionCriterion};
use jfaa_core::windows::write_annotations;
use jfaa_core::{Error, ErrorKind, Result};

/// Action anticipation with attentive probes on frozen video features.
#[derive(Parser, Debug)]
#[command(name = "jfaa", version, about)]
struct Cli {
    /// Run configuration (TOML). Flags override values from the file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the clip table (observation windows and frame indices) of a split.
    Windows(WindowsArgs),
    /// Train the head grid, validating and selecting after every epoch.
    Train(TrainArgs),
    /// Re-evaluate the stored checkpoints of one epoch.
    Eval(EvalArgs),
    /// Pick the best head per epoch and the best epoch per field.
    Select(SelectArgs),
    /// Fit field-aware ensemble weights on the validation split.
    Ensemble(EnsembleArgs),
    /// Write a validated challenge submission.
    Submit(SubmitArgs),
    /// Finite-difference check of the probe gradients.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic train/val annotation pair and a matching config.
    Synth(SynthArgs),
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Split {
    Train,
    Val,
}

#[derive(Args, Debug)]
struct DataArgs {
    #[arg(long)]
    train_annotations: Option<PathBuf>,
    #[arg(long)]
    val_annotations: Option<PathBuf>,
    /// Directory of `<narration_id>.feat` files.
    #[arg(long)]
    features_dir: Option<PathBuf>,
    /// Use synthetic features instead of files.
    #[arg(long)]
    synthetic: bool,
    #[arg(long)]
    d_model: Option<usize>,
    /// Source video frame rate used for frame indices.
    #[arg(long)]
    video_fps: Option<f64>,
}

#[derive(Args, Debug)]
struct WindowsArgs {
    #[arg(long, value_enum, default_value = "val")]
    split: Split,
    /// Annotation CSV; overrides the split's configured file.
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Comma-separated learning rates.
    #[arg(long, value_delimiter = ',')]
    lrs: Option<Vec<f64>>,
    /// Comma-separated weight decays.
    #[arg(long, value_delimiter = ',')]
    wds: Option<Vec<f64>>,
    /// Accept grids other than 5 x 4.
    #[arg(long)]
    allow_any_grid: bool,
    /// Heads trained concurrently.
    #[arg(long)]
    parallel_heads: Option<usize>,
    /// Store checkpoints of every head, not just each epoch's winner.
    #[arg(long)]
    keep_all_checkpoints: bool,
    #[arg(long, value_enum)]
    criterion: Option<CriterionArg>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    epoch: usize,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum CriterionArg {
    Action,
    Verb,
    Noun,
}

impl From<CriterionArg> for SelectionCriterion {
    fn from(c: CriterionArg) -> Self {
        match c {
            CriterionArg::Action => SelectionCriterion::ActionThenVerb,
            CriterionArg::Verb => SelectionCriterion::Field(Field::Verb),
            CriterionArg::Noun => SelectionCriterion::Field(Field::Noun),
        }
    }
}

#[derive(Args, Debug)]
struct SelectArgs {
    /// Metrics table; defaults to `<run-dir>/metrics.tsv`.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long, value_enum)]
    criterion: Option<CriterionArg>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ModeArg {
    Softmax,
    None,
}

#[derive(Args, Debug)]
struct EnsembleArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Divisions of the unit interval in the weight grid.
    #[arg(long)]
    grid_steps: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(Args, Debug)]
struct SubmitArgs {
    #[arg(long)]
    out: PathBuf,
    /// Score this annotation file with the ensemble's checkpoints.
    #[arg(long, conflicts_with = "scores")]
    annotations: Option<PathBuf>,
    /// Submit a stored scores file as is.
    #[arg(long)]
    scores: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long)]
    tolerance: Option<f64>,
    /// Finite-difference step.
    #[arg(long)]
    step: Option<f64>,
    /// Coordinates sampled per parameter tensor.
    #[arg(long)]
    samples: Option<usize>,
    /// Write the per-tensor report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 200)]
    n_train: usize,
    #[arg(long, default_value_t = 60)]
    n_val: usize,
    #[arg(long, default_value_t = 10)]
    n_verbs: u32,
    #[arg(long, default_value_t = 10)]
    n_nouns: u32,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.run_dir {
        cfg.run_dir = Some(d.clone());
    }
    Ok(cfg)
}

fn apply_data(cfg: &mut RunConfig, a: &DataArgs) {
    if let Some(p) = &a.train_annotations {
        cfg.data.train_annotations = Some(p.clone());
    }
    if let Some(p) = &a.val_annotations {
        cfg.data.val_annotations = Some(p.clone());
    }
    if let Some(p) = &a.features_dir {
        cfg.features.dir = Some(p.clone());
        cfg.features.source = FeatureSource::Files;
    }
    if a.synthetic {
        cfg.features.source = FeatureSource::Synthetic;
    }
    if let Some(d) = a.d_model {
        cfg.features.d_model = d;
    }
    if let Some(f) = a.video_fps {
        cfg.data.video_fps = f;
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    match cli.cmd {
        Command::Windows(a) => {
            apply_data(&mut cfg, &a.data);
            let (path, key) = match (a.annotations, a.split) {
                (Some(p), _) => (Some(p), "--annotations"),
                (None, Split::Train) => (cfg.data.train_annotations.clone(), "data.train_annotations"),
                (None, Split::Val) => (cfg.data.val_annotations.clone(), "data.val_annotations"),
            };
            let records = pipeline::load_split(&path, key)?;
            let n = pipeline::write_windows(&records, &cfg.window, cfg.data.video_fps, &a.out)?;
            info!("wrote {n} clips to {}", a.out.display());
        }
        Command::Train(a) => {
            apply_data(&mut cfg, &a.data);
            let t = &mut cfg.train;
            if let Some(v) = a.epochs {
                t.epochs = v;
            }
            if let Some(v) = a.batch_size {
                t.batch_size = v;
            }
            if let Some(v) = a.lrs {
                t.learning_rates = v;
            }
            if let Some(v) = a.wds {
                t.weight_decays = v;
            }
            if a.allow_any_grid {
                t.allow_any_grid = true;
            }
            if let Some(v) = a.parallel_heads {
                t.parallel_heads = v;
            }
            if a.keep_all_checkpoints {
                t.retention = CheckpointRetention::All;
            }
            if let Some(c) = a.criterion {
                t.criterion = c.into();
            }
            let summary = pipeline::train(&cfg)?;
            for (f, e) in &summary.best_per_field {
                info!("best {} epoch: {e}", f.as_str());
            }
        }
        Command::Eval(a) => {
            apply_data(&mut cfg, &a.data);
            let reports = pipeline::eval_epoch(&cfg, a.epoch)?;
            for (head, r) in reports {
                info!(
                    "epoch {} head {head}: verb {:?} noun {:?} action {:?}",
                    a.epoch,
                    r.overall(Field::Verb),
                    r.overall(Field::Noun),
                    r.overall(Field::Action)
                );
            }
        }
        Command::Select(a) => {
            let criterion = a.criterion.map_or(cfg.train.criterion, Into::into);
            let sel = match a.metrics {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                    let rows = jfaa_core::trainer::parse_metrics_tsv(&text, &path)?;
                    pipeline::select_from_rows(&rows, criterion)?.0
                }
                None => pipeline::select(cfg.run_dir()?, criterion)?,
            };
            for (epoch, head) in &sel.winners {
                info!("epoch {epoch}: head {head}");
            }
            for f in Field::ALL {
                if let Some(e) = sel.best_per_field.get(&f) {
                    println!("{} -> {e}", f.as_str());
                }
            }
        }
        Command::Ensemble(a) => {
            apply_data(&mut cfg, &a.data);
            if let Some(s) = a.grid_steps {
                cfg.ensemble.grid_steps = s;
            }
            if let Some(m) = a.mode {
                cfg.ensemble.mode = match m {
                    ModeArg::Softmax => NormMode::Softmax,
                    ModeArg::None => NormMode::None,
                };
            }
            cfg.validate()?;
            let m = pipeline::ensemble(&cfg, cfg.run_dir()?)?;
            for (f, fit) in Field::ALL.iter().zip(&m.fits) {
                let w: Vec<String> = fit
                    .weights
                    .iter()
                    .map(|w| format!("epoch {}: {}", m.candidate_epochs[w.candidate], w.weight))
                    .collect();
                info!("{} ({:.2}): {}", f.as_str(), fit.mt5r, w.join(", "));
            }
        }
        Command::Submit(a) => {
            apply_data(&mut cfg, &a.data);
            let scores = if let Some(p) = &a.scores {
                Some(read_scores(p)?)
            } else if let Some(p) = &a.annotations {
                let records = pipeline::load_split(&Some(p.clone()), "--annotations")?;
                Some(pipeline::predict_with_ensemble(&cfg, cfg.run_dir()?, &records)?)
            } else {
                None
            };
            let run_dir = match (&scores, cfg.run_dir.as_deref()) {
                (Some(_), d) => d.unwrap_or(Path::new(".")),
                (None, _) => cfg.run_dir()?,
            };
            let n = pipeline::submit(&cfg, run_dir, scores, &a.out)?;
            info!("wrote {n} instances to {}", a.out.display());
        }
        Command::Gradcheck(a) => {
            let mut g = GradCheckConfig { seed: cfg.seed, ..GradCheckConfig::default() };
            if let Some(t) = a.tolerance {
                g.tolerance = t;
            }
            if let Some(s) = a.step {
                g.step = s;
            }
            if let Some(s) = a.samples {
                g.samples_per_tensor = s;
            }
            let report = check_probe_gradients(&g)?;
            for t in &report.tensors {
                let status = if t.passed { "ok" } else { "FAIL" };
                info!("{status:>4} {:<28} rel {:.3e} ({} coords)", t.name, t.rel_error, t.coordinates);
            }
            if let Some(p) = &a.report {
                let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
                std::fs::write(p, text).map_err(|e| Error::io(p, e))?;
            }
            if !report.passed {
                return Err(Error::Check(format!(
                    "gradient check failed: max relative error {:.3e} exceeds {:.1e}",
                    report.max_rel_error, g.tolerance
                )));
            }
            println!("gradcheck passed: max relative error {:.3e}", report.max_rel_error);
        }
        Command::Synth(a) => synth(&cfg, &a)?,
    }
    Ok(())
}

fn synth(cfg: &RunConfig, a: &SynthArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let split = |n, prefix: &str| SynthSplit {
        n_instances: n,
        n_verbs: a.n_verbs,
        n_nouns: a.n_nouns,
        n_participants: 4,
        id_prefix: prefix.into(),
        seed: cfg.seed,
    };
    let train = synth_annotations(&split(a.n_train, "train"));
    let val = synth_annotations(&split(a.n_val, "val"));
    write_annotations(&a.out_dir.join("train.csv"), &train)?;
    write_annotations(&a.out_dir.join("val.csv"), &val)?;
    let mut out = cfg.clone();
    out.run_dir = Some("run".into());
    out.data.train_annotations = Some("train.csv".into());
    out.data.val_annotations = Some("val.csv".into());
    out.features.source = FeatureSource::Synthetic;
    let path = a.out_dir.join("config.toml");
    std::fs::write(&path, out.to_toml()).map_err(|e| Error::io(&path, e))?;
    info!("wrote {} train and {} val records to {}", train.len(), val.len(), a.out_dir.display());
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Check => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
