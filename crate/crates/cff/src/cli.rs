//! Subcommands of the `cff` binary.
//!
//! Exit codes: 0 on success, 1 when a check fails its tolerance (gradient
//! check, pipeline equivalence), 2 for configuration and I/O errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cff_core::data::{Dataset, Split};
use cff_core::training::{
    final_layer_features, predict_goodness, predict_head, prepare_data, run_experiment, top_k_accuracy,
    train_cff_batch, Clock, ExperimentConfig, ForwardMode, NoClock, PassCounter, Progress, Trainer,
};

use crate::checkpoint::Checkpoint;
use crate::config::{load_config, RunManifest};
use crate::formats::{dataset_files, load};
use crate::pipeline::{first_difference, run_pipeline_epoch, step_count_model, StageState};
use crate::plot::{plot_csv, PlotKind};
use crate::report::{export_embeddings, save_pipeline_stats, save_train_log};
use crate::gradcheck;

#[derive(Debug, Parser)]
#[command(name = "cff", version, about = "Layer-local Forward-Forward and contrastive Forward-Forward experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an encoder and its head, then report test accuracy.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Check the closed-form contrastive gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Compare layer-pipelined and sequential training on the same batches.
    Pipeline(PipelineArgs),
    /// Render a training-log CSV as SVG.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Directory holding `mnist/` and `cifar-10-batches-bin/`.
    #[arg(long, env = "CFF_DATA_DIR", default_value = "data")]
    pub dataset_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML experiment config, or the `manifest.json` of an earlier run.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config's epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Output directory; defaults to `runs/<config name>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write zero for every duration so identical runs give identical logs.
    #[arg(long)]
    pub no_wall_time: bool,
    /// Also write the test set's final-layer embeddings.
    #[arg(long)]
    pub export_embeddings: bool,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Goodness,
    Head,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// `checkpoint.bin` written by `cff train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Goodness scoring over every label (FF and SymBa) or the linear head.
    #[arg(long, value_enum)]
    pub mode: EvalMode,
    /// Count a hit when the true class is among the k best scores.
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Random instances to check.
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// One-forward contrastive config.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; stages beyond the cap share workers round-robin.
    /// Defaults to one worker per layer.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Training batches fed through the pipeline.
    #[arg(long, default_value_t = 50)]
    pub batches: usize,
    /// Directory for `pipeline_stats.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// `train_log.csv` written by `cff train`.
    #[arg(long)]
    pub csv: PathBuf,
    #[arg(long, value_enum, default_value = "loss")]
    pub kind: PlotKind,
    /// Value column; defaults to `loss`, or `rk_pct` for `rk`.
    #[arg(long)]
    pub column: Option<String>,
    /// Output file; defaults to the CSV path with an `.svg` extension.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(msg: impl std::fmt::Display) -> Self {
        CliError {
            code: 2,
            message: msg.to_string(),
        }
    }

    pub fn check(msg: impl std::fmt::Display) -> Self {
        CliError {
            code: 1,
            message: msg.to_string(),
        }
    }
}

pub type CliResult = Result<(), CliError>;

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Pipeline(a) => cmd_pipeline(&a),
        Command::Plot(a) => cmd_plot(&a),
    }
}

struct WallClock(Instant);

impl Clock for WallClock {
    fn seconds(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

fn load_split(root: &Path, cfg: &ExperimentConfig, split: Split) -> Result<Dataset, CliError> {
    if let Some(missing) = dataset_files(root, cfg.dataset, split).into_iter().find(|f| !f.exists()) {
        return Err(CliError::config(format!("dataset file not found: {}", missing.display())));
    }
    load(root, cfg.dataset, split).map_err(CliError::config)
}

fn config_with_overrides(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let mut cfg = load_config(path).map_err(CliError::config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn mkdir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| CliError::config(format!("{}: {e}", dir.display())))
}

fn percent(acc: f64) -> String {
    format!("{:.2}%", 100.0 * acc)
}

pub fn cmd_train(args: &TrainArgs) -> CliResult {
    let mut cfg = config_with_overrides(&args.config, args.seed)?;
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    cfg.validate().map_err(CliError::config)?;
    let root = &args.data.dataset_dir;
    let train = load_split(root, &cfg, Split::Train)?;
    let test = load_split(root, &cfg, Split::Test)?;
    let out = args.out.clone().unwrap_or_else(|| {
        let name = if cfg.name.is_empty() { cfg.algorithm.to_string() } else { cfg.name.clone() };
        PathBuf::from("runs").join(name)
    });
    mkdir(&out)?;
    RunManifest::new(&cfg, root, &out)
        .and_then(|m| m.save(&out.join("manifest.json")))
        .map_err(CliError::config)?;

    let data = prepare_data(&cfg, &train, &test).map_err(CliError::config)?;
    let wall = WallClock(Instant::now());
    let clock: &dyn Clock = if args.no_wall_time { &NoClock } else { &wall };
    let mut observer = |p: &Progress| match p {
        Progress::Epoch {
            epoch,
            train_loss,
            val_loss,
            seconds,
        } => {
            let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ");
            eprintln!(
                "epoch {epoch:>3}  train loss [{}]  val loss [{}]  {seconds:.1}s",
                fmt(train_loss),
                fmt(val_loss)
            );
        }
        Progress::Head { best_epoch, val_loss } => {
            eprintln!("head: best epoch {best_epoch}, val cross-entropy {val_loss:.4}");
        }
        Progress::Test(_) => {}
    };
    let outcome = run_experiment(&cfg, &data, clock, &mut observer).map_err(CliError::config)?;

    save_train_log(&outcome.log, &out.join("train_log.csv")).map_err(CliError::config)?;
    let ckpt = Checkpoint {
        config: cfg.clone(),
        epoch: outcome.best_epoch,
        encoder: outcome.encoder,
        optimizers: outcome.optimizers,
        table: outcome.table,
        head: outcome.head,
        normalization: data.normalization.clone(),
    };
    ckpt.save(&out.join("checkpoint.bin")).map_err(CliError::config)?;
    if args.export_embeddings {
        let images = data.normalization.apply(&data.test.images);
        let f = final_layer_features(&ckpt.encoder, &images, cfg.normalize_between, 500, &mut PassCounter::default())
            .map_err(CliError::config)?;
        export_embeddings(&f, &data.test.labels, &out.join("embeddings_test.csv")).map_err(CliError::config)?;
    }
    println!("{} on {:?}, encoder from epoch {}", cfg.algorithm, cfg.dataset, outcome.best_epoch);
    if let Some(r) = outcome.test.goodness {
        println!("test top-1 (goodness, {} passes/sample): {}", r.passes_per_sample, percent(r.accuracy));
    }
    if let Some(r) = outcome.test.head {
        println!("test top-1 (head, {} pass/sample): {}", r.passes_per_sample, percent(r.accuracy));
    }
    println!("outputs in {}", out.display());
    Ok(())
}

/// Accuracy and passes per sample of one inference mode on a checkpoint.
pub fn eval_checkpoint(ckpt: &Checkpoint, test: &Dataset, mode: EvalMode, k: usize) -> Result<(f64, f64), CliError> {
    let images = ckpt.normalization.apply(&test.images);
    let mut counter = PassCounter::default();
    let scores = match mode {
        EvalMode::Goodness => {
            let table = ckpt.table.as_ref().ok_or_else(|| {
                CliError::config(format!(
                    "goodness inference needs label patches, which a {} checkpoint does not have",
                    ckpt.config.algorithm
                ))
            })?;
            predict_goodness(&ckpt.encoder, &images, table, 500, &mut counter)
        }
        EvalMode::Head => {
            let head = ckpt
                .head
                .as_ref()
                .ok_or_else(|| CliError::config("the checkpoint has no trained head"))?;
            predict_head(&ckpt.encoder, head, &images, ckpt.config.normalize_between, 500, &mut counter)
        }
    }
    .map_err(CliError::config)?;
    let acc = top_k_accuracy(&scores, &test.labels, k).map_err(CliError::config)?;
    Ok((acc, counter.passes_per_sample()))
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult {
    let ckpt = Checkpoint::load(&args.checkpoint)
        .map_err(|e| CliError::config(format!("{}: {e}", args.checkpoint.display())))?;
    let test = load_split(&args.data.dataset_dir, &ckpt.config, Split::Test)?;
    let (acc, passes) = eval_checkpoint(&ckpt, &test, args.mode, args.k)?;
    let mode = match args.mode {
        EvalMode::Goodness => "goodness",
        EvalMode::Head => "head",
    };
    println!("test top-{} ({mode}): {}", args.k, percent(acc));
    println!("encoder passes per sample: {passes}");
    Ok(())
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> CliResult {
    let report = gradcheck::run(args.trials, args.seed);
    println!("{} trials, tolerance {:e}", report.trials, gradcheck::TOLERANCE);
    for c in &report.cases {
        let status = if c.max_rel_error <= gradcheck::TOLERANCE { "ok" } else { "FAIL" };
        println!("  {:<24} max rel error {:.3e} over {} checks  {status}", c.case.name(), c.max_rel_error, c.checked);
    }
    println!(
        "  clamped part: {} non-zero entries over {} clamped pairs",
        report.clamped_nonzero, report.clamped_pairs
    );
    if let Some((case, err, w)) = report.worst() {
        println!("worst: {} at (B={}, E={}, m={}) with {err:.3e}", case.name(), w.batch, w.dim, w.margin);
    }
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::check("gradient check exceeded its tolerance"))
    }
}

/// Result of [`pipeline_check`].
#[derive(Clone, Debug)]
pub struct PipelineCheck {
    pub stats: crate::pipeline::PipelineStats,
    pub sequential_seconds: f64,
    pub mismatch: Option<String>,
}

/// Trains the same batches sequentially and through the pipeline from the
/// same starting state and compares every parameter byte.
pub fn pipeline_check(
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
    batches: usize,
    workers: Option<usize>,
) -> Result<PipelineCheck, CliError> {
    if !cfg.algorithm.is_contrastive() || cfg.forward_mode != ForwardMode::One {
        return Err(CliError::config(
            "the pipeline runs one-forward contrastive training: set algorithm to cff or cff_m and forward_mode = \"one\"",
        ));
    }
    let data = prepare_data(cfg, train, test).map_err(CliError::config)?;
    let mut trainer = Trainer::new(cfg.clone()).map_err(CliError::config)?;
    let order = trainer.epoch_order(data.train.len());
    if batches == 0 || batches > order.len() {
        return Err(CliError::config(format!("batches must lie in [1, {}]", order.len())));
    }
    let mut prepared = Vec::with_capacity(batches);
    for idx in &order[..batches] {
        prepared.push(trainer.prepare_batch(&data.train, &data.normalization, idx).map_err(CliError::config)?);
    }
    let start: Vec<StageState> = trainer.encoder.layers.clone().into_iter().zip(trainer.optimizers.clone()).collect();
    let cfg_batch = trainer.cff_config().clone();

    let t0 = Instant::now();
    let mut encoder = trainer.encoder.clone();
    let mut optimizers = trainer.optimizers.clone();
    for (x, labels) in prepared.clone() {
        train_cff_batch(&mut encoder, &mut optimizers, x, &labels, &cfg_batch).map_err(CliError::config)?;
    }
    let sequential_seconds = t0.elapsed().as_secs_f64();
    let sequential: Vec<StageState> = encoder.layers.into_iter().zip(optimizers).collect();

    let workers = workers.unwrap_or(start.len());
    let (piped, stats) = run_pipeline_epoch(start, prepared, &cfg_batch, workers).map_err(CliError::check)?;
    Ok(PipelineCheck {
        stats,
        sequential_seconds,
        mismatch: first_difference(&sequential, &piped),
    })
}

pub fn cmd_pipeline(args: &PipelineArgs) -> CliResult {
    let cfg = config_with_overrides(&args.config, args.seed)?;
    let root = &args.data.dataset_dir;
    let train = load_split(root, &cfg, Split::Train)?;
    let test = load_split(root, &cfg, Split::Test)?;
    let check = pipeline_check(&cfg, &train, &test, args.batches, args.workers)?;
    let s = &check.stats;
    if let Some(dir) = &args.out {
        mkdir(dir)?;
        save_pipeline_stats(s, &dir.join("pipeline_stats.csv")).map_err(CliError::config)?;
    }
    let (model_t, seq_t) = step_count_model(s.layers as u64, s.batches);
    println!(
        "L={} N={} workers={}: T={} steps (model {model_t}, sequential {seq_t}), step speedup {:.2}",
        s.layers,
        s.batches,
        s.workers,
        s.steps,
        seq_t as f64 / s.steps as f64
    );
    for (i, st) in s.stages.iter().enumerate() {
        println!("  stage {}: busy {} idle {}", i + 1, st.busy, st.idle);
    }
    println!(
        "wall clock: pipeline {:.2}s, sequential {:.2}s, speedup {:.2}",
        s.wall_seconds,
        check.sequential_seconds,
        check.sequential_seconds / s.wall_seconds
    );
    match check.mismatch {
        None => {
            println!("parameters identical to the sequential trainer");
            Ok(())
        }
        Some(path) => Err(CliError::check(format!("pipelined parameters differ from sequential at {path}"))),
    }
}

pub fn cmd_plot(args: &PlotArgs) -> CliResult {
    let out = args.out.clone().unwrap_or_else(|| args.csv.with_extension("svg"));
    plot_csv(&args.csv, args.kind, args.column.as_deref(), &out).map_err(CliError::config)?;
    println!("wrote {}", out.display());
    Ok(())
}
