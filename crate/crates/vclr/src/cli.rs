//! The `vclr` command line: `gen` renders datasets, `train` fits one
//! configuration, `eval` scores a checkpoint, `robust` stress-tests one, and
//! `ablate` sweeps the recipe ladder.
//!
//! Exit codes: 0 on success, 2 for usage mistakes (bad flags, invalid
//! settings), 3 for data problems (missing or corrupt files, mismatched
//! artifacts), 4 when training aborts on a non-finite loss.
//!
//! Every command takes `--config FILE --seed N --out DIR`; flags override the
//! config file, and the fully resolved settings are echoed to
//! `<out>/experiment.json` so a run directory documents itself.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig};
use crate::evalkit::{evaluate, eval_records, ClassSplit, EvalConfig, EvalReport, Metric};
use crate::model::{DetectorConfig, ModelError};
use crate::ndtensor::{load_checkpoint, CheckpointError, ParamStore};
use crate::robustness::{
    distortion_table, perturb_csv, perturb_eval, score_distribution, scores_csv, Distortion,
    RobustError,
};
use crate::trainer::{run, AblationRow, TrainConfig, TrainError};
use crate::worldgen::{write_dataset, DatasetError, DatasetReader, Record, Split, ViewKind};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Robust(#[from] RobustError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// 2 for anything the user typed wrong, 4 for a numeric abort, 3 for
    /// everything wrong with data on disk.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(ConfigError::Invalid(_)) => 2,
            CliError::Train(TrainError::NonFinite { .. }) => 4,
            _ => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "vclr",
    version,
    about = "Open-world instance segmentation on procedural scenes, desk scale"
)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render train and val scene datasets to disk.
    Gen(GenArgs),
    /// Train one configuration into a run directory.
    Train(TrainArgs),
    /// Score a checkpoint: recall tables as CSV plus a stdout summary.
    Eval(EvalArgs),
    /// Weight-perturbation and input-distortion sweeps for a checkpoint.
    Robust(RobustArgs),
    /// Train every rung of the recipe ladder and emit one combined table.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct Shared {
    /// JSON experiment config; command-line flags override its values.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Experiment seed. Mandatory here or in the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory to write outputs into.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    shared: Shared,
    /// Training scenes to render.
    #[arg(long)]
    train: Option<usize>,
    /// Validation scenes to render.
    #[arg(long)]
    val: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Mode {
    /// Supervised on known classes only.
    Baseline,
    /// The full cross-view consistency recipe.
    Vclr,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    shared: Shared,
    /// Training dataset directory (a `gen` output's `train/`).
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Start from a named recipe instead of the config file's train section.
    /// Only the recipe switches change; capacity and schedule stay put.
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Drop the cosine consistency pull (keeps the proposal loss).
    #[arg(long)]
    no_sim: bool,
    /// Keep every query triplet regardless of its proposal overlap.
    #[arg(long)]
    no_filter: bool,
    /// Comma-separated student views, e.g. `natural,structure`.
    #[arg(long, value_delimiter = ',')]
    views: Option<Vec<ViewKind>>,
    /// Override the iteration count (handy for smoke runs).
    #[arg(long)]
    iterations: Option<usize>,
    /// Override the batch size.
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    shared: Shared,
    /// Checkpoint file written by `train`.
    #[arg(long, value_name = "FILE")]
    ckpt: PathBuf,
    /// Dataset directory to score (normally a `gen` output's `val/`).
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
}

#[derive(Debug, Args)]
pub struct RobustArgs {
    #[command(flatten)]
    shared: Shared,
    /// Checkpoint file written by `train`.
    #[arg(long, value_name = "FILE")]
    ckpt: PathBuf,
    /// Dataset directory to score against.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Run only the weight-perturbation sweep.
    #[arg(long)]
    perturb: bool,
    /// Run only the distortion table, histogramming this condition against
    /// clean: `contrast:<c>`, `noise:<sigma>`, or `occlude:<patches>`.
    #[arg(long, value_name = "KIND:LEVEL")]
    distort: Option<String>,
    /// Override the sweep's noise levels, e.g. `--stds 0,0.01`.
    #[arg(long, value_delimiter = ',')]
    stds: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    shared: Shared,
    /// Training dataset directory.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Held-out dataset directory to score each rung on.
    #[arg(long, value_name = "DIR")]
    val: PathBuf,
}

/// Entry point shared by the binary and the tests; returns the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Robust(a) => cmd_robust(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

// ---------------------------------------------------------------------------
// shared plumbing

fn load_config(shared: &Shared) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &shared.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => {
            let seed = shared.seed.ok_or_else(|| {
                CliError::Usage("--seed is required when no --config file is given".into())
            })?;
            ExperimentConfig::with_seed(seed)
        }
    };
    if let Some(seed) = shared.seed {
        cfg.seed = seed;
    }
    Ok(cfg.resolved())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(io_err(path))
}

/// Echo the resolved settings next to the outputs they produced.
fn write_echo(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    cfg.save(&out.join("experiment.json"))?;
    Ok(())
}

/// Load a checkpoint plus the dataset it is to be scored on, refusing
/// combinations whose geometry disagrees.
fn load_scored(
    ckpt: &Path,
    data: &Path,
) -> Result<(ParamStore, DetectorConfig, Vec<Record>), CliError> {
    let (params, meta) = load_checkpoint(ckpt, false)?;
    let det: DetectorConfig = serde_json::from_value(meta["detector"].clone()).map_err(|_| {
        CliError::Checkpoint(CheckpointError::Corrupt(format!(
            "{} carries no detector settings in its meta block",
            ckpt.display()
        )))
    })?;
    let reader = DatasetReader::open(data)?;
    if reader.manifest.image_size != det.image_size {
        return Err(CliError::Dataset(DatasetError::Corrupt {
            path: data.to_path_buf(),
            reason: format!(
                "dataset renders {}px images but the checkpoint expects {}px",
                reader.manifest.image_size, det.image_size
            ),
        }));
    }
    let records = reader.load_all()?;
    Ok((params, det, records))
}

/// Overlay one ladder rung's recipe switches on a base configuration,
/// keeping its capacity and schedule.
fn row_config(base: &TrainConfig, row: AblationRow, seed: u64) -> TrainConfig {
    let recipe = row.config(seed);
    TrainConfig {
        views: recipe.views,
        crop_paste: recipe.crop_paste,
        lambda_match: recipe.lambda_match,
        lambda_obj: recipe.lambda_obj,
        lambda_sim: recipe.lambda_sim,
        lambda_gt: recipe.lambda_gt,
        iou_floor: recipe.iou_floor,
        lgt_on_matched_queries: recipe.lgt_on_matched_queries,
        background_in_lobj: recipe.background_in_lobj,
        seed,
        ..base.clone()
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"))
}

// ---------------------------------------------------------------------------
// gen

fn cmd_gen(args: GenArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&args.shared)?;
    if let Some(n) = args.train {
        cfg.dataset.train = n;
    }
    if let Some(n) = args.val {
        cfg.dataset.val = n;
    }
    cfg.validate()?;

    let out = &args.shared.out;
    write_echo(&cfg, out)?;
    for (split, count, sub) in [
        (Split::Train, cfg.dataset.train, "train"),
        (Split::Val, cfg.dataset.val, "val"),
    ] {
        let dir = out.join(sub);
        let manifest = write_dataset(&dir, split, count, cfg.seed, &cfg.dataset.noise)?;
        println!(
            "{split}: {count} scenes at {}px -> {}",
            manifest.image_size,
            dir.display()
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&args.shared)?;
    let mut tc = match args.mode {
        None => cfg.train.clone(),
        Some(Mode::Baseline) => row_config(&cfg.train, AblationRow::GtOnly, cfg.seed),
        Some(Mode::Vclr) => row_config(&cfg.train, AblationRow::AddQualityFilter, cfg.seed),
    };
    if let Some(views) = args.views {
        tc.views = views;
    }
    if args.no_sim {
        tc.lambda_sim = 0.0;
    }
    if args.no_filter {
        tc.iou_floor = 0.0;
    }
    if let Some(n) = args.iterations {
        tc.iterations = n;
    }
    if let Some(n) = args.batch_size {
        tc.batch_size = n;
    }

    // Legal but pointless combinations deserve a heads-up, not a refusal.
    if tc.lambda_match > 0.0 && tc.views == [ViewKind::Natural] && !tc.crop_paste {
        eprintln!(
            "warning: consistency training with only the natural view and no \
             crop-paste; both branches will see identical pixels"
        );
    }
    if tc.lambda_sim > 0.0 && tc.lambda_match == 0.0 {
        eprintln!("warning: lambda_sim is ignored while lambda_match is 0");
    }

    cfg.train = tc;
    cfg.validate()?;
    write_echo(&cfg, &args.shared.out)?;
    let summary = run(&cfg.train, &args.data, &args.shared.out)?;
    println!(
        "trained {} steps, final loss {:.4}, {} checkpoints -> {}",
        summary.steps,
        summary.final_loss,
        summary.checkpoints.len(),
        summary.out_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

fn summary_table(report: &EvalReport, ks: &[usize]) -> String {
    let mut out = String::new();
    for &k in ks {
        let _ = writeln!(out, "AR@{k:<14} box    mask");
        for split in ClassSplit::ALL {
            let _ = writeln!(
                out,
                "  {:<14} {:>6} {:>6}",
                split.to_string(),
                fmt3(report.get(split, Metric::Box, k, "overall")),
                fmt3(report.get(split, Metric::Mask, k, "overall")),
            );
        }
        let _ = writeln!(
            out,
            "  {:<14} {:>6} {:>6}",
            "unknown subset",
            fmt3(report.mean_unknown_subset_ar(Metric::Box, k)),
            fmt3(report.mean_unknown_subset_ar(Metric::Mask, k)),
        );
    }
    out
}

fn fmt3(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"))
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.shared)?;
    cfg.validate()?;
    let (params, det, records) = load_scored(&args.ckpt, &args.data)?;
    let images = eval_records(&params, &det, &records)?;
    let report = evaluate(&images, &cfg.eval);

    let out = &args.shared.out;
    write_echo(&cfg, out)?;
    write_text(&out.join("report.csv"), &report.to_csv())?;
    print!("{}", summary_table(&report, &cfg.eval.ks));
    println!("report -> {}", out.join("report.csv").display());
    Ok(())
}

// ---------------------------------------------------------------------------
// robust

fn parse_distortion(s: &str) -> Result<Distortion, CliError> {
    let usage = || {
        CliError::Usage(format!(
            "bad distortion `{s}`; expected contrast:<c>, noise:<sigma>, or occlude:<patches>"
        ))
    };
    let (kind, level) = s.split_once(':').ok_or_else(usage)?;
    match kind {
        "contrast" => level
            .parse()
            .map(|c| Distortion::Contrast { c })
            .map_err(|_| usage()),
        "noise" => level
            .parse()
            .map(|sigma| Distortion::GaussianNoise { sigma })
            .map_err(|_| usage()),
        "occlude" => level
            .parse()
            .map(|patches| Distortion::Occlusion { patches })
            .map_err(|_| usage()),
        _ => Err(usage()),
    }
}

fn cmd_robust(args: RobustArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&args.shared)?;
    if let Some(stds) = args.stds {
        cfg.robustness.stds = stds;
    }
    cfg.validate()?;
    let focus = args.distort.as_deref().map(parse_distortion).transpose()?;

    let (params, det, records) = load_scored(&args.ckpt, &args.data)?;
    let out = &args.shared.out;
    write_echo(&cfg, out)?;

    let do_perturb = args.perturb || focus.is_none();
    let do_distort = focus.is_some() || !args.perturb;

    if do_perturb {
        let rows = perturb_eval(&params, &det, &records, &cfg.robustness)?;
        write_text(&out.join("perturb.csv"), &perturb_csv(&rows))?;
        for &std in &cfg.robustness.stds {
            let ar: Vec<f64> = rows
                .iter()
                .filter(|r| r.std == std)
                .map(|r| r.ar10_box)
                .collect();
            let mean = ar.iter().sum::<f64>() / ar.len() as f64;
            println!("perturb std {std}: mean box AR@10 {mean:.3} over {} trials", ar.len());
        }
    }

    if do_distort {
        let table = distortion_table(&params, &det, &records, cfg.seed)?;
        let mut csv = String::from("condition,ar10_box,ar10_mask\n");
        for (label, arb, arm) in &table {
            let _ = writeln!(csv, "{label},{arb:.6},{arm:.6}");
            println!("{label:<14} box AR@10 {arb:.3}  mask AR@10 {arm:.3}");
        }
        write_text(&out.join("distortions.csv"), &csv)?;

        // Score histograms: clean versus one chosen corruption.
        let chosen = focus.unwrap_or(Distortion::GaussianNoise { sigma: 0.2 });
        let hists = [
            score_distribution(&params, &det, &records, None, cfg.seed)?,
            score_distribution(&params, &det, &records, Some(chosen), cfg.seed)?,
        ];
        write_text(&out.join("scores.csv"), &scores_csv(&hists))?;
        for h in &hists {
            println!(
                "scores under {}: mean {:.3}, variance {:.4}",
                h.condition, h.mean, h.variance
            );
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate

fn cmd_ablate(args: AblateArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.shared)?;
    cfg.validate()?;
    let out = &args.shared.out;
    write_echo(&cfg, out)?;

    let mut csv = String::from(
        "row,recipe,unknown_subset_ar10_box,unknown_subset_ar10_mask,\
         known_ar10_box,known_ar10_mask,all_ar10_box,all_ar10_mask\n",
    );
    let eval_cfg = EvalConfig { ks: vec![10] };
    for (i, row) in AblationRow::ALL.into_iter().enumerate() {
        let tc = row_config(&cfg.train, row, cfg.seed);
        let run_dir = out.join(row.label());
        let summary = run(&tc, &args.data, &run_dir)?;
        let ckpt = summary
            .checkpoints
            .last()
            .expect("every run writes checkpoints");

        let (params, det, records) = load_scored(ckpt, &args.val)?;
        let images = eval_records(&params, &det, &records)?;
        let report = evaluate(&images, &eval_cfg);
        let cells = [
            report.mean_unknown_subset_ar(Metric::Box, 10),
            report.mean_unknown_subset_ar(Metric::Mask, 10),
            report.get(ClassSplit::Known, Metric::Box, 10, "overall"),
            report.get(ClassSplit::Known, Metric::Mask, 10, "overall"),
            report.get(ClassSplit::All, Metric::Box, 10, "overall"),
            report.get(ClassSplit::All, Metric::Mask, 10, "overall"),
        ];
        let _ = writeln!(
            csv,
            "{i},{},{}",
            row.label(),
            cells.map(fmt_opt).join(",")
        );
        println!(
            "{:<20} unknown-subset box AR@10 {}",
            row.label(),
            fmt_opt(cells[0])
        );
    }
    write_text(&out.join("ablation.csv"), &csv)?;
    println!("ladder -> {}", out.join("ablation.csv").display());
    Ok(())
}
