//! Command-line front end: pretrain backbones, run incremental experiments,
//! fuse adapters, evaluate checkpoints, export synthetic data, and render
//! accuracy plots.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use cil_core::error::{Error, Result};
use cil_core::fusion::fuse;
use cil_core::harness::checkpoint::{load_backbone, load_model, save_adapter, save_backbone, save_model};
use cil_core::harness::config::{load_config, ExperimentConfig};
use cil_core::harness::dataset::export_instances;
use cil_core::harness::experiment::{evaluate_stage, pretrain_backbone, run_from_config};
use cil_core::harness::plot::write_plot;
use cil_core::harness::report::{load_report, write_report, write_timing};
use cil_core::harness::synthetic::make_synthetic_stream;
use cil_core::inference::StrategyKind;
use cil_core::model::AdapterSet;

#[derive(Parser)]
#[command(
    name = "cil",
    version,
    about = "Class-incremental learning with fused task adapters"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Warm up a backbone on the auxiliary synthetic universe and save it.
    Pretrain(PretrainArgs),
    /// Run the incremental experiment and write report, plot, and model.
    Run(RunArgs),
    /// Rebuild the universal adapter from a model checkpoint's task adapters.
    Fuse(FuseArgs),
    /// Score a saved model on the config's evaluation stream.
    Eval(EvalArgs),
    /// Generate the synthetic stream and export it as delimited text.
    ExportData(ExportDataArgs),
    /// Render accuracy curves from a run report.
    Plot(PlotArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment config in TOML; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<ExperimentConfig> {
        match &self.config {
            Some(path) => load_config(path),
            None => Ok(ExperimentConfig::default()),
        }
    }
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Where to write the backbone checkpoint.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Directory for report.json, stages.tsv, curves.svg, model.ckpt.
    #[arg(long)]
    out: PathBuf,
    /// Override the training seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated strategies to score, overriding the config.
    #[arg(long)]
    strategies: Option<String>,
    /// Reuse a pretrained backbone checkpoint instead of pretraining.
    #[arg(long)]
    backbone: Option<PathBuf>,
}

#[derive(Args)]
struct FuseArgs {
    /// Model checkpoint whose task adapters to fuse.
    #[arg(long)]
    model: PathBuf,
    /// Where to write the fused adapter checkpoint.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Model checkpoint to score.
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
    /// Stage to evaluate through; defaults to the last trained stage.
    #[arg(long)]
    stage: Option<usize>,
    /// Comma-separated strategies to score, overriding the config.
    #[arg(long)]
    strategies: Option<String>,
}

#[derive(Args)]
struct ExportDataArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Directory for the per-task train/test files.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    /// report.json produced by a run.
    #[arg(long)]
    report: PathBuf,
    /// Where to write the SVG.
    #[arg(long)]
    out: PathBuf,
}

fn parse_strategies(spec: &str) -> Result<Vec<StrategyKind>> {
    spec.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect()
}

fn cmd_pretrain(args: PretrainArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let backbone = pretrain_backbone(&cfg.backbone, &cfg.pretrain)?;
    save_backbone(&backbone, &args.out)?;
    println!("backbone written to {}", args.out.display());
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let mut cfg = args.config.load()?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(spec) = &args.strategies {
        cfg.strategies = parse_strategies(spec)?;
    }
    cfg.validate()?;

    let pretrained = match &args.backbone {
        Some(path) => Some(load_backbone(path)?),
        None => None,
    };
    let started = Instant::now();
    let arts = run_from_config(&cfg, pretrained)?;
    let elapsed = started.elapsed().as_secs_f64();

    write_report(&arts.report, &args.out)?;
    write_timing(&args.out, elapsed)?;
    write_plot(&arts.report, &args.out.join("curves.svg"))?;
    save_model(&arts.state, &args.out.join("model.ckpt"))?;

    println!("run artifacts written to {}", args.out.display());
    println!("strategy         average  final");
    for (name, outcome) in &arts.report.strategies {
        println!("{name:<16} {:>7.4}  {:>5.4}", outcome.average, outcome.final_accuracy);
    }
    let last_selection = arts.report.selection_accuracy.last().copied().unwrap_or(0.0);
    println!("selection accuracy at final stage: {last_selection:.4}");
    Ok(())
}

fn cmd_fuse(args: FuseArgs) -> Result<()> {
    let state = load_model(&args.model)?;
    if state.task_adapters.is_empty() {
        return Err(Error::Data("the model checkpoint holds no task adapters to fuse".into()));
    }
    let refs: Vec<&AdapterSet> = state.task_adapters.iter().collect();
    let fused = fuse(&refs)?;
    save_adapter(&fused, &state.backbone.config, &args.out)?;
    println!(
        "fused {} task adapters into {}",
        state.task_adapters.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let state = load_model(&args.model)?;
    let strategies = match &args.strategies {
        Some(spec) => parse_strategies(spec)?,
        None => cfg.strategies.clone(),
    };
    let stage = args.stage.unwrap_or_else(|| state.num_tasks());
    let partition = cfg.protocol.split_classes()?;
    let stream = make_synthetic_stream(&cfg.synthetic, &partition)?;
    println!("stage {stage}");
    for strategy in strategies {
        let acc = evaluate_stage(&state, &stream, stage, strategy, cfg.eval_batch_size)?;
        println!("{strategy}\t{acc:.4}");
    }
    Ok(())
}

fn cmd_export_data(args: ExportDataArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let partition = cfg.protocol.split_classes()?;
    let stream = make_synthetic_stream(&cfg.synthetic, &partition)?;
    std::fs::create_dir_all(&args.out)?;
    let values = cfg.synthetic.seq_len * cfg.synthetic.token_dim;
    let mut files = 0;
    for task in &stream.tasks {
        let train = args.out.join(format!("task{}_train.csv", task.task_id));
        let test = args.out.join(format!("task{}_test.csv", task.task_id));
        export_instances(&train, &task.train, values)?;
        export_instances(&test, &task.test, values)?;
        files += 2;
    }
    println!("wrote {files} files to {}", args.out.display());
    Ok(())
}

fn cmd_plot(args: PlotArgs) -> Result<()> {
    let report = load_report(&args.report)?;
    write_plot(&report, &args.out)?;
    println!("plot written to {}", args.out.display());
    Ok(())
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Pretrain(args) => cmd_pretrain(args),
        Command::Run(args) => cmd_run(args),
        Command::Fuse(args) => cmd_fuse(args),
        Command::Eval(args) => cmd_eval(args),
        Command::ExportData(args) => cmd_export_data(args),
        Command::Plot(args) => cmd_plot(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
