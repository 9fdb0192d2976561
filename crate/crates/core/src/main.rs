use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use ctxeval::harness::{commands, run_pipeline, RunConfig};
use ctxeval::trace::{Primitives, Strictness};
use ctxeval::Error;

/// Evaluate token-level highlight explanations of context use.
///
/// Settings come from `--config` (TOML) and then from `CTXEVAL_*`
/// environment variables, e.g. `CTXEVAL_TRAIN__EPOCHS=4`.
#[derive(Parser)]
#[command(name = "ctxeval", version)]
struct Cli {
    /// Run configuration file; defaults apply when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `output_dir` from the config.
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,
    /// Log more (-v info, -vv debug). RUST_LOG takes precedence.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Every stage in order.
    Run,
    /// Write the fact corpus.
    Synth,
    /// Train the micro model on the corpus.
    Train,
    /// Memory check, regime assembly and behaviour labelling.
    Build,
    /// Attributions for every labelled instance.
    Explain,
    /// All metrics into metrics.csv and metrics.json.
    Evaluate,
    /// Plots and report.json from the metric files.
    Report,
    /// Print the resolved configuration as TOML.
    Config,
    /// Check a trace file against the schema.
    ValidateTrace {
        path: PathBuf,
        /// Accept attention rows within 1e-3 of unit sum.
        #[arg(long)]
        lenient: bool,
    },
    /// Export a trace of the run's labelled instances from the micro model.
    ExportTrace {
        #[arg(long)]
        trace: PathBuf,
        /// Leave out occlusion logits, so FA is unavailable from the trace.
        #[arg(long)]
        no_fa: bool,
        /// IG steps to record; 0 leaves IG out.
        #[arg(long, default_value_t = ctxeval::explainers::DEFAULT_IG_STEPS)]
        ig_steps: usize,
    },
}

fn load_config(cli: &Cli) -> ctxeval::Result<RunConfig> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), std::env::vars())?;
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn execute(cli: &Cli) -> anyhow::Result<()> {
    if let Command::ValidateTrace { path, lenient } = &cli.command {
        let strictness = if *lenient { Strictness::Lenient } else { Strictness::Strict };
        let report = commands::check_trace(path, strictness)?;
        for v in &report.violations {
            println!("line {}: {}: {}", v.line, v.field, v.message);
        }
        if !report.is_ok() {
            return Err(Error::Stage {
                stage: "validate-trace".into(),
                message: format!("{} violations in {} records", report.violations.len(), report.records),
            }
            .into());
        }
        println!("ok: {} records", report.records);
        return Ok(());
    }

    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Run => {
            eprintln!("{}", commands::plan_before_run(&cfg));
            let summary = run_pipeline(&cfg)?;
            println!(
                "{} metric rows written to {}",
                summary.metrics.len(),
                summary.root.display()
            );
        }
        Command::Synth => println!("{} fact records", commands::synth(&cfg)?),
        Command::Train => {
            commands::train(&cfg)?;
            println!("model written to {}", cfg.output_dir.display());
        }
        Command::Build => {
            let instances = commands::build(&cfg)?;
            println!("{} instances labelled", instances.len());
            eprintln!("{}", commands::plan_for(&cfg, &instances));
        }
        Command::Explain => println!("{} attribution vectors", commands::explain(&cfg)?),
        Command::Evaluate => println!("{} metric rows", commands::evaluate(&cfg)?),
        Command::Report => {
            let out = commands::report_run(&cfg)?;
            println!("{} rows, {} plots", out.rows, out.plots.len());
        }
        Command::Config => print!("{}", cfg.to_toml()?),
        Command::ExportTrace { trace, no_fa, ig_steps } => {
            let primitives = Primitives {
                fa_ablation_logits: !no_fa,
                ig_steps: (*ig_steps > 0).then_some(*ig_steps),
            };
            let n = commands::export_trace(&cfg, trace, primitives)
                .with_context(|| format!("exporting to {}", trace.display()))?;
            println!("{n} trace records written to {}", trace.display());
        }
        Command::ValidateTrace { .. } => unreachable!(),
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
