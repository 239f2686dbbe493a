use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lsfd_cli::checks::{verify_suite, Level};
use lsfd_cli::experiment::{run_experiment, ExperimentResults};
use lsfd_cli::export::export_all;
use lsfd_cli::presets::{preset_specs, Preset, Scale};
use lsfd_cli::spec::{ExperimentSpec, Mode};
use lsfd_cli::{CliError, CliResult, OUTPUT_DIR_ENV};
use lsfd_core::optimizer::arithmetic_op_count;

/// Two-layer decoding experiments for multi-cell Massive MIMO.
#[derive(Debug, Parser)]
#[command(name = "lsfd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run an experiment described by a JSON spec.
    Run { spec: PathBuf },
    /// Run the experiments behind one of the paper's figures.
    Preset {
        /// fig3 .. fig10
        name: String,
        #[arg(long, value_enum, default_value = "desk")]
        scale: Scale,
    },
    /// Run the verification suite (quick or full).
    Verify { level: String },
    /// Operation count of the joint optimizer.
    #[allow(non_snake_case)]
    Flops {
        #[arg(long = "L")]
        L: u64,
        #[arg(long = "K")]
        K: u64,
        #[arg(long = "N")]
        N: u64,
    },
}

fn output_dir() -> Option<PathBuf> {
    std::env::var_os(OUTPUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

fn run_and_export(spec: &ExperimentSpec) -> CliResult<ExperimentResults> {
    log::info!("running {} ({} drops)", spec.name, spec.drop_indices().len());
    let results = run_experiment(spec)?;
    let prefix = spec.output_prefix(output_dir().as_deref());
    for path in export_all(&results, &prefix)? {
        println!("wrote {}", path.display());
    }
    for s in results.summary() {
        println!("{} sweep {} mode ({}): mean sum SE per cell {:.4}", spec.name, s.sweep_value, s.mode, s.mean_sum_se);
    }
    for v in spec.sweep.points() {
        for (mode, base) in [
            (Mode::LsfdFixed, Mode::SingleFixed),
            (Mode::LsfdOptimized, Mode::SingleOptimized),
            (Mode::LsfdOptimized, Mode::LsfdFixed),
        ] {
            if let Some(g) = results.gain_percent(v, mode, base) {
                println!("{} sweep {v}: ({mode}) over ({base}) {g:+.2}%", spec.name);
            }
        }
    }
    Ok(results)
}

fn execute(command: Command) -> CliResult<()> {
    match command {
        Command::Run { spec } => {
            let text = std::fs::read_to_string(&spec)
                .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", spec.display())))?;
            run_and_export(&ExperimentSpec::from_json(&text)?)?;
        }
        Command::Preset { name, scale } => {
            let preset: Preset = name.parse()?;
            for spec in preset_specs(preset, scale) {
                run_and_export(&spec)?;
            }
        }
        Command::Verify { level } => {
            let level: Level = level.parse()?;
            let outcomes = verify_suite(level)?;
            for o in &outcomes {
                println!("{o}");
            }
            let failed: Vec<_> = outcomes.iter().filter(|o| !o.passed).map(|o| o.id.to_string()).collect();
            if !failed.is_empty() {
                return Err(CliError::Verification(format!("criteria {}", failed.join(", "))));
            }
        }
        Command::Flops { L, K, N } => println!("{}", arithmetic_op_count(L, K, N)),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
