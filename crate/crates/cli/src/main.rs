//! `psbench`: run straggler-mitigation experiments from TOML configs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use psbench_core::bench::{format_ms, ClockMode};
use psbench_core::runner::{
    compare_to_dir, run_to_dir, sweep_to_dir, ExperimentConfig, ModeSummary, RunResult,
};
use psbench_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "psbench",
    version,
    about = "Parameter-server straggler mitigation testbed"
)]
struct Cli {
    /// Output directory; each run writes to <out>/<run_id>/.
    #[arg(long, global = true, default_value = "results")]
    out: PathBuf,
    /// Override the clock mode of every config.
    #[arg(long, global = true, value_enum)]
    clock: Option<Clock>,
    /// Override the seed of every config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Log progress to stderr (repeat for more detail).
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Clock {
    Real,
    Virtual,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment.
    Run { config: PathBuf },
    /// Run configs that differ only in sync mode and mitigation, and report
    /// each against the baseline mode.
    Compare {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
        #[arg(long, default_value = "bsp")]
        baseline: String,
        /// Directory name for the comparison summary under --out.
        #[arg(long, default_value = "compare")]
        name: String,
    },
    /// Run one config once per value of a parameter.
    Sweep {
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        config: PathBuf,
    },
}

fn load(cli: &Cli, path: &Path) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    match cli.clock {
        Some(Clock::Real) => cfg.clock_mode = ClockMode::Real,
        Some(Clock::Virtual) => cfg.clock_mode = ClockMode::Virtual,
        None => {}
    }
    Ok(cfg)
}

fn print_rows(rows: &[ModeSummary]) {
    println!(
        "{:<24} {:<12} {:<18} {:>14} {:>16} {:>10} {:>10}",
        "run_id", "mode", "pattern", "avg_iter_ms", "total_waste_ms", "d_iter%", "d_waste%"
    );
    let pct = |p: Option<f64>| p.map(|v| format!("{v:.1}")).unwrap_or_else(|| "-".into());
    for r in rows {
        println!(
            "{:<24} {:<12} {:<18} {:>14} {:>16} {:>10} {:>10}",
            r.run_id,
            r.mode,
            r.pattern,
            format_ms(r.avg_iter_ticks),
            format_ms(r.total_waste_ticks),
            pct(r.pct_vs_bsp_iter),
            pct(r.pct_vs_bsp_waste)
        );
    }
}

fn print_run(r: &RunResult) {
    print_rows(&[r.summary()]);
    println!(
        "objective {:.6} -> {:.6}, max clock gap {}",
        r.objective_initial, r.objective_final, r.max_gap
    );
}

fn execute(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Run { config } => {
            let r = run_to_dir(&load(cli, config)?, &cli.out)?;
            print_run(&r);
            println!("wrote {}", cli.out.join(&r.config.run_id).display());
        }
        Cmd::Compare {
            configs,
            baseline,
            name,
        } => {
            let cfgs = configs
                .iter()
                .map(|p| load(cli, p))
                .collect::<Result<Vec<_>>>()?;
            let (report, dir) = compare_to_dir(&cfgs, baseline, &cli.out, name)?;
            print_rows(&report.rows);
            println!("wrote {}", dir.display());
        }
        Cmd::Sweep {
            param,
            values,
            config,
        } => {
            let cfg = load(cli, config)?;
            let (runs, dir) = sweep_to_dir(&cfg, param, values, &cli.out)?;
            let rows: Vec<ModeSummary> = runs.iter().map(RunResult::summary).collect();
            print_rows(&rows);
            println!("wrote {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("psbench: {e}");
            ExitCode::from(exit_status(&e))
        }
    }
}

fn exit_status(e: &Error) -> u8 {
    e.exit_code().clamp(1, 255) as u8
}
