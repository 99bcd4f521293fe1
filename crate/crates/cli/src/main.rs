//! `dvfault` command-line tool.
//!
//! Exit status is 0 on success, 1 for usage errors and 2 when a run fails.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "dvfault", version, about = "Fault-sensitivity search and simulated DVFS fault injection for CNNs")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Rank candidate fault targets by sensitivity and write the table.
    Sensitivity(SensitivityArgs),
    /// Run a sensitivity-guided attack campaign from a config file.
    Attack(CampaignArgs),
    /// Run the random-fault baseline campaign from a config file.
    Baseline(CampaignArgs),
    /// Sweep a (V_l, F_h) grid and tabulate glitch outcome rates.
    Calibrate(CalibrateArgs),
    /// Refine glitch parameters with the genetic search.
    Evolve(CampaignArgs),
    /// Recompute summary and confusion tables from a trial log.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct SensitivityArgs {
    /// Model file (LSNM).
    #[arg(long)]
    model: PathBuf,
    /// IDX image file.
    #[arg(long)]
    images: PathBuf,
    /// IDX label file.
    #[arg(long)]
    labels: PathBuf,
    /// Score one input (input-dependent) by its index in the dataset.
    #[arg(long, conflicts_with = "sample")]
    index: Option<usize>,
    /// Accumulate over a seeded sample of this many inputs (input-independent).
    #[arg(long)]
    sample: Option<usize>,
    /// element, exponent, mantissa, parts or bit.
    #[arg(long, default_value = "element")]
    granularity: String,
    /// Rank toward this class instead of away from the true label.
    #[arg(long)]
    target_class: Option<usize>,
    /// Keep only the top N targets.
    #[arg(long)]
    top: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CampaignArgs {
    /// Campaign config file.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Attack toward this class (attack only).
    #[arg(long)]
    target_class: Option<usize>,
    /// Override the number of trials.
    #[arg(long)]
    trials: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    /// Device profile file.
    #[arg(long)]
    profile: PathBuf,
    /// Voltage grid as START..END:STEP in mV.
    #[arg(long, default_value = "600..800:10")]
    v_grid: String,
    /// Frequency offset grid over F_G as START..END:STEP in MHz.
    #[arg(long, default_value = "10..510:25")]
    offset_grid: String,
    /// Baseline GPU frequency.
    #[arg(long, default_value_t = 1500.0)]
    f_g: f64,
    /// Baseline GPU voltage.
    #[arg(long, default_value_t = 800.0)]
    v_g: f64,
    /// Glitch hold in ms.
    #[arg(long, default_value_t = 2.0)]
    t_d: f64,
    /// Glitches per cell.
    #[arg(long, default_value_t = 1000)]
    trials: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Trial log (JSON lines) written by `attack` or `baseline`.
    #[arg(long)]
    trials: PathBuf,
    /// Number of classes.
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Sensitivity(a) => commands::sensitivity(a),
        Command::Attack(a) => commands::attack(a),
        Command::Baseline(a) => commands::baseline(a),
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Evolve(a) => commands::evolve(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
