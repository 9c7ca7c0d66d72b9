use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dit_accel::harness::{
    calibrate, compare_outputs, import_trace, load_config, load_sweep, load_tensor, replay_trace,
    run_benchmark, run_sweep, write_outcome, RunMetrics,
};
use dit_accel::{Error, Result};

#[derive(Parser)]
#[command(
    name = "dit-accel",
    version,
    about = "Desk-scale DiT inference with caching, quantization and pruning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Baseline plus one configured run; writes trace, metrics and outputs.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Full-precision calibration pass; writes calibration.json.
    Calibrate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Runs every config listed in a sweep file, in parallel.
    Bench {
        #[arg(long)]
        sweep: PathBuf,
    },
    /// Re-derives the decisions in a trace from its logged measurements.
    Replay {
        #[arg(long)]
        trace: PathBuf,
    },
    /// MSE and PSNR of tensor file `b` against reference `a`.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
}

fn print_metrics(m: &RunMetrics) {
    println!(
        "{}  toggles={}  speedup_mac={:.3}  speedup_bit_mac={:.3}  mse={:.3e}  psnr={:.2} dB",
        m.run_id, m.toggles, m.speedup_mac, m.speedup_bit_mac, m.mse, m.psnr
    );
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config } => {
            let cfg = load_config(&config)?;
            let outcome = run_benchmark(&cfg)?;
            let dir = write_outcome(&outcome)?;
            print_metrics(&outcome.metrics);
            println!("wrote {}", dir.display());
        }
        Command::Calibrate { config } => {
            let cfg = load_config(&config)?;
            let (cal, path) = calibrate(&cfg)?;
            println!(
                "divergence p33={:.4e} p66={:.4e}  weight bits {:?}",
                cal.divergence.p33, cal.divergence.p66, cal.weight_plan.bits_per_layer
            );
            println!("wrote {}", path.display());
        }
        Command::Bench { sweep } => {
            let configs = load_sweep(&sweep)?;
            let merged = configs[0].output_dir().join("sweep.csv");
            for m in run_sweep(&configs, &merged)? {
                print_metrics(&m);
            }
            println!("wrote {}", merged.display());
        }
        Command::Replay { trace } => {
            let trace = import_trace(&trace)?;
            let report = replay_trace(&trace);
            for m in &report.mismatches {
                eprintln!("{m}");
            }
            if !report.ok() {
                return Err(Error::Trace {
                    line: 0,
                    message: format!("{} decisions differ on replay", report.mismatches.len()),
                });
            }
            println!("replayed {} records, all decisions match", report.records);
        }
        Command::Compare { a, b } => {
            let (mse, psnr) = compare_outputs(&load_tensor(&a)?, &load_tensor(&b)?)?;
            println!("mse={mse:.6e} psnr={psnr:.3}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
