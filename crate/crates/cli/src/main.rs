// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use meterpriv::fleet::FleetConfig;
use meterpriv_cli::{bench, bench_csv, keygen, simulate, Backend, RunConfig};

#[derive(Parser)]
#[command(name = "meterpriv", version, about = "Smart meter aggregation simulator and benchmark harness")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Fleet config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the fleet config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the fleet through one or more backends and write a JSON report.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Backend::All)]
        backend: Backend,
        /// Defaults to one billing period.
        #[arg(long)]
        slots: Option<u32>,
        /// Report path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-round latency across fleet sizes, as CSV.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Backend::All)]
        backend: Backend,
        #[arg(long, value_delimiter = ',', default_value = "10,50,100,200")]
        sizes: Vec<u16>,
        #[arg(long, default_value_t = 10)]
        runs: u32,
        /// Rounds per run.
        #[arg(long, default_value_t = 1)]
        slots: u32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write utility, authority and per-meter key files.
    Keygen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(common: &Common) -> Result<FleetConfig> {
    let mut fleet = FleetConfig::load(&common.config).with_context(|| format!("loading {}", common.config.display()))?;
    if let Some(seed) = common.seed {
        fleet.seed = seed;
    }
    Ok(fleet)
}

fn emit(out: Option<&PathBuf>, body: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, body).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

fn main_inner() -> Result<bool> {
    match Cli::parse().cmd {
        Cmd::Simulate { common, backend, slots, out } => {
            let mut cfg = RunConfig::new(load(&common)?, backend);
            if let Some(s) = slots {
                cfg.slots = s;
            }
            let report = simulate(&cfg)?;
            emit(out.as_ref(), &(report.to_json() + "\n"))?;
            for m in &report.mismatches {
                eprintln!("mismatch: {m}");
            }
            for b in &report.backends {
                if !b.flagged_by_error.is_empty() {
                    eprintln!("{}: slots lost to failed rounds: {:?}", b.backend, b.flagged_by_error);
                }
            }
            Ok(report.ok())
        }
        Cmd::Bench { common, backend, sizes, runs, slots, out } => {
            let mut cfg = RunConfig::new(load(&common)?, backend);
            cfg.slots = slots;
            let rows = bench(&cfg, &sizes, runs)?;
            emit(out.as_ref(), &bench_csv(&rows))?;
            Ok(true)
        }
        Cmd::Keygen { common, out } => {
            let fleet = load(&common)?;
            let seed = fleet.seed;
            let files = keygen(&fleet, seed, &out)?;
            eprintln!("wrote {} files to {}", files.len(), out.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match main_inner() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
