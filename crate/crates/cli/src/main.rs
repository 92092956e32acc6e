//! `swan`: train, evaluate and tabulate segmented-waveguide ISAC agents.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use swan_core::agents::Algorithm;
use swan_core::env::{Protocol, ScenarioKind};
use swan_core::experiments::{self, ExperimentSpec, RunConfig, RunStatus, CURVE_WINDOW};
use swan_core::Error;

#[derive(Parser)]
#[command(name = "swan", version, about = "Segmented-waveguide ISAC experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one (config, algorithm, seed) run.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        algo: Algorithm,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        episodes: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every sweep point, algorithm and seed listed in a config file.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Median rate / illumination tables from finished runs.
    Table1 {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "HSSM")]
        protocol: Protocol,
        #[arg(long, default_value = "sparse")]
        scenario: ScenarioKind,
    },
    /// Smoothed learning curves and cross-seed bands.
    Curves {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = CURVE_WINDOW)]
        window: usize,
    },
    /// Physics and numerics self-tests for a configuration.
    Validate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load(config: Option<&PathBuf>) -> Result<RunConfig, Error> {
    match config {
        Some(path) => RunConfig::from_file(path),
        None => Ok(RunConfig::default()),
    }
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run {
            config,
            algo,
            seed,
            episodes,
            out,
        } => {
            let cfg = load(config.as_ref())?;
            match experiments::run_one(&cfg, algo, seed, episodes, &out)? {
                RunStatus::Trained(r) => println!(
                    "trained spec_hash={} algo={} seed={} rate_bpshz={} illumination_w={} seconds={:.1}",
                    r.spec_hash, r.algorithm, r.seed, r.eval_rate, r.eval_illumination, r.wall_clock_s
                ),
                RunStatus::Skipped((hash, algo, seed)) => println!("skipped spec_hash={hash} algo={algo} seed={seed}"),
            }
        }
        Command::Sweep { config, out } => {
            let spec = ExperimentSpec::from_file(&config, &out)?;
            let report = experiments::run(&spec)?;
            for r in &report.trained {
                println!("trained spec_hash={} algo={} seed={} rate_bpshz={}", r.spec_hash, r.algorithm, r.seed, r.eval_rate);
            }
            println!("trained={} skipped={} failed={}", report.trained.len(), report.skipped.len(), report.failures.len());
            if let Some((hash, algo, seed, err)) = report.failures.into_iter().next() {
                return Err(Error::Config(format!("run {hash}/{algo}/{seed} failed: {err}")));
            }
        }
        Command::Table1 { out, protocol, scenario } => {
            let table = experiments::table1(&out, protocol, scenario)?;
            let missing = table.missing();
            println!("wrote table1a.csv and table1b.csv; {} missing cells", missing.len());
            for m in missing {
                println!("missing {m}");
            }
        }
        Command::Curves { out, window } => {
            experiments::curves(&out, window)?;
            println!("wrote curves.csv and curve_bands.csv");
        }
        Command::Validate { config, seed } => {
            let cfg = load(config.as_ref())?;
            cfg.validate()?;
            let checks = experiments::validate(&cfg.system, seed)?;
            let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if !failed.is_empty() {
                return Err(Error::Config(format!("self-tests failed: {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
