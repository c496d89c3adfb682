//! `crossmac` command-line driver.
//!
//!   crossmac run --scenario scenarios/shadowed_urban_40.json --protocol cla-amac --seed 1000 --out out/
//!   crossmac batch --scenario scenarios/shadowed_urban_40.json --protocols dcf,cla-amac --runs 20 --seed-base 1000 --out out/
//!   crossmac compare out/dcf out/cla-amac --out gains.csv
//!   crossmac validate --scenario scenarios/shadowed_urban_40.json

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Parser, Subcommand};
use crossmac_core::harness::{self, BatchConfig, HarnessError};
use crossmac_core::scenario::{Protocol, Scenario, ScenarioError};
use crossmac_core::trace::TraceOptions;

const EXIT_INVALID: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "crossmac", version, about = "Deterministic ad hoc wireless MAC simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// One simulation run.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        protocol: Protocol,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Per-node MAC trace.
        #[arg(long)]
        trace_mac: bool,
        /// Tab-separated kernel event log.
        #[arg(long)]
        trace_events: bool,
        /// Periodic knowledge-base snapshots.
        #[arg(long)]
        trace_kb: bool,
        #[arg(long)]
        trace_gcp: bool,
    },
    /// Seeds `seed_base .. seed_base + runs` for each protocol, plus summaries.
    Batch {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "dcf,basic-pc,cla-amac")]
        protocols: Vec<Protocol>,
        #[arg(long, default_value_t = 20)]
        runs: u64,
        #[arg(long, default_value_t = 1000)]
        seed_base: u64,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads; defaults to all cores.
        #[arg(long)]
        parallel: Option<usize>,
    },
    /// Gains of one batch directory over another.
    Compare {
        base_dir: PathBuf,
        var_dir: PathBuf,
        #[arg(long, default_value = "gains.csv")]
        out: PathBuf,
    },
    /// Checks a scenario file and prints its effective parameters.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Prints the default scenario as JSON.
    Defaults,
}

fn load(path: &Path) -> Result<Scenario, ScenarioError> {
    let sc = Scenario::load(path)?;
    sc.validate()?;
    Ok(sc)
}

fn exit_for(err: &anyhow::Error) -> u8 {
    let invalid = err.chain().any(|e| {
        e.downcast_ref::<ScenarioError>().is_some()
            || matches!(e.downcast_ref::<HarnessError>(), Some(HarnessError::Scenario(_)))
    });
    if invalid {
        EXIT_INVALID
    } else {
        EXIT_RUNTIME
    }
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run { scenario, protocol, seed, out, trace_mac, trace_events, trace_kb, trace_gcp } => {
            let sc = load(&scenario).with_context(|| format!("scenario {}", scenario.display()))?;
            let trace = TraceOptions { mac: trace_mac, kb: trace_kb, gcp: trace_gcp, events: trace_events };
            let started = Instant::now();
            let run = harness::run_with(&sc, protocol, seed, trace)?;
            harness::write_run(&out, &run.result, &run.traces)?;
            let r = &run.result;
            log::info!("{} events in {:.2?}", r.metadata.events_processed, started.elapsed());
            println!(
                "{} {} seed={} received={}/{} throughput={:.4}Mbps collisions/node={:.2} lnd={}",
                sc.name,
                protocol,
                seed,
                r.packets_received,
                r.packets_sent,
                r.throughput_mbps,
                r.mean_collisions_per_node,
                r.lnd_s.map_or("-".into(), |v| format!("{v:.3}s")),
            );
        }
        Command::Batch { scenario, protocols, runs, seed_base, out, parallel } => {
            let sc = load(&scenario).with_context(|| format!("scenario {}", scenario.display()))?;
            anyhow::ensure!(runs > 0, "--runs must be at least 1");
            let cfg =
                BatchConfig { protocols, runs, seed_base, out: out.clone(), parallel, trace: TraceOptions::default() };
            let summaries = harness::batch(&sc, &cfg)?;
            for (p, s) in &summaries {
                let m = |metric| s.metric(metric).mean.map_or("-".into(), |v: f64| format!("{v:.4}"));
                println!(
                    "{p}: runs={} received={} collisions/node={} lnd={} delay={}",
                    s.runs,
                    m(harness::Metric::PacketsReceived),
                    m(harness::Metric::Collisions),
                    m(harness::Metric::LndS),
                    m(harness::Metric::MeanDelayS),
                );
            }
            if let (Some(base), Some(var)) = (summaries.get(&Protocol::Dcf), summaries.get(&Protocol::ClaAmac)) {
                let rows = harness::gains(base, var)?;
                let path = out.join("gains.csv");
                harness::write_atomic(&path, harness::gains_csv(&rows).as_bytes())?;
                println!("gains written to {}", path.display());
            }
        }
        Command::Compare { base_dir, var_dir, out } => {
            let rows = harness::compare(&base_dir, &var_dir, &out)?;
            print!("{}", harness::gains_csv(&rows));
        }
        Command::Validate { scenario } => {
            let sc = load(&scenario).with_context(|| format!("scenario {}", scenario.display()))?;
            println!("{} ok (hash {})", sc.name, sc.hash());
        }
        Command::Defaults => println!("{}", Scenario::default().to_json_pretty()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CROSSMAC_LOG", "warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if let Some(ScenarioError::Invalid(fields)) = err.chain().find_map(|e| e.downcast_ref::<ScenarioError>()) {
                for f in fields {
                    eprintln!("  {f}");
                }
            }
            ExitCode::from(exit_for(&err))
        }
    }
}
