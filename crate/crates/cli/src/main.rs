use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::{Arc, Mutex};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use cransim::output::{self, RunOptions, Verbosity};
use cransim::registry::Registry;
use cransim::scenario::{load_scenario, ScenarioConfig, TESTBED_TEMPLATE};
use cransim::service;

/// Discrete-time simulator for containerized BBU/RRH deployments.
#[derive(Parser)]
#[command(name = "cran-sim", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario and write metrics.csv, events.log and summary.json.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the scenario duration, in seconds.
        #[arg(long)]
        duration: Option<f64>,
        #[command(flatten)]
        strict: Strictness,
    },
    /// Check a scenario file and report every problem found.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
        #[command(flatten)]
        strict: Strictness,
    },
    /// Serve an empty registry over the line protocol.
    RegistryServe {
        #[arg(long, default_value = "127.0.0.1:2379")]
        addr: String,
    },
    /// Scenario templates.
    Scenario {
        #[command(subcommand)]
        command: ScenarioCmd,
    },
}

#[derive(Subcommand)]
enum ScenarioCmd {
    /// Write a built-in scenario as JSON.
    Init {
        #[arg(long, default_value = TESTBED_TEMPLATE)]
        template: String,
        /// Output file; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Strictness {
    /// Reject unknown fields (default).
    #[arg(long, overrides_with = "no_strict")]
    strict: bool,
    /// Ignore unknown fields.
    #[arg(long, overrides_with = "strict")]
    no_strict: bool,
}

impl Strictness {
    fn enabled(&self) -> bool {
        !self.no_strict
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(output::EXIT_ERROR as u8)
        }
    }
}

fn dispatch(cli: Cli) -> Result<u8> {
    match cli.command {
        Cmd::Run {
            scenario,
            out,
            seed,
            duration,
            strict,
        } => {
            let opts = RunOptions {
                seed,
                duration_s: duration,
                strict: strict.enabled(),
                verbosity: Verbosity::from_env().map_err(|e| anyhow!(e))?,
            };
            let report = output::run_command(&scenario, &out, &opts)?;
            let s = &report.summary;
            match &report.outcome.halt {
                None => println!(
                    "completed {} steps; fh {} Mb/s, {} pair(s) active; artifacts in {}",
                    s.steps,
                    s.final_fh_throughput_mbps,
                    s.final_pairs_active,
                    out.display()
                ),
                Some(err) => eprintln!("halted after {} steps: {err}", s.steps),
            }
            Ok(report.exit_code() as u8)
        }
        Cmd::Validate { scenario, strict } => {
            let cfg = load_scenario(&scenario, strict.enabled())?;
            println!(
                "{}: ok ({} nodes, {} sets, {} timeline entries)",
                scenario.display(),
                cfg.nodes.len(),
                cfg.sets.len(),
                cfg.timeline.len()
            );
            Ok(0)
        }
        Cmd::RegistryServe { addr } => {
            let listener = service::bind(&addr).with_context(|| format!("binding {addr}"))?;
            eprintln!("registry listening on {}", listener.local_addr()?);
            service::serve(listener, Arc::new(Mutex::new(Registry::new())))?;
            Ok(0)
        }
        Cmd::Scenario {
            command: ScenarioCmd::Init { template, out },
        } => {
            let Some(cfg) = ScenarioConfig::template(&template) else {
                bail!("unknown template {template:?} (available: {TESTBED_TEMPLATE})");
            };
            let json = cfg.to_json() + "\n";
            match out {
                Some(path) => {
                    fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?
                }
                None => print!("{json}"),
            }
            Ok(0)
        }
    }
}
