use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ets_cli::config::{extract_overrides, ExperimentConfig, ALIASES};
use ets_cli::{cmd_compare, cmd_report, cmd_run, cmd_sweep, parse_list, Reference, UsageError};
use ets_core::backend::mock::MockServer;
use ets_core::backend::SimBackend;
use ets_core::Method;

#[derive(Parser)]
#[command(
    name = "ets",
    version,
    about = "Verifier-guided tree search experiments",
    after_help = override_help()
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON config with policy, search, sim, suite and backend sections.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration over the suite.
    Run(Common),
    /// Run several methods at several widths; KV reduction is against the first method.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated methods, e.g. rebase,ets.
        #[arg(long)]
        methods: String,
        /// Comma-separated widths; defaults to policy.width.
        #[arg(long)]
        widths: Option<String>,
    },
    /// Sweep lambda_b for ETS and pick the largest value within 0.2 points of the reference.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated lambda_b values.
        #[arg(long, default_value = "1,1.5,2")]
        grid: String,
        /// lambda0, a method name, or a summary.csv from an earlier run.
        #[arg(long, default_value = "lambda0")]
        reference: String,
    },
    /// Summarize saved results files into a CSV.
    Report {
        /// results JSONL files; KV reduction is against the first.
        #[arg(long = "input", short, required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, short, default_value = "report.csv")]
        out: PathBuf,
        #[arg(long, short)]
        config: Option<PathBuf>,
    },
    /// Serve the simulator over the HTTP wire format.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long, short)]
        config: Option<PathBuf>,
    },
}

fn override_help() -> String {
    let aliases: Vec<String> = ALIASES
        .iter()
        .map(|(a, p)| format!("  --{a:<12} {p}"))
        .collect();
    format!(
        "Any config leaf can be set with --section.key VALUE (sections: policy, search, sim, suite, backend).\nShorthands:\n{}",
        aliases.join("\n")
    )
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn real_main() -> anyhow::Result<ExitCode> {
    let (args, overrides) = extract_overrides(std::env::args().collect())?;
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            e.print()?;
            return Ok(ExitCode::from(if usage { 2 } else { 0 }));
        }
    };
    let aborted = match cli.command {
        Command::Run(c) => {
            let cfg = ExperimentConfig::load(c.config.as_deref(), &overrides)?;
            cmd_run(&cfg, &c.out)?.aborted
        }
        Command::Compare {
            common,
            methods,
            widths,
        } => {
            let cfg = ExperimentConfig::load(common.config.as_deref(), &overrides)?;
            let methods: Vec<Method> = parse_list("methods", &methods)?;
            let widths = match widths {
                Some(w) => parse_list("widths", &w)?,
                None => vec![cfg.policy.width],
            };
            cmd_compare(&cfg, &common.out, &methods, &widths)?.aborted
        }
        Command::Sweep {
            common,
            grid,
            reference,
        } => {
            let cfg = ExperimentConfig::load(common.config.as_deref(), &overrides)?;
            let grid: Vec<f64> = parse_list("grid", &grid)?;
            let reference: Reference = reference.parse()?;
            cmd_sweep(&cfg, &common.out, &grid, &reference)?
                .outcome
                .aborted
        }
        Command::Report {
            inputs,
            out,
            config,
        } => {
            let cfg = ExperimentConfig::load(config.as_deref(), &overrides)?;
            cmd_report(&inputs, cfg.search.kv_bytes_per_token, &out)?;
            0
        }
        Command::Serve { addr, config } => {
            let cfg = ExperimentConfig::load(config.as_deref(), &overrides)?;
            let server = MockServer::start(SimBackend::new(cfg.sim.clone()), addr)?;
            println!("serving the simulator at {}", server.base_url());
            server.join();
            0
        }
    };
    if aborted > 0 {
        eprintln!("{aborted} problem(s) aborted");
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}
