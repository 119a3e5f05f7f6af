//! Command-line front end: decodes, parameter sweeps, bound checks and
//! metric exports over the toy attention laboratory.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 internal
//! invariant violation.

mod commands;
mod config;
mod trace;

use clap::{Args, Parser, Subcommand};
use commands::UsageError;
use config::RunConfig;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "afip", version, about = "Attention-intervention laboratory")]
struct Cli {
    /// Run configuration JSON; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the configured seeds with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Force the score modulation on or off.
    #[arg(long, global = true, value_parser = ["on", "off"])]
    afip: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Greedy-decode every (seed, scene) episode and write the trace.
    Decode,
    /// Evaluate a k x tau x alpha x gamma grid into a CSV.
    Sweep(SweepArgs),
    /// Evaluate the attention complexity bound and its properties.
    Theory(TheoryArgs),
    /// Export var-profile, quantile and per-token CSVs from a trace.
    Metrics(MetricsArgs),
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, default_value = "6")]
    k_grid: String,
    #[arg(long, default_value = "0.5")]
    tau_grid: String,
    #[arg(long, default_value = "0.5")]
    alpha_grid: String,
    #[arg(long, default_value = "0.5")]
    gamma_grid: String,
}

#[derive(Args)]
struct TheoryArgs {
    /// Comma-separated per-head norm products a_h.
    #[arg(long, default_value = "1,1,1,1")]
    a: String,
    #[arg(long, default_value_t = 1.0)]
    b_w: f64,
    #[arg(long, default_value_t = 1.0)]
    b_wc: f64,
    #[arg(long, default_value_t = 1.0)]
    b_o: f64,
    #[arg(long, default_value_t = 1.0)]
    l_sigma: f64,
    #[arg(long, default_value_t = 1.0)]
    r: f64,
    /// Sample count n in the bound denominator.
    #[arg(long, default_value_t = 1)]
    n: usize,
    /// Also write the report as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Property-check the softmax Lipschitz inequality on random pairs.
    #[arg(long)]
    check_lemma1: bool,
    #[arg(long, default_value_t = 100_000)]
    trials: usize,
}

#[derive(Args)]
struct MetricsArgs {
    /// Trace JSONL produced by `decode`.
    #[arg(long)]
    trace: PathBuf,
    /// Number of quantile groups.
    #[arg(long, default_value_t = 4)]
    groups: usize,
}

fn effective_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(commands::usage_err)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seeds = vec![seed];
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    if let Some(afip) = &cli.afip {
        config.afip.enabled = afip == "on";
    }
    Ok(config)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Decode => commands::cmd_decode(&effective_config(&cli)?),
        Command::Sweep(args) => commands::cmd_sweep(
            &effective_config(&cli)?,
            &args.k_grid,
            &args.tau_grid,
            &args.alpha_grid,
            &args.gamma_grid,
        ),
        Command::Theory(args) => commands::cmd_theory(
            &args.a,
            args.b_w,
            args.b_wc,
            args.b_o,
            args.l_sigma,
            args.r,
            args.n,
            args.csv.as_deref(),
            args.check_lemma1,
            args.trials,
            cli.seed.unwrap_or(0),
        ),
        Command::Metrics(args) => {
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
            commands::cmd_metrics(&args.trace, &out, args.groups)
        }
    }
}

fn main() {
    env_logger::Builder::from_env(
        env_logger::Env::new()
            .filter("AFIP_LOG_LEVEL")
            .default_filter_or("error"),
    )
    .init();

    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        let code = if err.chain().any(|c| c.is::<UsageError>())
            || err.downcast_ref::<UsageError>().is_some()
        {
            2
        } else {
            3
        };
        std::process::exit(code);
    }
}
