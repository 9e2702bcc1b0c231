mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context as _};
use clap::{Parser, Subcommand};
use serde_json::json;

use commands::{Context, Output};
use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "ewhomog", version, about = "Monte Carlo laboratory for the random heat equation")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration; defaults are used for absent keys.
    #[arg(long, global = true)]
    config: Option<String>,

    /// Override a configuration value by dotted path, e.g. nu_eff.m=32.
    #[arg(long = "set", value_name = "PATH=VALUE", global = true)]
    set: Vec<String>,

    #[arg(long, global = true)]
    lambda: Option<f64>,

    /// Regeneration blocks for a_eff (diffusivity.blocks).
    #[arg(long, global = true)]
    blocks: Option<usize>,

    /// Comma-separated horizons for the zeta fit (zeta_fit.times).
    #[arg(long = "T", value_name = "T1,T2,...", global = true)]
    times: Option<String>,

    /// Output directory.
    #[arg(long, default_value = "out", global = true)]
    out: PathBuf,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Tabulate the covariance kernels.
    Kernels,
    /// Sample one realization of the smoothed noise field.
    SampleField,
    /// Solve the Nystrom eigenproblem.
    Eigenpair,
    /// Estimate the effective diffusivity.
    Diffusivity,
    /// Fit the renormalization constants.
    ZetaFit,
    /// Effective variance through the two-component chain.
    NuEff,
    /// Effective variance of the white-in-time equation.
    NuEffWhite,
    /// Tail of the nearby time of two tilted paths.
    NearbyTail,
    /// Annealed mean against the effective equation.
    MeanCheck,
    /// Edwards-Wilkinson fluctuation experiment.
    EwExperiment,
    /// The lambda = 0 baselines.
    Selftest,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Kernels => "kernels",
            Command::SampleField => "sample-field",
            Command::Eigenpair => "eigenpair",
            Command::Diffusivity => "diffusivity",
            Command::ZetaFit => "zeta-fit",
            Command::NuEff => "nu-eff",
            Command::NuEffWhite => "nu-eff-white",
            Command::NearbyTail => "nearby-tail",
            Command::MeanCheck => "mean-check",
            Command::EwExperiment => "ew-experiment",
            Command::Selftest => "selftest",
        }
    }
}

fn overrides(cli: &Cli) -> anyhow::Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for s in &cli.set {
        let (k, v) = s.split_once('=').ok_or_else(|| anyhow!("--set expects PATH=VALUE, got '{s}'"))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(l) = cli.lambda {
        out.push(("lambda".into(), l.to_string()));
    }
    if let Some(b) = cli.blocks {
        out.push(("diffusivity.blocks".into(), b.to_string()));
    }
    if let Some(t) = &cli.times {
        let ts = t.split(',').map(|v| v.trim().parse::<f64>()).collect::<Result<Vec<_>, _>>().with_context(|| format!("--T {t}"))?;
        out.push(("zeta_fit.times".into(), serde_json::to_string(&ts)?));
    }
    if let Ok(seed) = std::env::var("EWHOMOG_SEED") {
        let seed: u64 = seed.parse().with_context(|| format!("EWHOMOG_SEED={seed}"))?;
        out.push(("master_seed".into(), seed.to_string()));
    }
    Ok(out)
}

fn dispatch(cmd: Command, cx: &Context) -> anyhow::Result<Output> {
    match cmd {
        Command::Kernels => commands::kernels(cx),
        Command::SampleField => commands::sample_field_cmd(cx),
        Command::Eigenpair => commands::eigenpair(cx),
        Command::Diffusivity => commands::diffusivity(cx),
        Command::ZetaFit => commands::zeta_fit(cx),
        Command::NuEff => commands::nu_eff(cx),
        Command::NuEffWhite => commands::nu_eff_white(cx),
        Command::NearbyTail => commands::nearby_tail(cx),
        Command::MeanCheck => commands::mean_check(cx),
        Command::EwExperiment => commands::ew_experiment(cx),
        Command::Selftest => commands::selftest(cx),
    }
}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<ewhomog::Error>().is_some_and(|e| matches!(e, ewhomog::Error::Config(_) | ewhomog::Error::Contract(_)))
            || c.downcast_ref::<serde_json::Error>().is_some()
            || c.downcast_ref::<std::io::Error>().is_some()
    })
}

fn write_outputs(cli: &Cli, cfg: &RunConfig, hash: &str, out: &Output, started: Instant, exit_code: u8) -> anyhow::Result<()> {
    ewhomog::report::write_json(&cli.out.join("config.json"), cfg)?;
    ewhomog::report::write_json(&cli.out.join("report.json"), &out.report)?;
    ewhomog::report::write_csv(&cli.out.join("records.csv"), &out.records)?;
    let mut artifacts = vec!["config.json".to_string(), "report.json".into(), "records.csv".into()];
    artifacts.extend(out.artifacts.iter().cloned());
    let manifest = json!({
        "command": cli.command.name(),
        "version": env!("CARGO_PKG_VERSION"),
        "config_hash": hash,
        "master_seed": cfg.master_seed,
        "threads": rayon_threads(),
        "elapsed_seconds": started.elapsed().as_secs_f64(),
        "flags": out.flags,
        "exit_code": exit_code,
        "artifacts": artifacts,
    });
    ewhomog::report::write_json(&cli.out.join("manifest.json"), &manifest)?;
    Ok(())
}

fn rayon_threads() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let started = Instant::now();
    let cfg = match overrides(&cli).and_then(|o| config::resolve(cli.config.as_deref(), &o)) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    if let Err(e) = std::fs::create_dir_all(&cli.out) {
        eprintln!("error: cannot create {}: {e}", cli.out.display());
        return ExitCode::from(1);
    }
    let hash = cfg.hash();
    let cx = Context { cfg: &cfg, hash: &hash, out: &cli.out };
    let output = match dispatch(cli.command, &cx) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(if is_config_error(&e) { 1 } else { 2 });
        }
    };
    let code = if output.flags.is_empty() { 0 } else { 2 };
    for f in &output.flags {
        eprintln!("flag: {f}");
    }
    if let Err(e) = write_outputs(&cli, &cfg, &hash, &output, started, code) {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    println!("{}", serde_json::to_string_pretty(&output.report).unwrap_or_default());
    ExitCode::from(code)
}
