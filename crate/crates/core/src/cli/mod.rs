//! Command-line entry point.
//!
//! Exit codes: 0 on success, 1 for invalid input (bad arguments, malformed
//! or invalid configs, unreadable datasets), 2 when a run fails or completes
//! with failed checks.

pub mod commands;
pub mod config;
pub mod manifest;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use config::{config_hash, load_config, to_toml, CommandConfig};
use manifest::{RunContext, RunManifest, CONFIG_FILE};

pub const THREADS_ENV: &str = "CRL_LAB_THREADS";

#[derive(Debug, Parser)]
#[command(name = "crl-lab", version, about = "Identifiability experiments for causal representation learning")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// TOML config; defaults are used for missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default: `crl-lab-out/<command>`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; overrides CRL_LAB_THREADS.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Single-threaded, bitwise reproducible execution.
    #[arg(long, global = true)]
    pub deterministic: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a multi-environment dataset with ground truth.
    GenData,
    /// Estimate an IMA or IGCI contrast.
    ImaEval,
    /// IMA contrast of MPA-composed mixings over rotation angles.
    ImaSweep,
    /// Flow-based BSS with and without the IMA regularizer.
    ImaTrain,
    /// Contrastive multi-view content identification.
    Multiview,
    /// Multi-environment CRL candidate selection.
    CrlSweep,
    /// Mechanism-shift-score causal discovery.
    Mss,
    /// Causal influence between two nodes.
    Influence,
    /// Run the numerical property suite.
    VerifyProps,
    /// Aggregate the outputs of a finished run.
    Report {
        /// Directory of the run to summarize.
        run_dir: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::ImaEval => "ima-eval",
            Command::ImaSweep => "ima-sweep",
            Command::ImaTrain => "ima-train",
            Command::Multiview => "multiview",
            Command::CrlSweep => "crl-sweep",
            Command::Mss => "mss",
            Command::Influence => "influence",
            Command::VerifyProps => "verify-props",
            Command::Report { .. } => "report",
        }
    }
}

/// Thread count: `--deterministic` forces one, then `--threads`, then the
/// environment variable, then all cores.
pub fn resolve_threads(global: &GlobalArgs) -> Result<usize> {
    if global.deterministic {
        return Ok(1);
    }
    if let Some(t) = global.threads {
        return if t == 0 { Err(Error::Config("--threads must be at least 1".into())) } else { Ok(t) };
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(t) if t > 0 => Ok(t),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok((manifest, None)) => {
            println!("{}: wrote {} artifacts", manifest.command, manifest.artifacts.len());
            0
        }
        Ok((_, Some(note))) => {
            eprintln!("error: {note}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn execute(cli: &Cli) -> Result<(RunManifest, Option<String>)> {
    let threads = resolve_threads(&cli.global)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {threads} threads: {e}")))?;
    let g = &cli.global;
    pool.install(|| match &cli.command {
        Command::GenData => with_config(cli, threads, commands::gen_data),
        Command::ImaEval => with_config(cli, threads, commands::ima_eval),
        Command::ImaSweep => with_config(cli, threads, commands::ima_sweep),
        Command::ImaTrain => with_config(cli, threads, commands::ima_train),
        Command::Multiview => with_config(cli, threads, commands::multiview),
        Command::CrlSweep => with_config(cli, threads, commands::crl_sweep_cmd),
        Command::Mss => with_config(cli, threads, commands::mss),
        Command::Influence => with_config(cli, threads, commands::influence),
        Command::VerifyProps => with_config(cli, threads, commands::verify_props),
        Command::Report { run_dir } => {
            let source = RunManifest::load(run_dir)?;
            let out = g.out.clone().unwrap_or_else(|| run_dir.join("report"));
            run_in(g, "report", &out, threads, |cfg, ctx| commands::report(cfg, run_dir, &source, ctx))
        }
    })
}

fn with_config<C: CommandConfig>(
    cli: &Cli,
    threads: usize,
    body: fn(&C, &mut RunContext) -> commands::Outcome,
) -> Result<(RunManifest, Option<String>)> {
    let name = cli.command.name();
    let out = cli.global.out.clone().unwrap_or_else(|| Path::new("crl-lab-out").join(name));
    run_in(&cli.global, name, &out, threads, body)
}

fn run_in<C: CommandConfig>(
    g: &GlobalArgs,
    name: &str,
    out: &Path,
    threads: usize,
    body: impl FnOnce(&C, &mut RunContext) -> commands::Outcome,
) -> Result<(RunManifest, Option<String>)> {
    let cfg: C = load_config(g.config.as_deref(), g.seed)?;
    let hash = config_hash(&cfg)?;
    let mut ctx = RunContext::create(out, name, cfg.seed(), hash, threads, g.deterministic)?;
    ctx.write_text(CONFIG_FILE, &to_toml(&cfg)?)?;
    let note = body(&cfg, &mut ctx)?;
    Ok((ctx.finish()?, note))
}
