//! Argument parsing and dispatch for the `triview` binary.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use triview_core::data::DimConvention;

use crate::commands::{self, Manifest, TOOL};
use crate::config::{EstimateRiskConfig, GenDataConfig, HmmRunConfig, LearnRunConfig};
use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "triview", version, about = "Unsupervised risk estimation from three conditionally independent views")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate multi-view datasets or HMM sequences.
    GenData(RunArgs),
    /// Estimate a fixed model's risk on unlabeled data.
    EstimateRisk(RunArgs),
    /// Adapt a seed model using unlabeled data.
    Learn(RunArgs),
    /// Estimate an HMM's inner log-loss from unlabeled sequences.
    HmmRisk(RunArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Convention {
    Divide,
    Multiply,
}

impl From<Convention> for DimConvention {
    fn from(c: Convention) -> Self {
        match c {
            Convention::Divide => DimConvention::Divide,
            Convention::Multiply => DimConvention::Multiply,
        }
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON run config, or a manifest from an earlier run.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Comma-separated seeds replacing the config's list.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Worker threads; all cores when unset.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long, value_enum)]
    pub dim_convention: Option<Convention>,
}

/// Reads a config, unwrapping it from a manifest when given one.
fn load_config<T: DeserializeOwned>(path: &Path, command: &str) -> Result<(T, PathBuf)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    let value = match serde_json::from_value::<Manifest>(value.clone()) {
        Ok(m) if m.tool == TOOL => {
            if m.command != command {
                return Err(Error::Config(format!(
                    "manifest is for `{}`, not `{command}`",
                    m.command
                )));
            }
            m.config
        }
        _ => value,
    };
    let config = serde_json::from_value(value).map_err(|e| Error::format(path, e.to_string()))?;
    let base = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let base = fs::canonicalize(base).map_err(|e| Error::io(base, e))?;
    Ok((config, base))
}

fn seeds_override(seeds: &Option<Vec<u64>>, target: &mut Vec<u64>) {
    if let Some(s) = seeds {
        target.clone_from(s);
    }
}

fn execute(cli: Cli) -> Result<()> {
    let (args, name) = match &cli.command {
        Command::GenData(a) => (a, "gen-data"),
        Command::EstimateRisk(a) => (a, "estimate-risk"),
        Command::Learn(a) => (a, "learn"),
        Command::HmmRisk(a) => (a, "hmm-risk"),
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = args.jobs {
        if n == 0 {
            return Err(Error::Config("--jobs must be positive".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::Config(e.to_string()))?;
    let convention = args.dim_convention.map(DimConvention::from);
    let summary = pool.install(|| -> Result<_> {
        match &cli.command {
            Command::GenData(_) => {
                let (mut cfg, base): (GenDataConfig, _) = load_config(&args.config, name)?;
                seeds_override(&args.seeds, &mut cfg.seeds);
                if let Some(c) = convention {
                    cfg.convention = c;
                }
                cfg.resolve(&base)?;
                commands::gen_data(&cfg, &args.out)
            }
            Command::EstimateRisk(_) => {
                let (mut cfg, base): (EstimateRiskConfig, _) = load_config(&args.config, name)?;
                seeds_override(&args.seeds, &mut cfg.seeds);
                if let Some(c) = convention {
                    cfg.convention = c;
                }
                cfg.resolve(&base)?;
                commands::estimate_risk(&cfg, &args.out)
            }
            Command::Learn(_) => {
                let (mut cfg, base): (LearnRunConfig, _) = load_config(&args.config, name)?;
                seeds_override(&args.seeds, &mut cfg.seeds);
                if let Some(c) = convention {
                    cfg.convention = c;
                }
                cfg.resolve(&base)?;
                commands::learn(&cfg, &args.out)
            }
            Command::HmmRisk(_) => {
                let (mut cfg, base): (HmmRunConfig, _) = load_config(&args.config, name)?;
                seeds_override(&args.seeds, &mut cfg.seeds);
                if convention.is_some() {
                    return Err(Error::Config("--dim-convention does not apply to hmm-risk".into()));
                }
                cfg.resolve(&base)?;
                commands::hmm_risk_cmd(&cfg, &args.out)
            }
        }
    })?;
    summary.into_result().map(|_| ())
}

/// Runs the CLI and returns the process exit code: 0 on success, 1 for usage
/// and input errors, 2 for numerical failures.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
