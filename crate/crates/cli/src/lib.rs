//! Command-line driver: `amplab <stage> --config experiment.toml`.

pub mod config;
pub mod runner;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

pub use config::{ConfigError, ExperimentConfig};
pub use runner::{run_experiment, RunError, Stage};

#[derive(Debug, Parser)]
#[command(name = "amplab", version, about = "Seeded AMP and density evolution experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output root; overrides `out` in the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seeds, e.g. `0,1,2` or `0..5`; overrides `seeds` in the config.
    #[arg(long, global = true, value_parser = parse_seed_list)]
    pub seeds: Option<SeedList>,
    /// Worker threads for independent cells.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Samples W for every (n, seed) cell.
    Sample,
    /// Density evolution for every n.
    De,
    /// Samples and runs AMP in every cell.
    Amp,
    /// DE, AMP and the empirical-vs-DE gap tables.
    Verify,
    /// Tree identity check for the configured polynomial.
    TreeOracle,
    /// Lotka-Volterra equilibria.
    Lv,
    /// Every stage the config has sections for.
    Full,
    /// Runs the named stage.
    Run {
        #[arg(long, value_enum)]
        stage: Stage,
    },
}

impl Command {
    pub fn stage(&self) -> Stage {
        match self {
            Command::Sample => Stage::Sample,
            Command::De => Stage::De,
            Command::Amp => Stage::Amp,
            Command::Verify => Stage::Verify,
            Command::TreeOracle => Stage::TreeOracle,
            Command::Lv => Stage::Lv,
            Command::Full => Stage::Full,
            Command::Run { stage } => *stage,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedList(pub Vec<u64>);

fn parse_seed_list(text: &str) -> Result<SeedList, String> {
    parse_seeds(text).map(SeedList)
}

/// Comma-separated seeds and half-open ranges `a..b`.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>, String> {
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once("..") {
            Some((a, b)) => {
                let a: u64 = a.trim().parse().map_err(|e| format!("`{part}`: {e}"))?;
                let b: u64 = b.trim().parse().map_err(|e| format!("`{part}`: {e}"))?;
                if b <= a {
                    return Err(format!("empty seed range `{part}`"));
                }
                out.extend(a..b);
            }
            None => out.push(part.parse().map_err(|e| format!("`{part}`: {e}"))?),
        }
    }
    if out.is_empty() {
        return Err("no seeds given".into());
    }
    Ok(out)
}

/// Loads the config and applies command-line overrides. Returns the config,
/// the directory relative paths resolve against and the output root.
pub fn load(cli: &Cli) -> Result<(ExperimentConfig, PathBuf, PathBuf), String> {
    let path = cli.config.as_ref().ok_or("--config PATH is required")?;
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut config = ExperimentConfig::from_toml(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    let base = path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    if let Some(seeds) = &cli.seeds {
        config.seeds = seeds.0.clone();
    }
    let out = match (&cli.out, &config.out) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => base.join(o),
        (None, None) => base.join("out"),
    };
    Ok((config, base, out))
}

/// Entry point of the binary; returns the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let (config, base, out) = match load(&cli) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let workers = cli
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    match run_experiment(&config, &base, &out, cli.command.stage(), workers) {
        Ok(dir) => {
            println!("wrote {}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
