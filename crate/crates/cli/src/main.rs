use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use fracstefan_cli::config::ConfigError;
use fracstefan_cli::{parse_config, run, Mode};

/// Nonlocal Stefan problems via obstacle problems, cross-checked by stable-process Monte Carlo.
#[derive(Parser, Debug)]
#[command(name = "fracstefan", version)]
struct Cli {
    /// What to run.
    mode: Mode,
    /// JSON run configuration; `{}` gives the defaults.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config's `out`; default `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Monte Carlo seed (overrides `mc.seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Monte Carlo worker threads (overrides `mc.workers`).
    #[arg(long)]
    workers: Option<usize>,
}

const EXIT_CHECKS_FAILED: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut config = match parse_config(&cli.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Some(seed) = cli.seed {
        config.mc.seed = seed;
    }
    if let Some(k) = cli.workers {
        config.mc.workers = Some(k);
    }
    if let Some(m) = config.mode {
        if m != cli.mode {
            eprintln!("config error at `mode`: the config says {} but the command line asks for {}", m.as_str(), cli.mode.as_str());
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    let out = cli.out.or_else(|| config.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
    match run(&config, cli.mode, &out) {
        Ok(manifest) => {
            for c in &manifest.checks {
                let status = if c.skipped { "SKIP" } else if c.pass { "PASS" } else { "FAIL" };
                println!("{status} {:<32} metric {:.4e} tol {:.4e}", c.name, c.metric, c.tolerance);
            }
            println!("artifacts in {}", out.display());
            if manifest.all_ok() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_CHECKS_FAILED)
            }
        }
        Err(e) => {
            let code = if e.downcast_ref::<ConfigError>().is_some() { EXIT_CONFIG } else { EXIT_RUNTIME };
            eprintln!("error: {e:#}");
            if let Err(w) = fracstefan_cli::run::write_failure(&config, cli.mode, &out, &format!("{e:#}")) {
                eprintln!("could not write the failure manifest: {w:#}");
            }
            ExitCode::from(code)
        }
    }
}
