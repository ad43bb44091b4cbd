use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use log::error;
use mfdelay_cli::config::{parse_config, Overrides};
use mfdelay_cli::runner::{run, EXIT_INVALID};

/// Simulate mean-field forward-backward systems with delay and jumps and run
/// maximum-principle checks.
///
/// Exit codes: 0 all checks pass, 2 invalid configuration, 3 numerical
/// failure, 4 a check failed.
#[derive(Debug, Parser)]
#[command(name = "mfdelay", version)]
struct Cli {
    /// TOML experiment configuration.
    config: PathBuf,
    /// Seed, replacing the configured one.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run only this check; repeat for several.
    #[arg(long = "check", value_name = "NAME")]
    checks: Vec<String>,
    /// Number of particles.
    #[arg(long)]
    particles: Option<usize>,
    /// Time step.
    #[arg(long)]
    dt: Option<f64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_INVALID as u8 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MFDELAY_LOG", "error")).init();

    let overrides = Overrides {
        seed: cli.seed,
        particles: cli.particles,
        dt: cli.dt,
        out: cli.out,
        checks: cli.checks,
    };
    let cfg = match parse_config(&cli.config, &overrides) {
        Ok(c) => c,
        Err(errs) => {
            for e in &errs.0 {
                eprintln!("error: {e}");
            }
            return ExitCode::from(EXIT_INVALID as u8);
        }
    };
    for w in &cfg.warnings {
        eprintln!("warning: {w}");
    }
    if cli.threads == Some(0) {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(EXIT_INVALID as u8);
    }
    let outcome = run(&cfg, cli.threads);
    if let Some(e) = &outcome.error {
        error!("{e}");
        eprintln!("error: {e}");
    }
    for c in &outcome.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    println!("results in {}", cfg.output_dir.display());
    ExitCode::from(outcome.exit_code as u8)
}
