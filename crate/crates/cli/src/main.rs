use std::env;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use mflab_cli::check::{run_checks, CheckSizes};
use mflab_cli::commands::{self, Outcome};
use mflab_cli::config::{ConfigFile, Experiment};

#[derive(Parser, Debug)]
#[command(name = "mflab", version, about = "Mean-field gradient flow experiments for two-layer ReLU networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Replace the init and data seeds of the config.
    #[arg(long, global = true)]
    seed_override: Option<u64>,

    /// Worker threads (default: all cores). Outputs do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Scale every gradient by (1 + eps). For testing the checks only.
    #[arg(long, global = true, default_value_t = 0.0)]
    perturb_gradient: f64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Integrate the flow and write trajectory, report and verdict.
    Run { config: PathBuf },
    /// Run the invariant suite at reduced sizes.
    Check { config: PathBuf },
    /// Delta-sweep admissibility probe of the input law.
    Admissible { config: PathBuf },
    /// Level-set probe of the potential on the unit sphere.
    Sard { config: PathBuf },
    /// One run per cell of the [sweep] product.
    Sweep { config: PathBuf },
}

/// Exit code 1: the configuration is invalid.
struct ConfigFailure;

fn load(path: &Path, seed: Option<u64>) -> Result<ConfigFile, ConfigFailure> {
    let mut cfg = ConfigFile::load(path).map_err(|e| {
        eprintln!("error: {e}");
        ConfigFailure
    })?;
    if let Some(s) = seed {
        cfg.override_seed(s);
    }
    Ok(cfg)
}

fn build(cfg: &ConfigFile) -> Result<Experiment, ConfigFailure> {
    cfg.build().map_err(|e| {
        eprintln!("error: {e}");
        ConfigFailure
    })
}

fn out_dir(configured: &Path) -> PathBuf {
    env::var_os("MFLAB_OUT").map(PathBuf::from).unwrap_or_else(|| configured.to_path_buf())
}

fn dispatch(cli: &Cli) -> Result<Result<Outcome, ConfigFailure>> {
    let eps = cli.perturb_gradient;
    let (path, cmd) = match &cli.command {
        Command::Run { config } => (config, "run"),
        Command::Check { config } => (config, "check"),
        Command::Admissible { config } => (config, "admissible"),
        Command::Sard { config } => (config, "sard"),
        Command::Sweep { config } => (config, "sweep"),
    };
    let cfg = match load(path, cli.seed_override) {
        Ok(c) => c,
        Err(f) => return Ok(Err(f)),
    };
    if cmd == "sweep" {
        let out = out_dir(&cfg.raw.output.directory);
        let (outcome, invalid) = match commands::sweep(&cfg, &out, eps) {
            Ok(r) => r,
            Err(e) => {
                let c = e.downcast::<mflab_cli::config::ConfigError>()?;
                eprintln!("error: {c}");
                return Ok(Err(ConfigFailure));
            }
        };
        return Ok(if invalid && outcome == Outcome::Completed { Err(ConfigFailure) } else { Ok(outcome) });
    }
    let exp = match build(&cfg) {
        Ok(e) => e,
        Err(f) => return Ok(Err(f)),
    };
    let out = out_dir(&exp.out_dir);
    Ok(Ok(match cmd {
        "run" => commands::run(&exp, &out, eps)?,
        "admissible" => commands::admissible_cmd(&exp, &out)?,
        "sard" => commands::sard_cmd(&exp, &out)?,
        _ => {
            let checks = run_checks(&exp, eps, CheckSizes::default());
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            println!("{} of {} invariants passed", checks.len() - failed, checks.len());
            if failed > 0 {
                Outcome::CheckFailed
            } else {
                Outcome::Completed
            }
        }
    }))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot set up {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    match dispatch(&cli) {
        Ok(Ok(outcome)) => ExitCode::from(outcome.code()),
        Ok(Err(ConfigFailure)) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
