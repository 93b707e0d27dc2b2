use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fiberlock_cli::config::keys;
use fiberlock_cli::{run_seeds, write_outputs, RunConfig, Scenario, COLUMNS_HELP};

#[derive(Parser)]
#[command(name = "fiberlock", version, about = "Fiber-locked squeezed-light station simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario and write its CSV outputs.
    #[command(after_long_help = COLUMNS_HELP)]
    Run {
        /// error-sweep, phase-immunity, opa-sweep, pol-compare, coupling-lock,
        /// longrun, phase-reset or power-loop
        scenario: String,
        /// One or more seeds (comma separated or repeated).
        #[arg(long, value_delimiter = ',', default_value = "1")]
        seed: Vec<u64>,
        /// Time compression of the schedule.
        #[arg(long)]
        compression: Option<f64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Config file of `key = value` lines.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override one key, e.g. `--set drift.lo_pol_ramp=2e-5`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Exit with code 3 when a scenario check fails.
        #[arg(long)]
        check: bool,
        /// Seeds run in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// List every configuration key with its default for a scenario.
    Keys {
        #[arg(default_value = "error-sweep")]
        scenario: String,
    },
    /// Describe the CSV columns of every scenario.
    Columns,
}

fn build_config(
    scenario: &str,
    compression: Option<f64>,
    config: Option<&PathBuf>,
    sets: &[String],
) -> Result<RunConfig, fiberlock_cli::ConfigError> {
    let sc: Scenario = scenario.parse()?;
    let mut cfg = RunConfig::new(sc);
    if let Some(path) = config {
        cfg.apply_file(path)?;
    }
    cfg.apply_overrides(sets)?;
    if let Some(c) = compression {
        cfg.set("schedule.compression", &c.to_string())?;
    }
    cfg.schedule.validate().map_err(|e| fiberlock_cli::ConfigError::BadValue {
        key: "schedule".into(),
        value: String::new(),
        reason: e.to_string(),
    })?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Columns => {
            println!("{COLUMNS_HELP}");
            ExitCode::SUCCESS
        }
        Cmd::Keys { scenario } => match build_config(&scenario, None, None, &[]) {
            Ok(cfg) => {
                let help = |k: &str| keys().iter().find(|x| x.name == k).map(|x| x.help).unwrap_or("");
                for (k, v) in cfg.listing() {
                    println!("{k:<36} {v:<14} {}", help(k));
                }
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        },
        Cmd::Run { scenario, seed, compression, out, config, sets, check, jobs } => {
            let cfg = match build_config(&scenario, compression, config.as_ref(), &sets) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            let results = run_seeds(&cfg, &seed, jobs);
            let mut failed_checks = false;
            let mut failed_runs = false;
            for (s, res) in seed.iter().zip(results) {
                let dir = if seed.len() > 1 { out.join(format!("seed-{s}")) } else { out.clone() };
                match res {
                    Ok(r) => {
                        for c in &r.output.checks {
                            println!("seed {s} {} {:<28} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                        }
                        failed_checks |= !r.passed();
                        if let Err(e) = write_outputs(&dir, &r, &sets) {
                            eprintln!("error: {e:#}");
                            failed_runs = true;
                        } else {
                            println!("seed {s} wrote {} ({:.1} s)", dir.display(), r.wall_s);
                        }
                    }
                    Err(e) => {
                        eprintln!("seed {s}: error: {e:#}");
                        failed_runs = true;
                    }
                }
            }
            if failed_runs {
                ExitCode::from(1)
            } else if check && failed_checks {
                ExitCode::from(3)
            } else {
                ExitCode::SUCCESS
            }
        }
    }
}
