//! Scenario runner for the fiber-locked squeezing station simulator.

pub mod config;
pub mod fit;
pub mod scenarios;

use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub use config::{ConfigError, RunConfig, Scenario};
pub use scenarios::{Check, OutputFile, ScenarioOutput};

/// Column reference printed by `--help`.
pub const COLUMNS_HELP: &str = "\
CSV outputs (all with a header row):
  error-sweep     error_sweep.csv         delta_theta_rad,beta
  phase-immunity  phase_immunity.csv      lo_stretcher_v,delta_phi_rad,beta
  opa-sweep       opa_sweep.csv           theta_rad,beta
  pol-compare     pol_modulation.csv      step,piezo1,piezo2,piezo3
                  pol_random_walk.csv     step,piezo1,piezo2,piezo3
  coupling-lock   coupling_dc_feedback.csv, coupling_thermistor_hold.csv
                                          t_s,ratio,temperature_c,dc_volts
  longrun,        records.csv             t_s,sq_db,asq_db,shot_ref,loss_est,outlier,reason
  phase-reset     summary.csv             n_total,n_outliers,mean_sq_db,std_sq_db,mean_asq_db,
                                          std_asq_db,mean_loss,std_loss,loss_excursion
                  alignments.csv          t_start,stage,stage_start,stage_end,converged,skipped,
                                          mismatch_loss,piezo_start,piezo_end,error
                  relocks.csv             loop,start_s,end_s
                  pol_subloops.csv        target,cycle,piezo,t_start,t_end,beta_start,beta_end,
                                          count_start,count_end,converged
                  loop_<name>.csv         t_s,error,command,flags
  power-loop      power_loop.csv          setting,t_s,target_w,closed_loop_w,open_loop_w

Times are plant seconds, powers W, angles rad, levels dB relative to shot noise.
Every run also writes manifest.json (scenario, seed, config hash, overrides,
version, file digests, check results).";

/// Result of one seeded run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub config: RunConfig,
    pub output: ScenarioOutput,
    pub wall_s: f64,
}

impl RunResult {
    pub fn passed(&self) -> bool {
        self.output.passed()
    }
}

/// Runs a scenario and appends the runtime check when it has a budget.
pub fn run(cfg: &RunConfig) -> Result<RunResult> {
    let t = Instant::now();
    let mut output = scenarios::run(cfg).with_context(|| format!("scenario {}", cfg.scenario.name()))?;
    let wall_s = t.elapsed().as_secs_f64();
    if let Some(budget) = scenarios::runtime_budget(cfg.scenario) {
        output.checks.push(Check::new("runtime", wall_s < budget, format!("{wall_s:.1} s (budget {budget:.0} s)")));
    }
    Ok(RunResult { config: cfg.clone(), output, wall_s })
}

#[derive(Serialize)]
struct FileEntry<'a> {
    name: &'a str,
    sha256: String,
    bytes: usize,
}

#[derive(Serialize)]
struct CheckEntry<'a> {
    name: &'a str,
    passed: bool,
    detail: &'a str,
}

#[derive(Serialize)]
struct Manifest<'a> {
    scenario: &'a str,
    seed: u64,
    compression: f64,
    config_hash: String,
    overrides: &'a [String],
    version: &'a str,
    wall_time_s: f64,
    files: Vec<FileEntry<'a>>,
    checks: Vec<CheckEntry<'a>>,
}

/// Writes the CSV files and `manifest.json` into `dir`.
pub fn write_outputs(dir: &Path, res: &RunResult, overrides: &[String]) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for f in &res.output.files {
        let path = dir.join(&f.name);
        std::fs::write(&path, &f.contents).with_context(|| format!("writing {}", path.display()))?;
    }
    let m = Manifest {
        scenario: res.config.scenario.name(),
        seed: res.config.seed(),
        compression: res.config.schedule.compression,
        config_hash: res.config.hash(),
        overrides,
        version: env!("CARGO_PKG_VERSION"),
        wall_time_s: res.wall_s,
        files: res
            .output
            .files
            .iter()
            .map(|f| FileEntry { name: &f.name, sha256: hex::encode(Sha256::digest(&f.contents)), bytes: f.contents.len() })
            .collect(),
        checks: res
            .output
            .checks
            .iter()
            .map(|c| CheckEntry { name: &c.name, passed: c.passed, detail: &c.detail })
            .collect(),
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&m)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Runs one configuration per seed, at most `jobs` at a time, and returns
/// the results in seed order.
pub fn run_seeds(base: &RunConfig, seeds: &[u64], jobs: usize) -> Vec<Result<RunResult>> {
    let cfgs: Vec<RunConfig> = seeds
        .iter()
        .map(|&s| {
            let mut c = base.clone();
            c.set_seed(s);
            c
        })
        .collect();
    let jobs = jobs.max(1);
    let mut out: Vec<Option<Result<RunResult>>> = (0..cfgs.len()).map(|_| None).collect();
    for (chunk_cfgs, chunk_out) in cfgs.chunks(jobs).zip(out.chunks_mut(jobs)) {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk_cfgs.iter().map(|c| s.spawn(move || run(c))).collect();
            for (slot, h) in chunk_out.iter_mut().zip(handles) {
                *slot = Some(h.join().unwrap_or_else(|_| Err(anyhow::anyhow!("scenario thread panicked"))));
            }
        });
    }
    out.into_iter().map(|r| r.expect("every slot filled")).collect()
}
