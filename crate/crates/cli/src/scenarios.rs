//! Named scenarios. Each returns its CSV files and the pass/fail checks
//! that `--check` enforces.

use std::f64::consts::{FRAC_PI_2, PI};

use anyhow::{Context, Result};
use fiberlock_core::analysis::{summarize, MeasurementRecord, SeriesStats};
use fiberlock_core::dsp::{calibrate_chain, LockInChain, LockInConfig, ReadWindow};
use fiberlock_core::loops::{
    flags, random_walk_optimize, CouplingMode, LoopLog, PolOptimizer, PolTarget, PowerLoop, PowerLoopCfg,
    PowerMonitor, PowerMonitorCfg, RandomWalkCfg, RelockInterval,
};
use fiberlock_core::plant::{Detector, Modulation, PathId, PlantState};
use fiberlock_core::sequencer::{calibrated_chains, run_schedule, ScheduleRun, Station};

use crate::config::{RunConfig, Scenario};
use crate::fit::{fit_scale, fit_shifted_sine, std_pop};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, passed: bool, detail: String) -> Self {
        Self { name: name.to_string(), passed, detail }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputFile {
    pub name: String,
    pub contents: Vec<u8>,
}

#[derive(Debug, Clone, Default)]
pub struct ScenarioOutput {
    pub files: Vec<OutputFile>,
    pub checks: Vec<Check>,
}

impl ScenarioOutput {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn file(&self, name: &str) -> Option<&OutputFile> {
        self.files.iter().find(|f| f.name == name)
    }
}

/// CSV table collected in memory.
struct Table {
    name: String,
    w: csv::Writer<Vec<u8>>,
}

impl Table {
    fn new(name: &str, header: &[&str]) -> Result<Self> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        Ok(Self { name: name.to_string(), w })
    }

    fn row<I: IntoIterator<Item = String>>(&mut self, cells: I) -> Result<()> {
        self.w.write_record(cells.into_iter().collect::<Vec<_>>())?;
        Ok(())
    }

    fn finish(self) -> Result<OutputFile> {
        let contents = self.w.into_inner().map_err(|e| anyhow::anyhow!("{}: {e}", self.name))?;
        Ok(OutputFile { name: self.name, contents })
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Mean β over the averaging window after the chain has settled.
fn settled_beta(plant: &mut PlantState, chain: &mut LockInChain, det: Detector, window: ReadWindow) -> f64 {
    chain.reset();
    let fs = plant.sample_rate();
    let settle = (window.settle_s * fs).round() as usize;
    let total = settle + (window.average_s * fs).round() as usize;
    let settle_end = plant.sample_index() + settle as u64;
    let mut buf = vec![0.0; 1 << 14];
    let (mut acc, mut n, mut done) = (0.0, 0usize, 0usize);
    while done < total {
        let m = buf.len().min(total - done);
        let start = plant.sample_index();
        plant.stream(det, &mut buf[..m]);
        chain.process(&buf[..m], start, |o| {
            if o.index >= settle_end {
                acc += o.beta;
                n += 1;
            }
        });
        done += m;
    }
    acc / n.max(1) as f64
}

fn chain_for(det: Detector, fs: f64, window: ReadWindow) -> Result<LockInChain> {
    let base = match det {
        Detector::Homodyne => LockInConfig::homodyne(fs),
        Detector::OpaMonitor => LockInConfig::opa(fs),
    };
    Ok(LockInChain::new(calibrate_chain(&base, window)?)?)
}

/// Plant with probe and LO open at their alignment powers.
fn homodyne_plant(cfg: &RunConfig) -> Result<PlantState> {
    let mut p = PlantState::new(cfg.plant_config())?;
    p.set_shutters(true, true, false);
    let t = cfg.seq.targets;
    p.set_attenuation(0, t.probe_hd_align / p.max_deliverable(0));
    p.set_attenuation(1, t.lo_align / p.max_deliverable(1));
    Ok(p)
}

pub fn run(cfg: &RunConfig) -> Result<ScenarioOutput> {
    match cfg.scenario {
        Scenario::ErrorSweep => error_sweep(cfg),
        Scenario::PhaseImmunity => phase_immunity(cfg),
        Scenario::OpaSweep => opa_sweep(cfg),
        Scenario::PolCompare => pol_compare(cfg),
        Scenario::CouplingLock => coupling_lock(cfg),
        Scenario::Longrun => longrun(cfg),
        Scenario::PhaseReset => phase_reset(cfg),
        Scenario::PowerLoop => power_loop(cfg),
    }
}

/// Wall-clock budget for the runtime check, s.
pub fn runtime_budget(s: Scenario) -> Option<f64> {
    match s {
        Scenario::ErrorSweep | Scenario::PolCompare => Some(60.0),
        Scenario::CouplingLock => Some(120.0),
        Scenario::Longrun => Some(300.0),
        _ => None,
    }
}

fn sweep_window(cfg: &RunConfig) -> ReadWindow {
    ReadWindow { settle_s: cfg.seq.pol.window.settle_s, average_s: cfg.sweep.average_s }
}

fn lo_modulation(plant: &PlantState, cfg: &RunConfig) -> Modulation {
    Modulation::from_counts(PathId::Lo, 0, cfg.seq.pol.modulation_amplitude_counts, &plant.path(PathId::Lo).bank)
}

fn error_sweep(cfg: &RunConfig) -> Result<ScenarioOutput> {
    let sw = cfg.sweep;
    anyhow::ensure!(sw.points >= 3, "sweep.points must be at least 3");
    let mut p = homodyne_plant(cfg)?;
    let window = sweep_window(cfg);
    let mut chain = chain_for(Detector::Homodyne, p.sample_rate(), window)?;
    let mut table = Table::new("error_sweep.csv", &["delta_theta_rad", "beta"])?;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for i in 0..sw.points {
        let dt = -sw.max_theta + 2.0 * sw.max_theta * i as f64 / (sw.points - 1) as f64;
        p.set_great_circle(dt, 0.0);
        p.set_modulation(Some(lo_modulation(&p, cfg)));
        let b = settled_beta(&mut p, &mut chain, Detector::Homodyne, window);
        table.row([dt.to_string(), b.to_string()])?;
        xs.push(dt);
        ys.push(b);
    }
    let (k, x0, r2) = fit_shifted_sine(&xs, &ys);
    // below 0.1 rad the pair difference is set by detector noise
    let mut worst = 0.0f64;
    for i in 0..sw.points / 2 {
        if xs[i].abs() < 0.1 - 1e-9 {
            continue;
        }
        let (a, b) = (ys[i], ys[sw.points - 1 - i]);
        worst = worst.max((a + b).abs() / a.abs().max(b.abs()));
    }
    Ok(ScenarioOutput {
        files: vec![table.finish()?],
        checks: vec![
            Check::new("sine_fit_r2", r2 > 0.999, format!("R^2 = {r2:.6} (k = {k:.4e} V)")),
            Check::new("zero_crossing", x0.abs() < 1e-3, format!("|x0| = {:.2e} rad", x0.abs())),
            Check::new("antisymmetry", worst <= 0.02, format!("worst |b(+)+b(-)|/|b| = {worst:.2e}")),
        ],
    })
}

fn phase_immunity(cfg: &RunConfig) -> Result<ScenarioOutput> {
    let sw = cfg.sweep;
    anyhow::ensure!(sw.phases >= 2, "sweep.phases must be at least 2");
    let mut p = homodyne_plant(cfg)?;
    let window = ReadWindow { average_s: sw.phase_average_s, ..sweep_window(cfg) };
    let mut chain = chain_for(Detector::Homodyne, p.sample_rate(), window)?;
    p.set_great_circle(sw.phase_theta, 0.0);
    p.set_modulation(Some(lo_modulation(&p, cfg)));
    let st = p.stretchers[1];
    let step = 2.0 * PI / sw.phases as f64 / st.rad_per_volt;
    let v0 = 0.5 * st.max_voltage - 0.5 * step * (sw.phases - 1) as f64;
    let mut table = Table::new("phase_immunity.csv", &["lo_stretcher_v", "delta_phi_rad", "beta"])?;
    let mut ys = Vec::new();
    for i in 0..sw.phases {
        let v = v0 + step * i as f64;
        p.set_stretcher(1, v).context("phase sweep exceeds the stretcher range")?;
        let dphi = p.delta_phi();
        let b = settled_beta(&mut p, &mut chain, Detector::Homodyne, window);
        table.row([v.to_string(), dphi.to_string(), b.to_string()])?;
        ys.push(b);
    }
    let s = SeriesStats::from_slice(&ys).expect("non-empty");
    let spread = s.excursion() / s.mean.abs();
    Ok(ScenarioOutput {
        files: vec![table.finish()?],
        checks: vec![Check::new("beta_spread", spread < 0.01, format!("(max-min)/|mean| = {spread:.2e}"))],
    })
}

fn opa_sweep(cfg: &RunConfig) -> Result<ScenarioOutput> {
    let sw = cfg.sweep;
    anyhow::ensure!(sw.opa_points >= 3, "sweep.opa_points must be at least 3");
    let mut p = PlantState::new(cfg.plant_config())?;
    p.set_shutters(true, false, true);
    let t = cfg.seq.targets;
    p.set_attenuation(0, t.probe_opa_align / p.max_deliverable(0));
    p.set_attenuation(2, (t.pump / p.max_deliverable(2)).min(1.0));
    let window = sweep_window(cfg);
    let mut chain = chain_for(Detector::OpaMonitor, p.sample_rate(), window)?;
    let mut table = Table::new("opa_sweep.csv", &["theta_rad", "beta"])?;
    let (mut basis, mut ys) = (Vec::new(), Vec::new());
    for i in 0..sw.opa_points {
        let th = FRAC_PI_2 * i as f64 / (sw.opa_points - 1) as f64;
        p.set_great_circle(th, 0.0);
        let m = Modulation::from_counts(
            PathId::Probe,
            0,
            cfg.seq.pol.modulation_amplitude_counts,
            &p.path(PathId::Probe).bank,
        );
        p.set_modulation(Some(m));
        let b = settled_beta(&mut p, &mut chain, Detector::OpaMonitor, window);
        table.row([th.to_string(), b.to_string()])?;
        basis.push((2.0 * th).sin());
        ys.push(b);
    }
    let (k, r2) = fit_scale(&basis, &ys);
    let ends = ys[0].abs().max(ys[ys.len() - 1].abs()) / k.abs();
    Ok(ScenarioOutput {
        files: vec![table.finish()?],
        checks: vec![
            Check::new("sin2theta_fit_r2", r2 > 0.999, format!("R^2 = {r2:.6} (k = {k:.4e} V)")),
            Check::new("zeros_at_ends", ends < 0.01, format!("max end |beta|/|k| = {ends:.2e}")),
        ],
    })
}

fn bank_table(name: &str, rows: &[[u16; 3]]) -> Result<OutputFile> {
    let mut t = Table::new(name, &["step", "piezo1", "piezo2", "piezo3"])?;
    for (i, r) in rows.iter().enumerate() {
        t.row([i.to_string(), r[0].to_string(), r[1].to_string(), r[2].to_string()])?;
    }
    t.finish()
}

fn per_piezo_std(rows: &[[u16; 3]]) -> [f64; 3] {
    let col = |k: usize| rows.iter().map(|r| r[k] as f64).collect::<Vec<_>>();
    [std_pop(&col(0)), std_pop(&col(1)), std_pop(&col(2))]
}

fn pol_compare(cfg: &RunConfig) -> Result<ScenarioOutput> {
    let c = cfg.compare;
    anyhow::ensure!(c.steps > 0 && c.rate_hz > 0.0, "compare.steps and compare.rate_hz must be positive");
    let target = PolTarget::Homodyne;

    let mut p = homodyne_plant(cfg)?;
    let mut chain = chain_for(Detector::Homodyne, p.sample_rate(), cfg.seq.pol.window)?;
    let opt = PolOptimizer::new(cfg.seq.pol, &mut chain, &mut p, target)?;
    let period = 1.0 / c.rate_hz;
    let t0 = p.time();
    let mut modulated = vec![p.path(target.path()).bank.values()];
    let duration = c.steps as f64 * period + 2.0 * cfg.seq.pol.block_s;
    opt.track(&mut p, duration, |t, bank| {
        while modulated.len() <= c.steps && t + 1e-9 >= t0 + modulated.len() as f64 * period {
            modulated.push(bank);
        }
    });
    modulated.truncate(c.steps + 1);

    let mut p = homodyne_plant(cfg)?;
    let rw = RandomWalkCfg { step_counts: c.step_counts, steps: c.steps, rate_hz: c.rate_hz, seed: cfg.seed() };
    let walked = random_walk_optimize(&rw, &mut p, target);

    let sm = per_piezo_std(&modulated);
    let sr = per_piezo_std(&walked);
    let worst_mod = sm.iter().copied().fold(0.0, f64::max);
    let least_rw = sr.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(ScenarioOutput {
        files: vec![bank_table("pol_modulation.csv", &modulated)?, bank_table("pol_random_walk.csv", &walked)?],
        checks: vec![
            Check::new("trace_length", modulated.len() == c.steps + 1, format!("{} rows", modulated.len())),
            Check::new(
                "modulation_std",
                worst_mod < 2.0,
                format!("per-piezo std {:.3} {:.3} {:.3} counts", sm[0], sm[1], sm[2]),
            ),
            Check::new(
                "random_walk_ratio",
                least_rw >= 10.0 * worst_mod,
                format!("random-walk std {:.2} {:.2} {:.2} counts", sr[0], sr[1], sr[2]),
            ),
        ],
    })
}

/// Coupler balance point: zero homodyne DC with only the LO open.
const BALANCED_RATIO: f64 = 0.5;

fn coupling_lock(cfg: &RunConfig) -> Result<ScenarioOutput> {
    let pc = cfg.plant_config();
    let chains = calibrated_chains(pc.sample_rate)?;
    let mut out = ScenarioOutput::default();
    let dt = cfg.schedule.idle_tick();
    let dec = cfg.trace_decimation.max(1);
    for (mode, name) in [
        (CouplingMode::DcFeedback, "coupling_dc_feedback.csv"),
        (CouplingMode::ThermistorHold, "coupling_thermistor_hold.csv"),
    ] {
        let mut seq = cfg.seq;
        seq.coupling.mode = mode;
        let mut st = Station::with_chains(pc.clone(), &seq, chains)?;
        st.shutters.set(&mut st.plant, false, true, false);
        let t = seq.targets;
        st.set_power_targets(t.probe_measure, t.lo_measure, t.pump);
        st.hold_locks();
        let mut table = Table::new(name, &["t_s", "ratio", "temperature_c", "dc_volts"])?;
        let mut ratios = Vec::new();
        let mut i = 0usize;
        while st.time() < cfg.schedule.total - 1e-9 {
            st.tick(dt.min(cfg.schedule.total - st.time()));
            let r = st.plant.coupling_ratio();
            ratios.push(r);
            if i % dec == 0 {
                let dc = st.coupling_error.unwrap_or(0.0);
                table.row([
                    st.time().to_string(),
                    r.to_string(),
                    st.plant.bs_hd.temperature.to_string(),
                    dc.to_string(),
                ])?;
            }
            i += 1;
        }
        out.files.push(table.finish()?);
        let s = SeriesStats::from_slice(&ratios).context("empty coupling trace")?;
        let dev = (s.max - BALANCED_RATIO).abs().max((s.min - BALANCED_RATIO).abs());
        out.checks.push(Check::new(
            match mode {
                CouplingMode::DcFeedback => "dc_feedback_bounded",
                CouplingMode::ThermistorHold => "thermistor_hold_bounded",
            },
            s.min >= 0.0 && s.max <= 1.0,
            format!("ratio in [{:.5}, {:.5}]", s.min, s.max),
        ));
        match mode {
            CouplingMode::DcFeedback => {
                out.checks.push(Check::new(
                    "dc_feedback_std",
                    s.std <= 2e-4,
                    format!("ratio std {:.4}%", 100.0 * s.std),
                ));
                out.checks.push(Check::new(
                    "dc_feedback_excursion",
                    dev <= 1e-3,
                    format!("max |ratio - 0.5| {:.4}%", 100.0 * dev),
                ));
            }
            CouplingMode::ThermistorHold => {
                out.checks.push(Check::new(
                    "thermistor_hold_excursion",
                    dev >= 5e-3,
                    format!("max |ratio - 0.5| {:.3}%, peak-to-peak {:.3}%", 100.0 * dev, 100.0 * s.excursion()),
                ));
            }
        }
    }
    Ok(out)
}

fn records_table(name: &str, recs: &[MeasurementRecord]) -> Result<OutputFile> {
    let mut t = Table::new(name, &["t_s", "sq_db", "asq_db", "shot_ref", "loss_est", "outlier", "reason"])?;
    for r in recs {
        t.row([
            r.t_s.to_string(),
            r.sq_db.to_string(),
            r.asq_db.to_string(),
            r.shot_ref.to_string(),
            opt(r.loss_est),
            r.outlier.to_string(),
            r.reason.map(|x| x.as_str().to_string()).unwrap_or_default(),
        ])?;
    }
    t.finish()
}

fn summary_table(recs: &[MeasurementRecord]) -> Result<OutputFile> {
    let mut t = Table::new(
        "summary.csv",
        &[
            "n_total",
            "n_outliers",
            "mean_sq_db",
            "std_sq_db",
            "mean_asq_db",
            "std_asq_db",
            "mean_loss",
            "std_loss",
            "loss_excursion",
        ],
    )?;
    match summarize(recs) {
        Ok(s) => t.row([
            recs.len().to_string(),
            s.outliers.to_string(),
            s.sq_db.mean.to_string(),
            s.sq_db.std.to_string(),
            s.asq_db.mean.to_string(),
            s.asq_db.std.to_string(),
            s.loss.mean.to_string(),
            s.loss.std.to_string(),
            s.loss.excursion().to_string(),
        ])?,
        Err(_) => {
            let outl = recs.iter().filter(|r| r.outlier).count();
            t.row([recs.len().to_string(), outl.to_string()].into_iter().chain((0..7).map(|_| String::new())))?
        }
    }
    t.finish()
}

fn loop_table(log: &LoopLog) -> Result<OutputFile> {
    let mut t = Table::new(&format!("loop_{}.csv", log.name), &["t_s", "error", "command", "flags"])?;
    for r in &log.records {
        t.row([r.t.to_string(), r.error.to_string(), r.command.to_string(), flags::describe(r.flags)])?;
    }
    t.finish()
}

fn alignment_table(run: &ScheduleRun) -> Result<OutputFile> {
    let mut t = Table::new(
        "alignments.csv",
        &[
            "t_start",
            "stage",
            "stage_start",
            "stage_end",
            "converged",
            "skipped",
            "mismatch_loss",
            "piezo_start",
            "piezo_end",
            "error",
        ],
    )?;
    let fmt = |b: [u16; 3]| format!("{} {} {}", b[0], b[1], b[2]);
    for a in &run.alignments {
        for s in &a.stages {
            t.row([
                a.t_start.to_string(),
                s.stage.as_str().to_string(),
                s.t_start.to_string(),
                s.t_end.to_string(),
                s.converged.to_string(),
                s.skipped.to_string(),
                opt(s.mismatch_loss),
                fmt(s.piezo_start),
                fmt(s.piezo_end),
                s.error.clone().unwrap_or_default(),
            ])?;
        }
    }
    t.finish()
}

fn relock_table(st: &Station) -> Result<OutputFile> {
    let mut t = Table::new("relocks.csv", &["loop", "start_s", "end_s"])?;
    for (name, lp) in [("opa", &st.ctl.opa_lock), ("hd", &st.ctl.hd_lock)] {
        for i in &lp.intervals {
            t.row([name.to_string(), i.start.to_string(), opt(i.end)])?;
        }
    }
    t.finish()
}

fn pol_subloop_table(st: &Station) -> Result<OutputFile> {
    let mut t = Table::new(
        "pol_subloops.csv",
        &["target", "cycle", "piezo", "t_start", "t_end", "beta_start", "beta_end", "count_start", "count_end", "converged"],
    )?;
    for (target, s) in &st.logs.pol_subloops {
        let name = match target {
            PolTarget::Opa => "opa",
            PolTarget::Homodyne => "hd",
        };
        t.row([
            name.to_string(),
            s.cycle.to_string(),
            (s.piezo + 1).to_string(),
            s.t_start.to_string(),
            s.t_end.to_string(),
            s.beta_start.to_string(),
            s.beta_end.to_string(),
            s.count_start.to_string(),
            s.count_end.to_string(),
            s.converged.to_string(),
        ])?;
    }
    t.finish()
}

/// Runs the schedule and collects every campaign output.
fn campaign(cfg: &RunConfig) -> Result<(Station, ScheduleRun, Vec<OutputFile>)> {
    let seq = cfg.sequencer();
    let mut st = Station::new(cfg.plant_config(), &seq)?;
    let run = run_schedule(&cfg.schedule, &mut st, &seq)?;
    let recs = run.records();
    let mut files = vec![records_table("records.csv", &recs)?, summary_table(&recs)?, alignment_table(&run)?];
    files.push(relock_table(&st)?);
    files.push(pol_subloop_table(&st)?);
    for log in st.logs.power.iter().chain([&st.logs.opa_phase, &st.logs.hd_phase, &st.logs.coupling]) {
        files.push(loop_table(log)?);
    }
    Ok((st, run, files))
}

/// Mean squeezing of the first and last tenth of all records.
pub fn window_means(recs: &[MeasurementRecord]) -> Option<(f64, f64)> {
    let n = recs.len() / 10;
    if n == 0 {
        return None;
    }
    let m = |s: &[MeasurementRecord]| s.iter().map(|r| r.sq_db).sum::<f64>() / s.len() as f64;
    Some((m(&recs[..n]), m(&recs[recs.len() - n..])))
}

fn longrun(cfg: &RunConfig) -> Result<ScenarioOutput> {
    let (_, run, files) = campaign(cfg)?;
    let recs = run.records();
    let mut checks = Vec::new();
    let expected = cfg.schedule.measurement_count();
    if cfg.reference {
        // degradation shows up in every record, so no outlier filtering
        let (first, last) = window_means(&recs).unwrap_or((f64::NAN, f64::NAN));
        checks.push(Check::new(
            "reference_degrades",
            last > first + 0.5,
            format!("first-window sq {first:.3} dB, last-window sq {last:.3} dB"),
        ));
    } else {
        checks.push(Check::new(
            "record_count",
            recs.len() == expected,
            format!("{} records, {} expected, {} skipped", recs.len(), expected, run.skipped),
        ));
        let outl = recs.iter().filter(|r| r.outlier).count();
        let frac = outl as f64 / recs.len().max(1) as f64;
        checks.push(Check::new("outlier_fraction", frac < 0.05, format!("{outl} outliers ({:.2}%)", 100.0 * frac)));
        match summarize(&recs) {
            Ok(s) => {
                checks.push(Check::new(
                    "sq_std",
                    s.sq_db.std <= 0.1,
                    format!("sq {:.3} +- {:.3} dB", s.sq_db.mean, s.sq_db.std),
                ));
                checks.push(Check::new(
                    "loss",
                    s.loss.std <= 0.01 && (s.loss.mean - 0.27).abs() <= 0.02,
                    format!("L {:.4} +- {:.4}", s.loss.mean, s.loss.std),
                ));
            }
            Err(e) => checks.push(Check::new("summary", false, e.to_string())),
        }
    }
    Ok(ScenarioOutput { files, checks })
}

/// An interval that closes exactly when acquisition opens (the lock wait
/// returning) does not touch the data.
fn overlaps_any(intervals: &[RelockInterval], a: f64, b: f64) -> bool {
    intervals.iter().any(|i| i.start < b && i.end.map_or(true, |e| e > a))
}

fn phase_reset(cfg: &RunConfig) -> Result<ScenarioOutput> {
    let (st, run, files) = campaign(cfg)?;
    let resets = st.ctl.opa_lock.resets + st.ctl.hd_lock.resets;
    let intervals: Vec<RelockInterval> =
        st.ctl.opa_lock.intervals.iter().chain(st.ctl.hd_lock.intervals.iter()).cloned().collect();
    let overlapping: Vec<&MeasurementRecord> = run
        .measurements
        .iter()
        .filter(|m| overlaps_any(&intervals, m.acquisition.0, m.acquisition.1))
        .map(|m| &m.record)
        .collect();
    let unflagged = overlapping.iter().filter(|r| !r.outlier).count();
    let recs = run.records();
    let clean: Vec<f64> = recs.iter().filter(|r| !r.outlier).map(|r| r.sq_db).collect();
    let leak = match (summarize(&recs), SeriesStats::from_slice(&clean)) {
        (Ok(s), Some(c)) => s.used == clean.len() && (s.sq_db.mean - c.mean).abs() < 1e-12,
        _ => false,
    };
    Ok(ScenarioOutput {
        files,
        checks: vec![
            Check::new("resets", resets >= 1, format!("{resets} stretcher resets")),
            Check::new(
                "overlap_flagged",
                unflagged == 0,
                format!("{} of {} overlapping records unflagged", unflagged, overlapping.len()),
            ),
            Check::new("no_leak", leak, format!("{} clean of {} records", clean.len(), recs.len())),
        ],
    })
}

fn power_loop(cfg: &RunConfig) -> Result<ScenarioOutput> {
    let pw = cfg.power;
    anyhow::ensure!(pw.tick_s > 0.0 && pw.duration_s > pw.tick_s, "powerloop tick and duration must be positive");
    let mut pc = cfg.plant_config();
    pc.drift.power_amplitude = 0.5 * pw.drift;
    pc.drift.power_period = pw.period_s;
    let names = ["probe_opa_align", "probe_hd_align", "probe_measure", "lo_align", "lo_measure"];
    let mut table = Table::new("power_loop.csv", &["setting", "t_s", "target_w", "closed_loop_w", "open_loop_w"])?;
    let mut checks = Vec::new();
    let settle = 10usize;
    for (&(idx, target), name) in cfg.seq.targets.settings().iter().zip(names) {
        let mut p = PlantState::new(pc.clone())?;
        p.set_shutters(idx == 0, idx == 1, false);
        let t_open = (target / p.max_deliverable(idx)).min(1.0);
        p.set_attenuation(idx, t_open);
        let mut lp = PowerLoop::new(PowerLoopCfg { loop_gain: cfg.seq.power_loop_gain, ..PowerLoopCfg::new(target) }, t_open);
        let mut mon = PowerMonitor::new(PowerMonitorCfg::signal_path(), cfg.seed(), 110 + idx as u64);
        let n = (pw.duration_s / pw.tick_s).round() as usize;
        let (mut closed, mut open) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for i in 0..n {
            let measured = mon.read(&p, idx);
            let c = fiberlock_core::loops::power_loop_step(&mut lp, measured, pw.tick_s);
            p.set_attenuation(idx, c.transmission);
            p.advance(pw.tick_s);
            let delivered = if idx == 0 { p.probe.delivered_power() } else { p.lo.delivered_power() };
            // a fixed attenuator follows the source
            let open_w = p.max_deliverable(idx) * t_open;
            if i % cfg.trace_decimation.max(1) == 0 {
                table.row([name.to_string(), p.time().to_string(), target.to_string(), delivered.to_string(), open_w.to_string()])?;
            }
            if i >= settle {
                closed.push(delivered / target - 1.0);
                open.push(open_w / target - 1.0);
            }
        }
        let (sc, so) = (std_pop(&closed), std_pop(&open));
        checks.push(Check::new(
            name,
            sc <= 1e-3,
            format!("residual std {:.4}% (open loop {:.2}%)", 100.0 * sc, 100.0 * so),
        ));
    }
    Ok(ScenarioOutput { files: vec![table.finish()?], checks })
}
