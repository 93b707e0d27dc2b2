//! Shutter choreography, the periodic alignment sequence, the squeezing
//! measurement sequence and the campaign schedule that interleaves them.

use std::f64::consts::PI;

use thiserror::Error;

use crate::analysis::{level_from_variances, loss_from_levels, MeasurementRecord, OutlierReason};
use crate::dsp::{calibrate_chain, DspError, LockInChain, LockInConfig, ReadWindow};
use crate::loops::{
    coupling_lock_step, phase_loop_step, power_loop_step, ActuatorEvent, CouplingLoop, CouplingLoopCfg,
    CouplingMode, LoopLog, PhaseLoop, PhaseLoopCfg, PolError, PolLoopCfg, PolOptimizer, PolOutcome, PolTarget,
    PowerLoop, PowerLoopCfg, PowerMonitor, PowerMonitorCfg, PowerTargets, SubloopRecord,
};
use crate::plant::{Detector, PathId, PlantConfig, PlantError, PlantState};
use crate::polarization::mode_overlap;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SequencerError {
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error("invalid schedule: {0}")]
    Schedule(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShutterEvent {
    pub t: f64,
    pub probe: bool,
    pub lo: bool,
    pub pump: bool,
}

/// Shutter positions with a log of every transition.
#[derive(Debug, Clone, Default)]
pub struct ShutterState {
    pub probe: bool,
    pub lo: bool,
    pub pump: bool,
    pub log: Vec<ShutterEvent>,
}

impl ShutterState {
    pub fn set(&mut self, plant: &mut PlantState, probe: bool, lo: bool, pump: bool) {
        if (probe, lo, pump) == (self.probe, self.lo, self.pump) && !self.log.is_empty() {
            return;
        }
        self.probe = probe;
        self.lo = lo;
        self.pump = pump;
        plant.set_shutters(probe, lo, pump);
        self.log.push(ShutterEvent { t: plant.time(), probe, lo, pump });
    }

    /// Positions at time `t` according to the log (all closed before the
    /// first entry).
    pub fn at(&self, t: f64) -> (bool, bool, bool) {
        self.log
            .iter()
            .take_while(|e| e.t <= t)
            .last()
            .map(|e| (e.probe, e.lo, e.pump))
            .unwrap_or((false, false, false))
    }
}

/// Campaign timing in nominal seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub alignment_period: f64,
    pub measurement_period: f64,
    pub total: f64,
    /// Time compression: idle stretches are stepped in ticks of
    /// `compression` milliseconds, and the OPA thermal wait shrinks with it
    /// down to the thermal floor.
    pub compression: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { alignment_period: 1800.0, measurement_period: 120.0, total: 86_400.0, compression: 3600.0 }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<(), SequencerError> {
        let bad = |m: &str| Err(SequencerError::Schedule(m.to_string()));
        if !(self.compression > 0.0) {
            return bad("compression must be positive");
        }
        if !(self.measurement_period > 0.0) || !(self.alignment_period > 0.0) {
            return bad("periods must be positive");
        }
        if !(self.total >= 0.0) {
            return bad("total must be non-negative");
        }
        Ok(())
    }

    pub fn idle_tick(&self) -> f64 {
        self.compression * 1e-3
    }

    pub fn thermal_wait(&self, tau: f64) -> f64 {
        (10.0 / self.compression).max(5.0 * tau)
    }

    pub fn measurement_count(&self) -> usize {
        (self.total / self.measurement_period + 1e-9).floor() as usize
    }

    pub fn alignment_times(&self) -> Vec<f64> {
        let n = (self.total / self.alignment_period - 1e-9).ceil().max(0.0) as usize;
        (0..n).map(|k| k as f64 * self.alignment_period).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SequencerCfg {
    /// Controller tick during procedures, s.
    pub tick_s: f64,
    pub pol: PolLoopCfg,
    pub polarization_control: bool,
    pub coupling: CouplingLoopCfg,
    pub targets: PowerTargets,
    pub power_loop_gain: f64,
    /// Phase-lock integral gain, 1/s.
    pub phase_loop_gain: f64,
    pub relock_tolerance: f64,
    pub pump_enabled: bool,
    /// Model evaluations averaged into each variance level.
    pub variance_samples: usize,
    pub lock_timeout_s: f64,
    pub coupling_tick_s: f64,
    pub coupling_tolerance_v: f64,
    pub coupling_timeout_s: f64,
    /// Latest start of a measurement within its slot, counted back from
    /// the end of the slot.
    pub max_sequence_s: f64,
    /// Analysis frequency the variance levels are labeled with, MHz.
    pub analysis_freq_mhz: f64,
    pub log_decimation: usize,
}

impl Default for SequencerCfg {
    fn default() -> Self {
        Self {
            tick_s: 1e-3,
            pol: PolLoopCfg::default(),
            polarization_control: true,
            coupling: CouplingLoopCfg::default(),
            targets: PowerTargets::default(),
            power_loop_gain: 50.0,
            phase_loop_gain: 200.0,
            relock_tolerance: 0.1,
            pump_enabled: true,
            variance_samples: 64,
            lock_timeout_s: 2.0,
            coupling_tick_s: 0.1,
            coupling_tolerance_v: 0.15,
            coupling_timeout_s: 30.0,
            max_sequence_s: 60.0,
            analysis_freq_mhz: 40.0,
            log_decimation: 100,
        }
    }
}

impl SequencerCfg {
    /// Reference configuration: polarization and coupling control off.
    pub fn loops_off() -> Self {
        let mut c = Self::default();
        c.polarization_control = false;
        c.coupling.mode = CouplingMode::ThermistorHold;
        c
    }
}

/// All controllers of the station.
#[derive(Debug, Clone)]
pub struct Controllers {
    /// Probe, LO, pump.
    pub power: [PowerLoop; 3],
    pub monitors: [PowerMonitor; 3],
    pub opa_lock: PhaseLoop,
    pub hd_lock: PhaseLoop,
    pub coupling: CouplingLoop,
    pub opa_chain: LockInChain,
    pub hd_chain: LockInChain,
}

#[derive(Debug, Clone)]
pub struct ControllerLogs {
    pub power: [LoopLog; 3],
    pub opa_phase: LoopLog,
    pub hd_phase: LoopLog,
    pub coupling: LoopLog,
    pub pol_subloops: Vec<(PolTarget, SubloopRecord)>,
    pub pol_actuators: Vec<(PolTarget, ActuatorEvent)>,
}

/// Plant plus controllers, driven by one sequencer.
#[derive(Debug, Clone)]
pub struct Station {
    pub plant: PlantState,
    pub ctl: Controllers,
    pub shutters: ShutterState,
    pub logs: ControllerLogs,
    /// Any DC reading clipped since the flag was last cleared.
    pub dc_saturated: bool,
    /// Windowed homodyne DC of the latest coupling tick, V.
    pub coupling_error: Option<f64>,
    buf: Vec<f64>,
}

/// Calibrated lock-in configurations for the OPA and homodyne chains.
pub fn calibrated_chains(sample_rate: f64) -> Result<(LockInConfig, LockInConfig), DspError> {
    let w = ReadWindow::default();
    Ok((calibrate_chain(&LockInConfig::opa(sample_rate), w)?, calibrate_chain(&LockInConfig::homodyne(sample_rate), w)?))
}

impl Station {
    pub fn new(plant_cfg: PlantConfig, cfg: &SequencerCfg) -> Result<Self, SequencerError> {
        let chains = calibrated_chains(plant_cfg.sample_rate)?;
        Self::with_chains(plant_cfg, cfg, chains)
    }

    /// Builds a station with already calibrated chain configurations.
    pub fn with_chains(
        plant_cfg: PlantConfig,
        cfg: &SequencerCfg,
        chains: (LockInConfig, LockInConfig),
    ) -> Result<Self, SequencerError> {
        let plant = PlantState::new(plant_cfg)?;
        let seed = plant.cfg.seed;
        let rpv = plant.cfg.stretcher.rad_per_volt;
        let beat = plant.cfg.beat_hz;
        let targets = cfg.targets;
        let ploop = |target: f64, t0: f64| {
            PowerLoop::new(PowerLoopCfg { loop_gain: cfg.power_loop_gain, ..PowerLoopCfg::new(target) }, t0)
        };
        let power = [
            ploop(targets.probe_hd_align, plant.attenuation[0]),
            ploop(targets.lo_measure, plant.attenuation[1]),
            ploop(targets.pump, plant.attenuation[2]),
        ];
        let phase_cfg = |mut c: PhaseLoopCfg| {
            c.loop_gain = cfg.phase_loop_gain;
            c.relock_tolerance = cfg.relock_tolerance;
            c
        };
        let monitors = [
            PowerMonitor::new(PowerMonitorCfg::signal_path(), seed, 110),
            PowerMonitor::new(PowerMonitorCfg::signal_path(), seed, 111),
            PowerMonitor::new(PowerMonitorCfg::pump_path(), seed, 112),
        ];
        let v0 = plant.stretchers[0].voltage;
        let ctl = Controllers {
            power,
            monitors,
            opa_lock: PhaseLoop::new(phase_cfg(PhaseLoopCfg::opa(2.0 * beat, rpv)), v0),
            hd_lock: PhaseLoop::new(phase_cfg(PhaseLoopCfg::homodyne(beat, rpv)), plant.stretchers[1].voltage),
            coupling: CouplingLoop::new(cfg.coupling, plant.peltier_command),
            opa_chain: LockInChain::new(chains.0)?,
            hd_chain: LockInChain::new(chains.1)?,
        };
        let d = cfg.log_decimation;
        let logs = ControllerLogs {
            power: [LoopLog::new("power_probe", d), LoopLog::new("power_lo", d), LoopLog::new("power_pump", d)],
            opa_phase: LoopLog::new("phase_opa", d),
            hd_phase: LoopLog::new("phase_hd", d),
            coupling: LoopLog::new("coupling", d),
            pol_subloops: Vec::new(),
            pol_actuators: Vec::new(),
        };
        // a burst spanning two homodyne beat periods, a whole number of
        // cycles of both beat notes
        let burst = ((2.0 * plant.sample_rate() / beat).round() as usize).max(8);
        let mut st = Self { plant, ctl, shutters: ShutterState::default(), logs, dc_saturated: false, coupling_error: None, buf: vec![0.0; burst] };
        st.shutters.set(&mut st.plant, false, false, false);
        Ok(st)
    }

    pub fn time(&self) -> f64 {
        self.plant.time()
    }

    /// Retargets the power loops, with a feed-forward jump of the
    /// attenuator so large target changes settle within a few ticks.
    pub fn set_power_targets(&mut self, probe: f64, lo: f64, pump: f64) {
        for (idx, target) in [(0, probe), (1, lo), (2, pump)] {
            let lp = &mut self.ctl.power[idx];
            if lp.cfg.target == target {
                continue;
            }
            let measured = self.ctl.monitors[idx].read(&self.plant, idx);
            if measured > 0.0 {
                let t = lp.transmission * target / measured;
                lp.transmission = t.clamp(lp.cfg.min_transmission, 1.0);
            }
            lp.set_target(target);
            self.plant.set_attenuation(idx, lp.transmission);
        }
    }

    /// Freezes both stretchers.
    pub fn hold_locks(&mut self) {
        let t = self.time();
        self.ctl.opa_lock.hold(t);
        self.ctl.hd_lock.hold(t);
        self.apply_stretchers();
    }

    fn apply_stretchers(&mut self) {
        for (idx, v) in [(0, self.ctl.opa_lock.voltage), (1, self.ctl.hd_lock.voltage)] {
            let max = self.plant.stretchers[idx].max_voltage;
            // the loop keeps its voltage in range; the clamp guards rounding
            self.plant.set_stretcher(idx, v.clamp(0.0, max)).ok();
        }
    }

    /// One controller tick of length `dt`: phase locks, power loops and the
    /// coupling loop act, then the plant advances.
    pub fn tick(&mut self, dt: f64) {
        let t = self.time();
        let fs = self.plant.sample_rate();
        for (det, opa) in [(Detector::OpaMonitor, true), (Detector::Homodyne, false)] {
            let lp = if opa { &mut self.ctl.opa_lock } else { &mut self.ctl.hd_lock };
            if lp.held {
                continue;
            }
            let start = self.plant.sample_index();
            self.plant.burst(det, &mut self.buf);
            let s = phase_loop_step(lp, &self.buf, start, fs, t, dt);
            let log = if opa { &mut self.logs.opa_phase } else { &mut self.logs.hd_phase };
            log.push(t, s.error, s.voltage, s.flags);
        }
        self.apply_stretchers();
        for idx in 0..3 {
            let measured = self.ctl.monitors[idx].read(&self.plant, idx);
            let c = power_loop_step(&mut self.ctl.power[idx], measured, dt);
            self.plant.set_attenuation(idx, c.transmission);
            let err = measured / self.ctl.power[idx].cfg.target - 1.0;
            let fl = if c.saturated { crate::loops::flags::SATURATED } else { 0 };
            self.logs.power[idx].push(t, err, c.transmission, fl);
        }
        if self.shutters.lo {
            let mode = self.ctl.coupling.cfg.mode;
            let readings: Vec<_> = (0..self.coupling_readings()).map(|_| self.plant.sample_dc()).collect();
            self.dc_saturated |= readings.iter().any(|r| r.saturated);
            let s = coupling_lock_step(&mut self.ctl.coupling, &readings, dt);
            if mode == CouplingMode::DcFeedback {
                self.plant.set_peltier(s.command);
            }
            self.coupling_error = Some(s.error);
            self.logs.coupling.push(t, s.error, s.command, s.flags);
        }
        self.plant.advance(dt);
    }

    /// DC readings per coupling tick: one per 2.5 ms of averaging window.
    fn coupling_readings(&self) -> usize {
        ((self.ctl.coupling.cfg.window_s / 2.5e-3).round() as usize).max(1)
    }

    /// Ticks until plant time reaches `t_end`, in steps of at most `dt`.
    pub fn run_until(&mut self, t_end: f64, dt: f64) {
        let eps = 0.5 / self.plant.sample_rate();
        while self.time() < t_end - eps {
            let step = dt.min(t_end - self.time());
            self.tick(step);
        }
    }

    /// Ticks until every engaged phase loop reports lock, or the timeout.
    fn wait_locked(&mut self, dt: f64, timeout: f64) -> bool {
        let t_end = self.time() + timeout;
        loop {
            let t = self.time();
            let ok = [&self.ctl.opa_lock, &self.ctl.hd_lock].iter().all(|l| l.held || l.locked(t));
            if ok {
                return true;
            }
            if t >= t_end {
                return false;
            }
            self.tick(dt);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignStage {
    OpaPolarization,
    HomodynePolarization,
    CouplingRatio,
}

impl AlignStage {
    pub fn as_str(&self) -> &'static str {
        match self {
            AlignStage::OpaPolarization => "opa_polarization",
            AlignStage::HomodynePolarization => "hd_polarization",
            AlignStage::CouplingRatio => "coupling_ratio",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: AlignStage,
    pub t_start: f64,
    pub t_end: f64,
    pub converged: bool,
    /// Stage disabled by configuration.
    pub skipped: bool,
    /// Polarization mismatch loss after the stage.
    pub mismatch_loss: Option<f64>,
    pub piezo_start: [u16; 3],
    pub piezo_end: [u16; 3],
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentReport {
    pub t_start: f64,
    pub t_end: f64,
    pub stages: Vec<StageReport>,
}

impl AlignmentReport {
    pub fn converged(&self) -> bool {
        self.stages.iter().all(|s| s.converged || s.skipped)
    }

    pub fn failed_stages(&self) -> Vec<AlignStage> {
        self.stages.iter().filter(|s| !s.converged && !s.skipped).map(|s| s.stage).collect()
    }
}

fn pol_stage(st: &mut Station, cfg: &SequencerCfg, target: PolTarget) -> StageReport {
    let stage = match target {
        PolTarget::Opa => AlignStage::OpaPolarization,
        PolTarget::Homodyne => AlignStage::HomodynePolarization,
    };
    let t_start = st.time();
    match target {
        PolTarget::Opa => {
            st.shutters.set(&mut st.plant, true, false, true);
            st.set_power_targets(cfg.targets.probe_opa_align, cfg.targets.lo_align, cfg.targets.pump);
        }
        PolTarget::Homodyne => {
            st.shutters.set(&mut st.plant, true, true, false);
            st.set_power_targets(cfg.targets.probe_hd_align, cfg.targets.lo_align, cfg.targets.pump);
        }
    }
    // let the power loops pull in
    for _ in 0..20 {
        st.tick(cfg.tick_s);
    }
    let path = target.path();
    let piezo_start = st.plant.path(path).bank.values();
    let mismatch = |p: &PlantState| match target {
        PolTarget::Opa => 1.0 - mode_overlap(&p.probe.pol, &p.opa.crystal_axis),
        PolTarget::Homodyne => 1.0 - mode_overlap(&p.lo.pol, &p.probe.pol),
    };
    if !cfg.polarization_control {
        return StageReport {
            stage,
            t_start,
            t_end: st.time(),
            converged: false,
            skipped: true,
            mismatch_loss: Some(mismatch(&st.plant)),
            piezo_start,
            piezo_end: piezo_start,
            error: None,
        };
    }
    let chain = match target {
        PolTarget::Opa => &mut st.ctl.opa_chain,
        PolTarget::Homodyne => &mut st.ctl.hd_chain,
    };
    let result = PolOptimizer::new(cfg.pol, chain, &mut st.plant, target).and_then(|o| o.optimize(&mut st.plant));
    let (outcome, error): (Option<PolOutcome>, Option<String>) = match result {
        Ok(o) => (Some(o), None),
        Err(PolError::NotConverged { final_beta, outcome }) => {
            (Some(*outcome), Some(format!("not converged, final |beta| {final_beta:?}")))
        }
        Err(e) => (None, Some(e.to_string())),
    };
    if let Some(o) = &outcome {
        st.logs.pol_subloops.extend(o.subloops.iter().cloned().map(|s| (target, s)));
        st.logs.pol_actuators.extend(o.actuator_log.iter().map(|a| (target, *a)));
    }
    StageReport {
        stage,
        t_start,
        t_end: st.time(),
        converged: error.is_none(),
        skipped: false,
        mismatch_loss: Some(mismatch(&st.plant)),
        piezo_start,
        piezo_end: st.plant.path(path).bank.values(),
        error,
    }
}

fn coupling_stage(st: &mut Station, cfg: &SequencerCfg) -> StageReport {
    let t_start = st.time();
    st.shutters.set(&mut st.plant, false, true, false);
    st.set_power_targets(cfg.targets.probe_measure, cfg.targets.lo_measure, cfg.targets.pump);
    let piezo = st.plant.path(PathId::Lo).bank.values();
    let mut report = StageReport {
        stage: AlignStage::CouplingRatio,
        t_start,
        t_end: t_start,
        converged: false,
        skipped: false,
        mismatch_loss: None,
        piezo_start: piezo,
        piezo_end: piezo,
        error: None,
    };
    for _ in 0..20 {
        st.tick(cfg.tick_s);
    }
    if st.ctl.coupling.cfg.mode == CouplingMode::ThermistorHold {
        report.skipped = true;
        report.t_end = st.time();
        return report;
    }
    let t_end = st.time() + cfg.coupling_timeout_s;
    let mut inside = 0;
    while st.time() < t_end {
        st.tick(cfg.coupling_tick_s);
        let err = st.coupling_error.unwrap_or(f64::INFINITY);
        inside = if err.abs() < cfg.coupling_tolerance_v { inside + 1 } else { 0 };
        if inside >= 3 {
            report.converged = true;
            break;
        }
    }
    if !report.converged {
        report.error = Some("coupling ratio did not settle".to_string());
    }
    report.t_end = st.time();
    report
}

/// Alignment: OPA polarization, homodyne polarization, then the coupling
/// ratio, with both stretchers held. A failed stage does not stop the
/// later ones.
pub fn run_alignment(st: &mut Station, cfg: &SequencerCfg) -> AlignmentReport {
    let t_start = st.time();
    st.hold_locks();
    let stages = vec![
        pol_stage(st, cfg, PolTarget::Opa),
        pol_stage(st, cfg, PolTarget::Homodyne),
        coupling_stage(st, cfg),
    ];
    AlignmentReport { t_start, t_end: st.time(), stages }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementOutcome {
    pub record: MeasurementRecord,
    /// Interval of the squeezed and anti-squeezed acquisition.
    pub acquisition: (f64, f64),
    pub shot_window: (f64, f64),
    pub t_end: f64,
    /// Mean measurement angle during the squeezed acquisition, rad.
    pub sq_angle: f64,
}

fn acquire(st: &mut Station, cfg: &SequencerCfg, angles: &mut Vec<f64>) -> (f64, bool) {
    let mut acc = 0.0;
    let mut unlocked = false;
    for _ in 0..cfg.variance_samples.max(1) {
        let t = st.time();
        unlocked |= [&st.ctl.opa_lock, &st.ctl.hd_lock].iter().any(|l| !l.locked(t));
        let phi = st.plant.measurement_angle();
        angles.push(phi);
        acc += st.plant.variance_sample(phi);
        st.tick(cfg.tick_s);
    }
    (acc / cfg.variance_samples.max(1) as f64, unlocked)
}

/// One squeezing measurement: lock probe to pump, wait for the OPA to
/// settle thermally, lock LO to probe, acquire both quadratures, then
/// record shot noise with only the LO open.
pub fn run_measurement(st: &mut Station, cfg: &SequencerCfg, sched: &Schedule) -> MeasurementOutcome {
    let t0 = st.time();
    let resets0 = st.ctl.opa_lock.resets + st.ctl.hd_lock.resets;
    st.shutters.set(&mut st.plant, true, true, cfg.pump_enabled);
    st.set_power_targets(cfg.targets.probe_measure, cfg.targets.lo_measure, cfg.targets.pump);

    st.ctl.opa_lock.set_quadrature(PI / 2.0);
    st.ctl.opa_lock.release();
    let wait = sched.thermal_wait(st.plant.opa.thermal_settle_tau);
    let t_wait = st.time() + wait;
    st.run_until(t_wait, cfg.tick_s);

    st.ctl.hd_lock.set_quadrature(0.0);
    st.ctl.hd_lock.release();
    let mut lock_ok = st.wait_locked(cfg.tick_s, cfg.lock_timeout_s);

    st.dc_saturated = false;
    let a0 = st.time();
    let mut angles = Vec::with_capacity(cfg.variance_samples);
    let (v_sq, u1) = acquire(st, cfg, &mut angles);
    let sq_angle = angles.iter().sum::<f64>() / angles.len().max(1) as f64;
    st.ctl.hd_lock.set_quadrature(-PI / 2.0);
    lock_ok &= st.wait_locked(cfg.tick_s, cfg.lock_timeout_s);
    let (v_asq, u2) = acquire(st, cfg, &mut angles);
    let a1 = st.time();
    let saturated = st.dc_saturated;

    st.hold_locks();
    st.shutters.set(&mut st.plant, false, true, false);
    let s0 = st.time();
    let mut shot = 0.0;
    let n = cfg.variance_samples.max(1);
    for _ in 0..n {
        shot += st.plant.shot_sample();
        st.tick(cfg.tick_s);
    }
    let shot = shot / n as f64;
    let s1 = st.time();

    let overlap = st
        .ctl
        .opa_lock
        .intervals
        .iter()
        .chain(st.ctl.hd_lock.intervals.iter())
        .any(|i| i.overlaps(a0, a1));
    let reset_seen = st.ctl.opa_lock.resets + st.ctl.hd_lock.resets > resets0;
    let reason = if overlap || ((u1 || u2) && reset_seen) {
        Some(OutlierReason::RelockOverlap)
    } else if !lock_ok || u1 || u2 {
        Some(OutlierReason::LockFailed)
    } else if saturated {
        Some(OutlierReason::Saturated)
    } else {
        None
    };
    let level = |v: f64| level_from_variances(v, shot).unwrap_or(f64::NAN);
    let (sq_db, asq_db) = (level(v_sq), level(v_asq));
    let outlier = reason.is_some();
    let loss_est = if outlier { None } else { loss_from_levels(sq_db, asq_db).ok().filter(|l| (0.0..=1.0).contains(l)) };
    MeasurementOutcome {
        record: MeasurementRecord { t_s: t0, sq_db, asq_db, shot_ref: shot, loss_est, outlier, reason },
        acquisition: (a0, a1),
        shot_window: (s0, s1),
        t_end: st.time(),
        sq_angle,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleRun {
    pub measurements: Vec<MeasurementOutcome>,
    pub alignments: Vec<AlignmentReport>,
    /// Measurements displaced by an overrunning alignment.
    pub skipped: usize,
}

impl ScheduleRun {
    pub fn records(&self) -> Vec<MeasurementRecord> {
        self.measurements.iter().map(|m| m.record.clone()).collect()
    }
}

/// Idle state between sequences: only the LO is open, at measurement
/// power, so the coupling loop keeps running.
fn idle_until(st: &mut Station, sched: &Schedule, t: f64) {
    st.run_until(t, sched.idle_tick());
}

/// Runs the full campaign. Alignments take priority; a measurement whose
/// slot has been eaten by an alignment is skipped.
pub fn run_schedule(sched: &Schedule, st: &mut Station, cfg: &SequencerCfg) -> Result<ScheduleRun, SequencerError> {
    sched.validate()?;
    let mut run = ScheduleRun { measurements: Vec::new(), alignments: Vec::new(), skipped: 0 };
    let t_base = st.time();
    st.shutters.set(&mut st.plant, false, true, false);
    st.set_power_targets(cfg.targets.probe_measure, cfg.targets.lo_measure, cfg.targets.pump);
    let aligns = sched.alignment_times();
    let mut next_align = 0usize;
    for m in 0..sched.measurement_count() {
        let slot = t_base + m as f64 * sched.measurement_period;
        let slot_end = slot + sched.measurement_period;
        while next_align < aligns.len() && t_base + aligns[next_align] < slot_end {
            let ta = t_base + aligns[next_align];
            idle_until(st, sched, ta);
            run.alignments.push(run_alignment(st, cfg));
            st.shutters.set(&mut st.plant, false, true, false);
            next_align += 1;
        }
        idle_until(st, sched, slot);
        if st.time() > slot_end - cfg.max_sequence_s {
            run.skipped += 1;
            continue;
        }
        run.measurements.push(run_measurement(st, cfg, sched));
    }
    idle_until(st, sched, t_base + sched.total);
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_arithmetic() {
        let s = Schedule::default();
        assert_eq!(s.measurement_count(), 720);
        assert_eq!(s.alignment_times().len(), 48);
        let short = Schedule { total: 360.0, compression: 1.0, ..Default::default() };
        assert_eq!(short.measurement_count(), 3);
        assert_eq!(short.alignment_times(), vec![0.0]);
        assert_eq!(s.thermal_wait(3.0), 15.0);
        assert!((s.idle_tick() - 3.6).abs() < 1e-12);
    }

    #[test]
    fn shutter_log_replays_positions() {
        let mut p = PlantState::new(PlantConfig::default()).unwrap();
        let mut s = ShutterState::default();
        s.set(&mut p, false, true, false);
        p.advance(1.0);
        s.set(&mut p, true, true, true);
        s.set(&mut p, true, true, true);
        assert_eq!(s.log.len(), 2);
        assert_eq!(s.at(0.5), (false, true, false));
        assert_eq!(s.at(2.0), (true, true, true));
        assert_eq!(p.shutters(), (true, true, true));
    }

    #[test]
    fn rejects_zero_compression() {
        let s = Schedule { compression: 0.0, ..Default::default() };
        assert!(s.validate().is_err());
    }
}
