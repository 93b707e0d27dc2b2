
use fiberlock_core::dsp::{LockInChain, LockInConfig};
use fiberlock_core::loops::*;
use fiberlock_core::plant::*;
use fiberlock_core::polarization::{mode_overlap, SphereRotation, AXIS_S2, AXIS_S3};
use fiberlock_core::sequencer::calibrated_chains;
use proptest::prelude::*;

fn quiet() -> PlantConfig {
    let mut c = PlantConfig::default();
    c.drift = DriftConfig::none();
    c.sample_rate = 2e6;
    c
}

fn std_dev(x: &[f64]) -> f64 {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64).sqrt()
}

// ---- power ----

/// Delivered-power residuals and the source drift factor relative to t = 0.
fn power_residuals(closed: bool, drift: f64) -> (Vec<f64>, Vec<f64>) {
    let mut c = quiet();
    c.drift.power_amplitude = drift / 2.0;
    c.drift.power_period = 600.0;
    let mut p = PlantState::new(c).unwrap();
    p.set_shutters(false, true, false);
    let target = 16e-3;
    let t0 = target / p.max_deliverable(1);
    p.set_attenuation(1, t0);
    let mut mon = PowerMonitor::new(PowerMonitorCfg::signal_path(), 5, 110);
    let mut lp = PowerLoop::new(PowerLoopCfg::new(target), t0);
    let dt = 0.1;
    let v0 = 1.0 + p.drifts.power_lo.value();
    let (mut out, mut src) = (Vec::new(), Vec::new());
    for i in 0..12_000 {
        if closed {
            let m = mon.read(&p, 1);
            let cmd = power_loop_step(&mut lp, m, dt);
            p.set_attenuation(1, cmd.transmission);
        }
        p.advance(dt);
        if i >= 100 {
            out.push(p.lo.delivered_power() / target - 1.0);
            src.push((1.0 + p.drifts.power_lo.value()) / v0 - 1.0);
        }
    }
    (out, src)
}

#[test]
fn power_loop_removes_source_drift() {
    let (closed, src) = power_residuals(true, 0.15);
    let closed = std_dev(&closed);
    assert!(closed <= 1e-3, "{closed}");
    // a 15 % peak-to-peak sinusoid has std near 0.075/√2
    let src = std_dev(&src);
    assert!((src / (0.075 / 2f64.sqrt()) - 1.0).abs() < 0.1, "{src}");
    let open = std_dev(&power_residuals(false, 0.15).0);
    assert!((open / src - 1.0).abs() < 1e-6, "{open} vs {src}");
}

proptest! {
    #[test]
    fn power_loop_settles_on_constant_disturbance(d in 0.3f64..1.7, frac in 1e-6f64..0.9, t0 in 0.01f64..1.0) {
        let source = 2e-2;
        let target = frac * source * d;
        let mut lp = PowerLoop::new(PowerLoopCfg::new(target), t0);
        let mut measured = source * d * lp.transmission;
        for _ in 0..500 {
            power_loop_step(&mut lp, measured, 1e-3);
            measured = source * d * lp.transmission;
        }
        prop_assert!((measured - target).abs() / target < 1e-3);
    }
}

// ---- phase ----

struct OpaHarness {
    p: PlantState,
    lp: PhaseLoop,
    buf: Vec<f64>,
}

impl OpaHarness {
    fn new(cfg: PlantConfig) -> Self {
        let mut p = PlantState::new(cfg).unwrap();
        p.set_shutters(true, false, true);
        let rpv = p.cfg.stretcher.rad_per_volt;
        let mut lp = PhaseLoop::new(PhaseLoopCfg::opa(2.0 * p.cfg.beat_hz, rpv), p.stretchers[0].voltage);
        lp.release();
        let n = (2.0 * p.sample_rate() / p.cfg.beat_hz).round() as usize;
        Self { p, lp, buf: vec![0.0; n] }
    }

    fn tick(&mut self, dt: f64) -> PhaseStep {
        let start = self.p.sample_index();
        self.p.burst(Detector::OpaMonitor, &mut self.buf);
        let t = self.p.time();
        let s = phase_loop_step(&mut self.lp, &self.buf, start, self.p.sample_rate(), t, dt);
        self.p.set_stretcher(0, s.voltage.clamp(0.0, 70.0)).unwrap();
        self.p.advance(dt);
        s
    }

    /// True residual of the locked beat phase, from the plant state.
    fn residual(&self) -> f64 {
        wrap_phase(self.p.opa_beat_phase() - self.lp.cfg.lock_quadrature)
    }
}

#[test]
fn phase_loop_holds_voltage_without_drift() {
    let mut c = quiet();
    c.opa_monitor.noise_rms = 0.0;
    c.opa.thermal_phase_offset = 0.0;
    let mut h = OpaHarness::new(c);
    h.lp.set_quadrature(h.p.opa_beat_phase());
    let v0 = h.lp.voltage;
    for _ in 0..2000 {
        h.tick(1e-3);
    }
    assert!((h.lp.voltage - v0).abs() < 1e-9, "{}", h.lp.voltage - v0);
    assert_eq!(h.lp.resets, 0);
}

#[test]
fn opa_lock_precision_under_default_drift() {
    let mut c = PlantConfig::default();
    c.sample_rate = 2e6;
    c.drift_block = 2000;
    let mut h = OpaHarness::new(c);
    let mut res = Vec::new();
    for i in 0..20_000 {
        h.tick(1e-3);
        if i > 1000 {
            res.push(h.residual());
        }
    }
    let rms = (res.iter().map(|r| r * r).sum::<f64>() / res.len() as f64).sqrt();
    assert!(rms.to_degrees() <= 2.0, "{} deg", rms.to_degrees());
}

#[test]
fn forced_ramp_resets_and_relocks() {
    let mut c = quiet();
    c.drift.probe_phase_ramp = 10.0;
    c.drift_block = 2000;
    let mut h = OpaHarness::new(c);
    // 4 s at 10 rad/s moves the OPA beat phase by 80 rad, well past 6π
    let mut reset_flags = 0;
    for _ in 0..4000 {
        let s = h.tick(1e-3);
        if s.flags & flags::RESET != 0 {
            reset_flags += 1;
        }
    }
    assert!(h.lp.resets >= 1);
    assert_eq!(h.lp.intervals.len(), h.lp.resets);
    assert_eq!(reset_flags, h.lp.resets);
    for w in h.lp.intervals.windows(2) {
        assert!(w[0].end.unwrap() <= w[1].start);
    }
    for iv in &h.lp.intervals {
        if let Some(end) = iv.end {
            assert!(end - iv.start <= 0.2, "relock took {} s", end - iv.start);
        }
    }
    assert!(h.lp.intervals[0].end.is_some());
}

#[test]
fn phase_loop_flags_missing_carrier() {
    let mut c = quiet();
    c.opa_monitor.noise_rms = 0.0;
    let mut h = OpaHarness::new(c);
    h.p.set_shutters(false, false, false);
    let v0 = h.lp.voltage;
    let s = h.tick(1e-3);
    assert!(s.flags & flags::NO_CARRIER != 0);
    assert_eq!(s.voltage, v0);
}

#[test]
fn relock_interval_overlap_is_strict() {
    let iv = RelockInterval { start: 1.0, end: Some(2.0) };
    assert!(iv.overlaps(1.5, 3.0));
    assert!(iv.overlaps(0.0, 1.5));
    assert!(!iv.overlaps(2.0, 3.0));
    assert!(!iv.overlaps(0.0, 1.0));
    assert!(RelockInterval { start: 1.0, end: None }.overlaps(5.0, 6.0));
}

// ---- polarization ----

fn hd_plant(cfg: PlantConfig) -> PlantState {
    let mut p = PlantState::new(cfg).unwrap();
    p.set_shutters(true, true, false);
    p.set_attenuation(0, 100e-6 / p.max_deliverable(0));
    p.set_attenuation(1, 100e-6 / p.max_deliverable(1));
    p
}

fn opa_plant(cfg: PlantConfig) -> PlantState {
    let mut p = PlantState::new(cfg).unwrap();
    p.set_shutters(true, false, true);
    p.set_attenuation(0, 1e-6 / p.max_deliverable(0));
    p.set_attenuation(2, PUMP_OPERATING_W / p.max_deliverable(2));
    p
}

fn chain(fs: f64, target: PolTarget) -> LockInChain {
    let (opa, hd): (LockInConfig, LockInConfig) = calibrated_chains(fs).unwrap();
    LockInChain::new(if target == PolTarget::Opa { opa } else { hd }).unwrap()
}

fn overlap(p: &PlantState, target: PolTarget) -> f64 {
    match target {
        PolTarget::Homodyne => mode_overlap(&p.lo.pol, &p.probe.pol),
        PolTarget::Opa => mode_overlap(&p.probe.pol, &p.opa.crystal_axis),
    }
}

fn single_modulation(log: &[ActuatorEvent]) -> bool {
    let mut active = None;
    for e in log {
        match (active, e.piezo) {
            (Some(_), Some(_)) => return false,
            (_, next) => active = next,
        }
    }
    active.is_none()
}

#[test]
fn modulation_method_converges_from_offset() {
    for target in [PolTarget::Homodyne, PolTarget::Opa] {
        let mut p = match target {
            PolTarget::Homodyne => hd_plant(quiet()),
            PolTarget::Opa => opa_plant(quiet()),
        };
        // 0.15 rad on the great circle is 0.3 rad on the sphere
        p.perturb_polarization(target.path(), &SphereRotation::about(AXIS_S2, 0.3).unwrap());
        let before = 1.0 - overlap(&p, target);
        assert!((before - 0.15f64.sin().powi(2)).abs() < 1e-9 || target == PolTarget::Opa);
        let mut ch = chain(p.sample_rate(), target);
        let out = pol_optimize(&PolLoopCfg::default(), &mut ch, &mut p, target).unwrap();
        let loss = 1.0 - overlap(&p, target);
        assert!(loss < 1e-3, "{target:?}: {before} -> {loss}");
        assert!(single_modulation(&out.actuator_log));
        assert!(p.modulation.is_none());
        for s in &out.subloops {
            assert!(s.beta_end.abs() <= s.beta_start.abs() + 1e-12, "{s:?}");
        }
        assert!(out.subloops.len() >= 9);
    }
}

#[test]
fn modulation_method_is_stable_at_optimum() {
    let mut c = quiet();
    c.power_noise_rel = 1e-3;
    let mut p = hd_plant(c);
    let start = p.lo_path.bank.values();
    let mut ch = chain(p.sample_rate(), PolTarget::Homodyne);
    let opt = PolOptimizer::new(PolLoopCfg::default(), &mut ch, &mut p, PolTarget::Homodyne).unwrap();
    let mut dev = [0.0f64; 3];
    let mut n = 0.0;
    opt.track(&mut p, 15.0, |_, v| {
        for k in 0..3 {
            dev[k] += (v[k] as f64 - start[k] as f64).powi(2);
        }
        n += 1.0;
    });
    for d in dev {
        assert!((d / n).sqrt() < 2.0, "{}", (d / n).sqrt());
    }
}

#[test]
fn inverted_polarity_finds_the_orthogonal_state() {
    let mut p = opa_plant(quiet());
    // start 1.2 rad along the great circle from the crystal axis
    p.perturb_polarization(PathId::Probe, &SphereRotation::about(AXIS_S3, 2.4).unwrap());
    let cfg = PolLoopCfg { polarity: -1.0, ..PolLoopCfg::default() };
    let mut ch = chain(p.sample_rate(), PolTarget::Opa);
    let res = pol_optimize(&cfg, &mut ch, &mut p, PolTarget::Opa);
    let ov = overlap(&p, PolTarget::Opa);
    assert!(ov < 1e-2, "overlap {ov} ({:?})", res.map(|o| o.converged));
}

#[test]
fn random_walk_without_noise_keeps_optimum() {
    let mut p = hd_plant(quiet());
    let start = p.lo_path.bank.values();
    let cfg = RandomWalkCfg { steps: 300, ..RandomWalkCfg::default() };
    let trace = random_walk_optimize(&cfg, &mut p, PolTarget::Homodyne);
    assert_eq!(trace.len(), 301);
    for v in &trace {
        for k in 0..3 {
            assert!((v[k] as i64 - start[k] as i64).abs() <= cfg.step_counts);
        }
    }
}

#[test]
fn random_walk_replays_and_wanders_with_noise() {
    let run = |seed| {
        let mut c = quiet();
        c.power_noise_rel = 1e-3;
        let mut p = hd_plant(c);
        let cfg = RandomWalkCfg { steps: 400, seed, ..RandomWalkCfg::default() };
        random_walk_optimize(&cfg, &mut p, PolTarget::Homodyne)
    };
    let a = run(11);
    assert_eq!(a, run(11));
    assert_ne!(a, run(12));
    let first = a[0];
    assert!(a.iter().any(|v| v != &first));
}

// ---- coupling ----

#[test]
fn balanced_coupler_keeps_command() {
    let mut c = quiet();
    c.dc_noise_rms = 0.0;
    let mut p = PlantState::new(c).unwrap();
    p.set_shutters(false, true, false);
    p.set_attenuation(1, 16e-3 / p.max_deliverable(1));
    let mut lp = CouplingLoop::new(CouplingLoopCfg::default(), p.peltier_command);
    let c0 = lp.command;
    for _ in 0..100 {
        let dc = [homodyne_dc(&p)];
        coupling_lock_step(&mut lp, &dc, 0.1);
    }
    assert!((lp.command - c0).abs() < 1e-12);
}

#[test]
fn dc_feedback_recovers_from_saturated_offset() {
    let mut p = PlantState::new(quiet()).unwrap();
    p.set_shutters(false, true, false);
    p.set_attenuation(1, 16e-3 / p.max_deliverable(1));
    let t0 = p.bs_hd.reference_temperature;
    let mut lp = CouplingLoop::new(CouplingLoopCfg::default(), t0 + 0.3);
    p.set_peltier(lp.command);
    let mut saw_saturation = false;
    let dt = 0.05;
    let mut last_cmd = lp.command;
    for _ in 0..4000 {
        let dc: Vec<DcSample> = (0..4).map(|_| p.sample_dc()).collect();
        let s = coupling_lock_step(&mut lp, &dc, dt);
        saw_saturation |= dc.iter().any(|d| d.saturated);
        assert!((s.command - last_cmd).abs() <= lp.cfg.max_slew * dt + 1e-12);
        last_cmd = s.command;
        p.set_peltier(s.command);
        p.advance(dt);
    }
    assert!(saw_saturation);
    assert!((p.coupling_ratio() - 0.5).abs() < 1e-4, "{}", p.coupling_ratio());
}

#[test]
fn thermistor_hold_lets_ratio_follow_ambient() {
    let mut c = quiet();
    c.drift.temperature_amplitude = 0.5;
    c.drift.temperature_period = 100.0;
    let mut p = PlantState::new(c).unwrap();
    p.set_shutters(false, true, false);
    let cfg = CouplingLoopCfg { mode: CouplingMode::ThermistorHold, ..CouplingLoopCfg::default() };
    let mut lp = CouplingLoop::new(cfg, p.peltier_command);
    let mut ratios = Vec::new();
    for _ in 0..1000 {
        let dc = [p.sample_dc()];
        let s = coupling_lock_step(&mut lp, &dc, 0.1);
        assert!(s.flags & flags::HELD != 0);
        p.set_peltier(s.command);
        p.advance(0.1);
        ratios.push(p.coupling_ratio());
    }
    let hi = ratios.iter().cloned().fold(0.0, f64::max);
    let lo = ratios.iter().cloned().fold(1.0, f64::min);
    // 0.5 °C amplitude at 0.95 %/°C: about ±0.5 %
    assert!((hi - lo - 2.0 * 0.5 * 0.0095).abs() < 1e-3, "{}", hi - lo);
}
