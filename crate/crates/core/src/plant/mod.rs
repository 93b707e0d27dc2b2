//! Discrete-time optical plant: probe, local oscillator and pump fields,
//! the OPA, the homodyne coupler, fiber stretchers, polarization paths and
//! their drifts.

mod components;
mod drift;

pub use components::{
    splitter_ratio, stretcher_apply, wrap_phase, DetectorModel, FieldEnvelope, OpaModel,
    SplitterModel, StretcherModel,
};
pub use drift::{stream_rng, DriftConfig, DriftGenerator, DriftKind, DriftSuite, PolarizationDrift};

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::analysis::{loss_from_levels, r_from_squeezing};
use crate::polarization::{
    controller_rotation, great_circle_state, mode_overlap, piezo_rotation, ControllerGeometry,
    JonesState, PiezoBank, SphereRotation, StokesState,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlantError {
    #[error("stretcher voltage {voltage} V outside [0, {max}] V")]
    StretcherRange { voltage: f64, max: f64 },
    #[error("invalid plant configuration: {0}")]
    InvalidConfig(String),
}

/// Which detector a sample stream comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Detector {
    /// Balanced homodyne detector (probe–LO beat at Δω).
    Homodyne,
    /// OPA monitor photodiode PD5 (probe–pump beat at 2Δω).
    OpaMonitor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathId {
    Probe,
    Lo,
}

/// How probe and LO polarizations are represented.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PolarizationModel {
    /// Both beams on the V→R great circle at the given half-angles.
    GreatCircle { theta_probe: f64, theta_lo: f64 },
    /// Full fiber paths with piezo controllers and drift.
    Jones,
}

/// Sinusoidal polarization modulation `μ = amplitude·sin(ωm t)` applied to
/// one actuator. `amplitude` is in half-angle units: a great-circle angle
/// θ, or half the sphere rotation of a piezo.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Modulation {
    pub path: PathId,
    pub piezo: usize,
    pub amplitude: f64,
}

impl Modulation {
    pub fn from_counts(path: PathId, piezo: usize, counts: f64, bank: &PiezoBank) -> Self {
        Self { path, piezo, amplitude: 0.5 * counts * bank.rad_per_count(piezo) }
    }
}

/// Static fiber frames around a piezo controller.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiberPath {
    pub source: JonesState,
    pub pre: SphereRotation,
    pub bank: PiezoBank,
    pub post: SphereRotation,
}

impl FiberPath {
    /// A path whose centered controller delivers `source` unchanged, with
    /// the light at the controller in a generic state set by `pre`.
    pub fn aligned(source: JonesState, pre: SphereRotation, geometry: &ControllerGeometry, bank: PiezoBank) -> Self {
        let centre = controller_rotation(geometry, &bank).then_after(&pre);
        Self { source, pre, bank, post: centre.inverse() }
    }

    pub fn output(&self, geometry: &ControllerGeometry, drift: &SphereRotation) -> JonesState {
        let r = drift.then_after(&self.post).then_after(&controller_rotation(geometry, &self.bank)).then_after(&self.pre);
        r.apply(&self.source)
    }

    /// Output as `cos μ·u + sin μ·w` when piezo `k` is offset by `2μ`.
    pub fn modulated_terms(
        &self,
        geometry: &ControllerGeometry,
        drift: &SphereRotation,
        k: usize,
    ) -> (JonesState, JonesState) {
        let mut before = self.pre;
        for i in 0..k {
            before = piezo_rotation(geometry, i, self.bank.angle(i)).then_after(&before);
        }
        let mut after = piezo_rotation(geometry, k, self.bank.angle(k));
        for i in k + 1..3 {
            after = piezo_rotation(geometry, i, self.bank.angle(i)).then_after(&after);
        }
        let after = drift.then_after(&self.post).then_after(&after);
        let v = before.apply(&self.source);
        let u = after.apply_raw(&v);
        let half_turn = piezo_rotation(geometry, k, PI);
        let w = after.apply_raw(&half_turn.apply_raw(&v));
        (u, w)
    }
}

/// All plant parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantConfig {
    pub seed: u64,
    pub sample_rate: f64,
    /// Probe frequency shift (the homodyne beat), Hz.
    pub beat_hz: f64,
    pub modulation_hz: f64,
    pub probe_source_w: f64,
    pub lo_source_w: f64,
    pub pump_source_w: f64,
    /// Power-monitor pick-off after each attenuator.
    pub monitor_tap: f64,
    pub opa: OpaModel,
    /// Tap to the OPA monitor photodiode.
    pub opa_tap: f64,
    pub bs_hd: SplitterModel,
    pub stretcher: StretcherModel,
    pub homodyne: DetectorModel,
    pub opa_monitor: DetectorModel,
    /// Noise on each homodyne DC reading, V rms.
    pub dc_noise_rms: f64,
    /// Fractional power noise (rms), a first-order Gauss–Markov process
    /// updated every drift block.
    pub power_noise_rel: f64,
    /// Correlation time of the power noise, s.
    pub power_noise_tau: f64,
    /// Passive loss between OPA and homodyne detector, excluding OPA
    /// insertion loss and detector quantum efficiency.
    pub path_loss: f64,
    /// Fast residual phase jitter of the measurement, rad rms.
    pub phase_jitter_rms: f64,
    /// Relative estimation noise of a single variance evaluation.
    pub variance_noise_rel: f64,
    /// LO power at which variances are expressed in shot-noise units.
    pub lo_reference_w: f64,
    pub drift: DriftConfig,
    pub geometry: ControllerGeometry,
    pub rad_per_volt: f64,
    /// Samples per drift update.
    pub drift_block: usize,
}

/// Measured squeezing operating point the default plant reproduces.
pub const CALIBRATION_SQ_DB: f64 = -4.42;
pub const CALIBRATION_ASQ_DB: f64 = 7.85;
/// Pump power at the OPA during measurement.
pub const PUMP_OPERATING_W: f64 = 0.3;

impl Default for PlantConfig {
    fn default() -> Self {
        let loss = loss_from_levels(CALIBRATION_SQ_DB, CALIBRATION_ASQ_DB).expect("finite levels");
        let r = r_from_squeezing(CALIBRATION_SQ_DB, loss).expect("physical levels");
        let opa = OpaModel {
            squeeze_per_sqrt_watt: r / PUMP_OPERATING_W.sqrt(),
            crystal_axis: JonesState::vertical(),
            insertion_loss: 0.10,
            thermal_settle_tau: 3.0,
            thermal_phase_offset: 1.0,
        };
        let homodyne = DetectorModel::homodyne();
        let path_loss = 1.0 - (1.0 - loss) / ((1.0 - opa.insertion_loss) * homodyne.quantum_efficiency);
        Self {
            seed: 1,
            sample_rate: 5e6,
            beat_hz: 200e3,
            modulation_hz: 300.0,
            probe_source_w: 1e-3,
            lo_source_w: 20e-3,
            pump_source_w: 0.4,
            monitor_tap: 0.1,
            opa,
            opa_tap: 0.005,
            bs_hd: SplitterModel::default(),
            stretcher: StretcherModel::default(),
            homodyne,
            opa_monitor: DetectorModel::opa_monitor(),
            dc_noise_rms: 2e-3,
            power_noise_rel: 0.0,
            power_noise_tau: 0.1,
            path_loss,
            phase_jitter_rms: 0.0,
            variance_noise_rel: 0.05,
            lo_reference_w: 16e-3,
            drift: DriftConfig::default(),
            geometry: ControllerGeometry::default(),
            rad_per_volt: crate::polarization::DEFAULT_RAD_PER_VOLT,
            drift_block: 5000,
        }
    }
}

impl PlantConfig {
    pub fn validate(&self) -> Result<(), PlantError> {
        let bad = |m: &str| Err(PlantError::InvalidConfig(m.to_string()));
        if !(self.sample_rate > 0.0) {
            return bad("sample_rate must be positive");
        }
        if 2.0 * self.beat_hz >= self.sample_rate / 2.0 {
            return bad("OPA beat (2 × beat_hz) must be below Nyquist");
        }
        if self.drift_block == 0 {
            return bad("drift_block must be positive");
        }
        if !(0.0..1.0).contains(&self.opa.insertion_loss) || !(0.0..1.0).contains(&self.path_loss) {
            return bad("losses must lie in [0, 1)");
        }
        if !(self.homodyne.quantum_efficiency > 0.0 && self.homodyne.quantum_efficiency <= 1.0) {
            return bad("quantum efficiency must lie in (0, 1]");
        }
        if self.opa.squeeze_per_sqrt_watt < 0.0 {
            return bad("squeeze parameter must be non-negative");
        }
        Ok(())
    }

    /// Total loss seen by the squeezed mode at perfect mode matching.
    pub fn chain_loss(&self) -> f64 {
        1.0 - (1.0 - self.opa.insertion_loss) * (1.0 - self.path_loss) * self.homodyne.quantum_efficiency
    }
}

/// One homodyne DC reading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcSample {
    pub volts: f64,
    pub saturated: bool,
}

/// Complete plant state.
#[derive(Debug, Clone)]
pub struct PlantState {
    pub cfg: PlantConfig,
    pub probe: FieldEnvelope,
    pub lo: FieldEnvelope,
    pub pump: FieldEnvelope,
    pub opa: OpaModel,
    pub bs_hd: SplitterModel,
    pub bs2_tap: f64,
    /// Index 0: probe path (OPA lock). Index 1: LO path (homodyne lock).
    pub stretchers: [StretcherModel; 2],
    pub drifts: DriftSuite,
    pub probe_path: FiberPath,
    pub lo_path: FiberPath,
    pub pol_model: PolarizationModel,
    pub modulation: Option<Modulation>,
    /// Attenuator transmissions: probe, LO, pump.
    pub attenuation: [f64; 3],
    /// Temperature the Peltier stage is commanded to, °C.
    pub peltier_command: f64,
    pump_open_since: Option<f64>,
    sample_index: u64,
    drift_index: u64,
    power_noise: f64,
    noise_rng: ChaCha8Rng,
}

fn generic_frame(target: [f64; 3]) -> SphereRotation {
    let v = StokesState::new(1.0, 0.0, 0.0).expect("unit");
    let t = StokesState::new(target[0], target[1], target[2]).expect("non-zero");
    SphereRotation::between(&v, &t)
}

impl PlantState {
    pub fn new(cfg: PlantConfig) -> Result<Self, PlantError> {
        cfg.validate()?;
        let v = JonesState::vertical();
        let bank = PiezoBank::centered().with_rad_per_volt(cfg.rad_per_volt);
        let probe_path = FiberPath::aligned(v, generic_frame([1.0, 1.0, 1.0]), &cfg.geometry, bank);
        let lo_path = FiberPath::aligned(v, generic_frame([1.0, -1.0, 1.0]), &cfg.geometry, bank);
        let mut bs_hd = cfg.bs_hd;
        bs_hd.reference_pol = cfg.opa.crystal_axis;
        let mut s = Self {
            probe: FieldEnvelope::new(0.0, cfg.beat_hz, v),
            lo: FieldEnvelope::new(0.0, 0.0, v),
            pump: FieldEnvelope::new(0.0, 0.0, v),
            opa: cfg.opa,
            bs_hd,
            bs2_tap: cfg.opa_tap,
            stretchers: [cfg.stretcher; 2],
            drifts: DriftSuite::new(&cfg.drift, cfg.seed),
            probe_path,
            lo_path,
            pol_model: PolarizationModel::Jones,
            modulation: None,
            attenuation: [1e-3, 5e-3, 0.75],
            peltier_command: cfg.bs_hd.reference_temperature,
            pump_open_since: None,
            sample_index: 0,
            drift_index: 0,
            power_noise: 1.0,
            noise_rng: stream_rng(cfg.seed, 100),
            cfg,
        };
        s.refresh();
        Ok(s)
    }

    pub fn sample_rate(&self) -> f64 {
        self.cfg.sample_rate
    }

    pub fn time(&self) -> f64 {
        self.sample_index as f64 / self.cfg.sample_rate
    }

    pub fn sample_index(&self) -> u64 {
        self.sample_index
    }

    /// Uses great-circle polarizations instead of fiber paths.
    pub fn set_great_circle(&mut self, theta_probe: f64, theta_lo: f64) {
        self.pol_model = PolarizationModel::GreatCircle { theta_probe, theta_lo };
        self.refresh();
    }

    pub fn set_shutters(&mut self, probe: bool, lo: bool, pump: bool) {
        let now = self.time();
        if pump && !self.pump.shutter_open {
            self.pump_open_since = Some(now);
        }
        if !pump {
            self.pump_open_since = None;
        }
        self.probe.shutter_open = probe;
        self.lo.shutter_open = lo;
        self.pump.shutter_open = pump;
        self.refresh();
    }

    pub fn shutters(&self) -> (bool, bool, bool) {
        (self.probe.shutter_open, self.lo.shutter_open, self.pump.shutter_open)
    }

    pub fn path(&self, id: PathId) -> &FiberPath {
        match id {
            PathId::Probe => &self.probe_path,
            PathId::Lo => &self.lo_path,
        }
    }

    pub fn path_mut(&mut self, id: PathId) -> &mut FiberPath {
        match id {
            PathId::Probe => &mut self.probe_path,
            PathId::Lo => &mut self.lo_path,
        }
    }

    /// Adds a fixed sphere rotation at the output of a fiber path.
    pub fn perturb_polarization(&mut self, id: PathId, rotation: &SphereRotation) {
        let p = self.path_mut(id);
        p.post = rotation.then_after(&p.post);
        self.refresh();
    }

    pub fn set_piezo(&mut self, id: PathId, k: usize, count: i64) -> u16 {
        let c = self.path_mut(id).bank.set_clamped(k, count);
        self.refresh();
        c
    }

    pub fn set_modulation(&mut self, m: Option<Modulation>) {
        self.modulation = m;
    }

    pub fn set_attenuation(&mut self, idx: usize, transmission: f64) {
        self.attenuation[idx] = transmission.clamp(0.0, 1.0);
        self.refresh();
    }

    /// Sets a stretcher voltage; out-of-range voltages are rejected and
    /// leave the stretcher unchanged.
    pub fn set_stretcher(&mut self, idx: usize, voltage: f64) -> Result<f64, PlantError> {
        let ph = stretcher_apply(&self.stretchers[idx], voltage)?;
        self.stretchers[idx].voltage = voltage;
        self.refresh();
        Ok(ph)
    }

    pub fn set_peltier(&mut self, temperature: f64) {
        self.peltier_command = temperature;
        self.refresh();
    }

    /// Power at the source after drift, before the attenuator.
    fn source_power(&self, idx: usize) -> f64 {
        let (p, d) = match idx {
            0 => (self.cfg.probe_source_w, &self.drifts.power_probe),
            1 => (self.cfg.lo_source_w, &self.drifts.power_lo),
            _ => (self.cfg.pump_source_w, &self.drifts.power_pump),
        };
        p * (1.0 + d.value()).max(0.0)
    }

    /// Power picked off by the monitor behind attenuator `idx`, W.
    pub fn monitor_power(&self, idx: usize) -> f64 {
        self.source_power(idx) * self.attenuation[idx] * self.cfg.monitor_tap
    }

    /// Power the attenuator would deliver at full transmission.
    pub fn max_deliverable(&self, idx: usize) -> f64 {
        self.source_power(idx) * (1.0 - self.cfg.monitor_tap)
    }

    /// Recomputes the field envelopes from actuators and drifts.
    pub fn refresh(&mut self) {
        let t = 1.0 - self.cfg.monitor_tap;
        self.probe.set_power(self.source_power(0) * self.attenuation[0] * t);
        self.lo.set_power(self.source_power(1) * self.attenuation[1] * t);
        self.pump.set_power(self.source_power(2) * self.attenuation[2] * t);
        self.probe.set_phase(self.drifts.probe_phase() + self.stretchers[0].phase());
        self.lo.set_phase(self.drifts.lo_phase() + self.stretchers[1].phase());
        let thermal = match self.pump_open_since {
            Some(t0) => self.opa.thermal_phase(self.time() - t0),
            None => 0.0,
        };
        self.pump.set_phase(self.drifts.pump_phase() + thermal);
        match self.pol_model {
            PolarizationModel::GreatCircle { theta_probe, theta_lo } => {
                self.probe.pol = great_circle_state(theta_probe);
                self.lo.pol = great_circle_state(theta_lo);
            }
            PolarizationModel::Jones => {
                let g = self.cfg.geometry;
                self.probe.pol = self.probe_path.output(&g, self.drifts.pol_probe.rotation());
                self.lo.pol = self.lo_path.output(&g, self.drifts.pol_lo.rotation());
            }
        }
        self.bs_hd.temperature = self.peltier_command + self.drifts.temperature.value();
    }

    /// Advances every drift generator by `dt` seconds.
    pub fn drift_step(&mut self, dt: f64) {
        self.drifts.step(dt);
        if self.cfg.power_noise_rel > 0.0 {
            let n: f64 = self.noise_rng.sample(StandardNormal);
            let rho = if self.cfg.power_noise_tau > 0.0 { (-dt / self.cfg.power_noise_tau).exp() } else { 0.0 };
            let x = (self.power_noise - 1.0) * rho + self.cfg.power_noise_rel * (1.0 - rho * rho).sqrt() * n;
            self.power_noise = 1.0 + x;
        }
        self.refresh();
    }

    /// Advances plant time by `dt` without producing samples.
    pub fn advance(&mut self, dt: f64) {
        let n = (dt * self.cfg.sample_rate).round().max(0.0) as u64;
        self.advance_samples(n);
    }

    fn advance_samples(&mut self, n: u64) {
        self.sample_index += n;
        let pending = self.sample_index - self.drift_index;
        if pending > 0 {
            self.drift_index = self.sample_index;
            self.drift_step(pending as f64 / self.cfg.sample_rate);
        }
    }

    /// Squeeze parameter at the current pump power.
    pub fn squeeze_param(&self) -> f64 {
        self.opa.squeeze_param(self.pump.delivered_power())
    }

    /// `2φ_probe − φ_pump`.
    pub fn opa_phase(&self) -> f64 {
        2.0 * self.probe.phase() - self.pump.phase()
    }

    /// `φ_probe − φ_LO`.
    pub fn delta_phi(&self) -> f64 {
        self.probe.phase() - self.lo.phase()
    }

    /// Overlap amplitude `c(μ) = a cos μ + b sin μ` seen by `det`, with the
    /// active modulation (or piezo 1 of the relevant path when none).
    pub fn overlap_terms(&self, det: Detector) -> (Complex64, Complex64) {
        let (mpath, mk) = match (self.modulation, det) {
            (Some(m), _) => (m.path, m.piezo),
            (None, Detector::Homodyne) => (PathId::Lo, 0),
            (None, Detector::OpaMonitor) => (PathId::Probe, 0),
        };
        match self.pol_model {
            PolarizationModel::GreatCircle { theta_probe, theta_lo } => match det {
                Detector::Homodyne => {
                    let d = theta_probe - theta_lo;
                    // ⟨l|p⟩ = cos(θp − θl); modulating θl by μ gives cos(d − μ)
                    let (a, b) = match mpath {
                        PathId::Lo => (d.cos(), d.sin()),
                        PathId::Probe => (d.cos(), -d.sin()),
                    };
                    (Complex64::new(a, 0.0), Complex64::new(b, 0.0))
                }
                Detector::OpaMonitor => {
                    let (a, b) = match mpath {
                        PathId::Probe => (theta_probe.cos(), -theta_probe.sin()),
                        PathId::Lo => (theta_probe.cos(), 0.0),
                    };
                    (Complex64::new(a, 0.0), Complex64::new(b, 0.0))
                }
            },
            PolarizationModel::Jones => {
                let g = self.cfg.geometry;
                let zero = Complex64::new(0.0, 0.0);
                match det {
                    Detector::Homodyne => match mpath {
                        PathId::Lo => {
                            let (u, w) = self.lo_path.modulated_terms(&g, self.drifts.pol_lo.rotation(), mk);
                            let p = self.probe.pol;
                            (p.inner(&u).conj(), p.inner(&w).conj())
                        }
                        PathId::Probe => {
                            let (u, w) =
                                self.probe_path.modulated_terms(&g, self.drifts.pol_probe.rotation(), mk);
                            let l = self.lo.pol;
                            (l.inner(&u), l.inner(&w))
                        }
                    },
                    Detector::OpaMonitor => {
                        let axis = self.opa.crystal_axis;
                        match mpath {
                            PathId::Probe => {
                                let (u, w) =
                                    self.probe_path.modulated_terms(&g, self.drifts.pol_probe.rotation(), mk);
                                (axis.inner(&u), axis.inner(&w))
                            }
                            PathId::Lo => (axis.inner(&self.probe.pol), zero),
                        }
                    }
                }
            }
        }
    }

    /// Homodyne beat amplitude factor `2E1E2·√(4R(1−R))·gain`, V.
    fn homodyne_scale(&self) -> f64 {
        let p1 = self.probe.delivered_power();
        let p2 = self.lo.delivered_power();
        let r = splitter_ratio(&self.bs_hd, &self.lo.pol);
        2.0 * (p1 * p2).sqrt() * (4.0 * r * (1.0 - r)).sqrt() * self.cfg.homodyne.gain()
    }

    /// `E0²` at the OPA monitor, V.
    fn opa_monitor_scale(&self) -> f64 {
        self.probe.delivered_power() * self.bs2_tap * self.cfg.opa_monitor.gain()
    }

    /// Phase of the homodyne beat as a demodulator sees it:
    /// the beat is `|c|·cos(Δω t − Φ)`.
    pub fn homodyne_beat_phase(&self) -> f64 {
        let (a, _) = self.overlap_terms(Detector::Homodyne);
        wrap_phase(self.delta_phi() + a.arg())
    }

    /// Phase of the OPA monitor beat as a demodulator sees it:
    /// the beat is `∝ cos(2Δω t − Φ)`.
    pub fn opa_beat_phase(&self) -> f64 {
        wrap_phase(self.opa_phase() + PI / 2.0)
    }

    /// Quadrature angle the homodyne detector measures, relative to the
    /// squeezed quadrature, mod π. Zero when both beat phases sit at their
    /// reference points; the polarization overlap phase is part of the
    /// homodyne reference.
    pub fn measurement_angle(&self) -> f64 {
        let opa = wrap_phase(self.opa_beat_phase() - PI / 2.0);
        wrap_phase(opa / 2.0 - self.homodyne_beat_phase())
    }

    /// Mode-matching-limited total loss of the squeezed mode.
    pub fn effective_loss(&self) -> f64 {
        let ov = mode_overlap(&self.lo.pol, &self.opa.crystal_axis);
        1.0 - (1.0 - self.cfg.chain_loss()) * ov
    }

    /// Draws `n` samples starting at the current sample index without
    /// advancing time. Detector noise is included.
    pub fn burst(&mut self, det: Detector, out: &mut [f64]) {
        let start = self.sample_index;
        self.generate(det, start, out);
    }

    /// Streams consecutive samples, advancing plant time and drifts.
    pub fn stream(&mut self, det: Detector, out: &mut [f64]) {
        let block = self.cfg.drift_block as u64;
        let mut done = 0usize;
        while done < out.len() {
            let since = self.sample_index - self.drift_index;
            let room = (block - since.min(block)).max(1) as usize;
            let n = room.min(out.len() - done);
            let start = self.sample_index;
            self.generate(det, start, &mut out[done..done + n]);
            self.sample_index += n as u64;
            done += n;
            if self.sample_index - self.drift_index >= block {
                self.advance_samples(0);
            }
        }
    }

    fn generate(&mut self, det: Detector, start: u64, out: &mut [f64]) {
        let fs = self.cfg.sample_rate;
        let (a, b) = self.overlap_terms(det);
        let amp = self.modulation.map(|m| m.amplitude).unwrap_or(0.0);
        let wm = 2.0 * PI * self.cfg.modulation_hz / fs;
        let (carrier_hz, noise) = match det {
            Detector::Homodyne => (self.cfg.beat_hz, self.cfg.homodyne.noise_rms),
            Detector::OpaMonitor => (2.0 * self.cfg.beat_hz, self.cfg.opa_monitor.noise_rms),
        };
        let wc = 2.0 * PI * carrier_hz / fs;
        let phase_at = |f: f64, n: u64| 2.0 * PI * ((n as f64) * f / fs).fract();
        // e^{iωc t} and e^{iωm t}, re-anchored to the exact phase every chunk
        let mut pc = Complex64::from_polar(1.0, phase_at(carrier_hz, start));
        let mut pm = Complex64::from_polar(1.0, phase_at(self.cfg.modulation_hz, start));
        let rc = Complex64::from_polar(1.0, wc);
        let rm = Complex64::from_polar(1.0, wm);
        match det {
            Detector::Homodyne => {
                let k = self.homodyne_scale() * self.power_noise;
                // beat = K·Re[c·e^{i(Δφ − Δωt)}]
                let rot = Complex64::from_polar(k, self.delta_phi());
                let (a, b) = (a * rot, b * rot);
                for v in out.iter_mut() {
                    let (s, c) = small_sin_cos(amp * pm.im);
                    let z = a * c + b * s;
                    *v = z.re * pc.re + z.im * pc.im;
                    pc *= rc;
                    pm *= rm;
                }
            }
            Detector::OpaMonitor => {
                let e0 = self.opa_monitor_scale() * self.power_noise;
                let r = self.squeeze_param();
                let (ch, sh) = ((2.0 * r).cosh(), (2.0 * r).sinh());
                // sin(2Δωt − Φ) = Im[e^{i2Δωt}·e^{−iΦ}]
                let rot = Complex64::from_polar(sh, -self.opa_phase());
                for v in out.iter_mut() {
                    let (s, c) = small_sin_cos(amp * pm.im);
                    let ov = (a * c + b * s).norm_sqr();
                    let beat = pc.re * rot.im + pc.im * rot.re;
                    *v = e0 * (1.0 + ov * (ch - 1.0 + beat));
                    pc *= rc;
                    pm *= rm;
                }
            }
        }
        if noise > 0.0 {
            for v in out.iter_mut() {
                let n: f64 = self.noise_rng.sample(StandardNormal);
                *v += noise * n;
            }
        }
    }

    /// Beat amplitude at the detector without modulation, including the
    /// current power-noise factor, V.
    pub fn carrier_amplitude(&self, det: Detector) -> f64 {
        let (a, _) = self.overlap_terms(det);
        match det {
            Detector::Homodyne => self.homodyne_scale() * a.norm() * self.power_noise,
            Detector::OpaMonitor => {
                let r = self.squeeze_param();
                self.opa_monitor_scale() * a.norm_sqr() * (2.0 * r).sinh() * self.power_noise
            }
        }
    }

    /// Homodyne DC reading with detector noise.
    pub fn sample_dc(&mut self) -> DcSample {
        let ideal = homodyne_dc_unclipped(self);
        let n: f64 = self.noise_rng.sample(StandardNormal);
        let (v, saturated) = self.cfg.homodyne.clip(ideal + self.cfg.dc_noise_rms * n);
        DcSample { volts: v, saturated }
    }

    /// One noisy evaluation of the measured quadrature variance at
    /// measurement angle `phi`, scaled by the LO power.
    pub fn variance_sample(&mut self, phi: f64) -> f64 {
        let v = quadrature_variance(self.squeeze_param(), self.effective_loss(), phi, self.cfg.phase_jitter_rms);
        self.scaled_noisy(v)
    }

    /// One noisy evaluation of the vacuum (shot-noise) variance.
    pub fn shot_sample(&mut self) -> f64 {
        self.scaled_noisy(1.0)
    }

    fn scaled_noisy(&mut self, v: f64) -> f64 {
        let n: f64 = self.noise_rng.sample(StandardNormal);
        let scale = self.lo.delivered_power() / self.cfg.lo_reference_w;
        v * scale * (1.0 + self.cfg.variance_noise_rel * n)
    }

    /// Output `(P+, P−)` of the homodyne coupler for the DC levels.
    pub fn splitter_outputs(&self) -> (f64, f64) {
        let r = splitter_ratio(&self.bs_hd, &self.lo.pol);
        let pl = self.lo.delivered_power();
        let pp = self.probe.delivered_power();
        (r * pl + (1.0 - r) * pp, (1.0 - r) * pl + r * pp)
    }

    /// Current homodyne coupler ratio.
    pub fn coupling_ratio(&self) -> f64 {
        splitter_ratio(&self.bs_hd, &self.lo.pol)
    }
}

#[inline]
fn small_sin_cos(x: f64) -> (f64, f64) {
    if x.abs() < 0.3 {
        let x2 = x * x;
        let s = x * (1.0 - x2 / 6.0 * (1.0 - x2 / 20.0 * (1.0 - x2 / 42.0 * (1.0 - x2 / 72.0))));
        let c = 1.0 - x2 / 2.0 * (1.0 - x2 / 12.0 * (1.0 - x2 / 30.0 * (1.0 - x2 / 56.0 * (1.0 - x2 / 90.0))));
        (s, c)
    } else {
        x.sin_cos()
    }
}

/// PD5 sample: `E0²·{cos²[θ+μ]·[cosh 2r + sinh 2r·sin(2Δωt − Φ)] + sin²[θ+μ]}`
/// with `μ = A sin(ωm t)`, noise-free. Zero when probe or pump is blocked.
pub fn opa_monitor_sample(state: &PlantState, a_mod: f64, wm: f64, t: f64) -> f64 {
    if !state.probe.shutter_open || !state.pump.shutter_open {
        return 0.0;
    }
    let (a, b) = state.overlap_terms(Detector::OpaMonitor);
    let mu = a_mod * (wm * t).sin();
    let ov = (a * mu.cos() + b * mu.sin()).norm_sqr();
    let r = state.squeeze_param();
    let wc = 2.0 * PI * 2.0 * state.cfg.beat_hz;
    let beat = (2.0 * r).sinh() * (wc * t - state.opa_phase()).sin();
    state.opa_monitor_scale() * (ov * ((2.0 * r).cosh() + beat) + (1.0 - ov))
}

/// Homodyne beat `2E1E2·Re[c(μ)·e^{i(Δφ − Δωt)}]` scaled by the detector,
/// noise-free. Reduces to `cos(θ1−θ2−μ)·cos(−Δωt+Δφ)` on the great circle.
pub fn homodyne_beat_sample(state: &PlantState, a_mod: f64, wm: f64, t: f64) -> f64 {
    if !state.probe.shutter_open || !state.lo.shutter_open {
        return 0.0;
    }
    let (a, b) = state.overlap_terms(Detector::Homodyne);
    let mu = a_mod * (wm * t).sin();
    let c = a * mu.cos() + b * mu.sin();
    let wc = 2.0 * PI * state.cfg.beat_hz;
    let z = c * Complex64::from_polar(1.0, state.delta_phi() - wc * t);
    state.homodyne_scale() * z.re
}

fn homodyne_dc_unclipped(state: &PlantState) -> f64 {
    let (pp, pm) = state.splitter_outputs();
    (pp - pm) * state.cfg.homodyne.gain()
}

/// Noise-free homodyne DC level, clipped to the detector range.
pub fn homodyne_dc(state: &PlantState) -> DcSample {
    let (volts, saturated) = state.cfg.homodyne.clip(homodyne_dc_unclipped(state));
    DcSample { volts, saturated }
}

/// Measured quadrature variance in shot-noise units.
pub fn quadrature_variance(r: f64, l_eff: f64, lock_angle: f64, phase_jitter_rms: f64) -> f64 {
    let jitter = (-2.0 * phase_jitter_rms * phase_jitter_rms).exp();
    l_eff + (1.0 - l_eff) * ((2.0 * r).cosh() - (2.0 * r).sinh() * jitter * (2.0 * lock_angle).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> PlantConfig {
        let mut c = PlantConfig::default();
        c.drift = DriftConfig::none();
        c.homodyne.noise_rms = 0.0;
        c.opa_monitor.noise_rms = 0.0;
        c
    }

    #[test]
    fn default_plant_reproduces_calibration_point() {
        let cfg = PlantConfig::default();
        let l = cfg.chain_loss();
        assert!((l - 0.270).abs() < 1e-3);
        let r = cfg.opa.squeeze_param(PUMP_OPERATING_W);
        let sq = 10.0 * quadrature_variance(r, l, 0.0, 0.0).log10();
        let asq = 10.0 * quadrature_variance(r, l, PI / 2.0, 0.0).log10();
        assert!((sq - CALIBRATION_SQ_DB).abs() < 1e-9);
        assert!((asq - CALIBRATION_ASQ_DB).abs() < 1e-9);
    }

    #[test]
    fn aligned_paths_deliver_vertical_light() {
        let p = PlantState::new(quiet()).unwrap();
        assert!((mode_overlap(&p.probe.pol, &JonesState::vertical()) - 1.0).abs() < 1e-12);
        assert!((mode_overlap(&p.lo.pol, &JonesState::vertical()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dc_examples() {
        let mut p = PlantState::new(quiet()).unwrap();
        p.set_shutters(false, true, false);
        // 16 mW delivered
        p.set_attenuation(1, 16e-3 / (20e-3 * 0.9));
        assert!(homodyne_dc(&p).volts.abs() < 1e-12);
        p.set_peltier(p.bs_hd.reference_temperature + 0.0005 / 0.0095);
        let d = homodyne_dc(&p);
        assert!((d.volts - 0.72720).abs() < 1e-4, "{}", d.volts);
        assert!(!d.saturated);
        p.set_peltier(p.bs_hd.reference_temperature + 0.002 / 0.0095);
        let d = homodyne_dc(&p);
        assert_eq!(d.volts, 1.0);
        assert!(d.saturated);
    }

    #[test]
    fn stream_matches_pure_sampler() {
        let mut p = PlantState::new(quiet()).unwrap();
        p.set_shutters(true, true, true);
        p.set_great_circle(0.1, -0.02);
        p.set_modulation(Some(Modulation { path: PathId::Lo, piezo: 0, amplitude: 0.05 }));
        let fs = p.sample_rate();
        let wm = 2.0 * PI * p.cfg.modulation_hz;
        let mut buf = vec![0.0; 3000];
        let t0 = p.time();
        p.burst(Detector::Homodyne, &mut buf);
        for (i, v) in buf.iter().enumerate() {
            let t = t0 + i as f64 / fs;
            let want = homodyne_beat_sample(&p, 0.05, wm, t);
            assert!((v - want).abs() < 1e-9 * (1.0 + want.abs()), "{i}: {v} vs {want}");
        }
        p.set_modulation(Some(Modulation { path: PathId::Probe, piezo: 0, amplitude: 0.05 }));
        p.burst(Detector::OpaMonitor, &mut buf);
        for (i, v) in buf.iter().enumerate() {
            let t = t0 + i as f64 / fs;
            let want = opa_monitor_sample(&p, 0.05, wm, t);
            assert!((v - want).abs() < 1e-9 * (1.0 + want.abs()), "{i}: {v} vs {want}");
        }
    }

    #[test]
    fn jones_stream_matches_explicit_rotation() {
        let mut p = PlantState::new(quiet()).unwrap();
        p.set_shutters(true, true, false);
        p.set_piezo(PathId::Lo, 1, 2100);
        let m = Modulation::from_counts(PathId::Lo, 1, 32.0, &p.lo_path.bank);
        p.set_modulation(Some(m));
        let (a, b) = p.overlap_terms(Detector::Homodyne);
        for &mu in &[0.0, 0.004, -0.01] {
            let mut path = p.lo_path;
            let rot = piezo_rotation(&p.cfg.geometry, 1, path.bank.angle(1) + 2.0 * mu);
            let mut full = path.pre;
            full = piezo_rotation(&p.cfg.geometry, 0, path.bank.angle(0)).then_after(&full);
            full = rot.then_after(&full);
            full = piezo_rotation(&p.cfg.geometry, 2, path.bank.angle(2)).then_after(&full);
            full = path.post.then_after(&full);
            let l = full.apply(&path.source);
            let want = l.inner(&p.probe.pol);
            let got = a * mu.cos() + b * mu.sin();
            assert!((want - got).norm() < 1e-12);
            path.bank.set(1, 2100).unwrap();
        }
    }

    #[test]
    fn closed_shutters_give_dark_level() {
        let p = PlantState::new(quiet()).unwrap();
        assert_eq!(opa_monitor_sample(&p, 0.05, 1.0, 0.1), 0.0);
        assert_eq!(homodyne_beat_sample(&p, 0.05, 1.0, 0.1), 0.0);
    }

    #[test]
    fn phase_ramp_accumulates_through_advance() {
        let mut c = quiet();
        c.drift.probe_phase_ramp = 0.1;
        let mut p = PlantState::new(c).unwrap();
        let before = p.delta_phi();
        p.advance(10.0);
        assert!(wrap_phase(p.delta_phi() - before - 1.0).abs() < 1e-9);
    }
}
