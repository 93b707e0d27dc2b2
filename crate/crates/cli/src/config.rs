//! Flat `key = value` run configuration.
//!
//! Every tunable parameter has one dotted key. Keys are applied in order:
//! scenario defaults, then the config file, then `--set` overrides.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use fiberlock_core::loops::CouplingMode;
use fiberlock_core::plant::PlantConfig;
use fiberlock_core::sequencer::{Schedule, SequencerCfg};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    UnknownKey { key: String, origin: String },
    BadValue { key: String, value: String, reason: String },
    Syntax { origin: String, line: String },
    UnknownScenario(String),
    Io(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::UnknownKey { key, origin } => write!(f, "{origin}: unknown key `{key}`"),
            ConfigError::BadValue { key, value, reason } => write!(f, "{key}: bad value `{value}`: {reason}"),
            ConfigError::Syntax { origin, line } => write!(f, "{origin}: expected `key = value`, got `{line}`"),
            ConfigError::UnknownScenario(s) => {
                write!(f, "unknown scenario `{s}` (expected one of: {})", Scenario::names().join(", "))
            }
            ConfigError::Io(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    ErrorSweep,
    PhaseImmunity,
    OpaSweep,
    PolCompare,
    CouplingLock,
    Longrun,
    PhaseReset,
    PowerLoop,
}

impl Scenario {
    pub const ALL: [Scenario; 8] = [
        Scenario::ErrorSweep,
        Scenario::PhaseImmunity,
        Scenario::OpaSweep,
        Scenario::PolCompare,
        Scenario::CouplingLock,
        Scenario::Longrun,
        Scenario::PhaseReset,
        Scenario::PowerLoop,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Scenario::ErrorSweep => "error-sweep",
            Scenario::PhaseImmunity => "phase-immunity",
            Scenario::OpaSweep => "opa-sweep",
            Scenario::PolCompare => "pol-compare",
            Scenario::CouplingLock => "coupling-lock",
            Scenario::Longrun => "longrun",
            Scenario::PhaseReset => "phase-reset",
            Scenario::PowerLoop => "power-loop",
        }
    }

    pub fn names() -> Vec<&'static str> {
        Self::ALL.iter().map(|s| s.name()).collect()
    }
}

impl FromStr for Scenario {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.iter().copied().find(|x| x.name() == s).ok_or_else(|| ConfigError::UnknownScenario(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepCfg {
    pub points: usize,
    pub max_theta: f64,
    pub opa_points: usize,
    pub phases: usize,
    pub phase_theta: f64,
    /// Averaging window of one settled β reading, s.
    pub average_s: f64,
    /// Averaging window of the phase-immunity readings, s.
    pub phase_average_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompareCfg {
    pub steps: usize,
    pub rate_hz: f64,
    pub step_counts: i64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerScenarioCfg {
    /// Peak-to-peak fractional source drift.
    pub drift: f64,
    pub period_s: f64,
    pub duration_s: f64,
    pub tick_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub plant: PlantConfig,
    /// Drift update interval, s; sets the plant drift block.
    pub drift_block_s: f64,
    pub seq: SequencerCfg,
    pub schedule: Schedule,
    pub sweep: SweepCfg,
    pub compare: CompareCfg,
    pub power: PowerScenarioCfg,
    /// Run the long campaign with polarization and coupling control off.
    pub reference: bool,
    /// Rows between samples in trace outputs.
    pub trace_decimation: usize,
}

impl RunConfig {
    /// Defaults for `scenario`.
    pub fn new(scenario: Scenario) -> Self {
        let mut c = Self {
            scenario,
            plant: PlantConfig::default(),
            drift_block_s: 1e-3,
            seq: SequencerCfg::default(),
            schedule: Schedule::default(),
            sweep: SweepCfg { points: 41, max_theta: 0.4, opa_points: 21, phases: 8, phase_theta: 0.1, average_s: 1.0, phase_average_s: 4.0 },
            compare: CompareCfg { steps: 1000, rate_hz: 30.0, step_counts: 8 },
            power: PowerScenarioCfg { drift: 0.15, period_s: 600.0, duration_s: 1200.0, tick_s: 0.1 },
            reference: false,
            trace_decimation: 1,
        };
        if matches!(scenario, Scenario::Longrun | Scenario::PhaseReset) {
            // the campaign spends most of its samples in alignments; 2 MS/s
            // still leaves the 400 kHz beat well inside Nyquist
            c.plant.sample_rate = 2e6;
        }
        match scenario {
            Scenario::PolCompare => {
                // the optimum must stay put so the traces show controller
                // jitter rather than tracking
                c.plant.drift.pol_random_walk = 0.0;
                c.plant.drift.lo_pol_ramp = 0.0;
                c.plant.drift.probe_pol_ramp = 0.0;
                c.plant.power_noise_rel = 1e-3;
            }
            Scenario::PhaseReset => {
                c.plant.drift.probe_phase_ramp = 5.0;
                c.schedule.total = 3600.0;
            }
            _ => {}
        }
        c
    }

    pub fn seed(&self) -> u64 {
        self.plant.seed
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.plant.seed = seed;
    }

    /// Plant configuration with the drift block derived from the rate.
    pub fn plant_config(&self) -> PlantConfig {
        let mut p = self.plant.clone();
        p.drift_block = ((p.sample_rate * self.drift_block_s).round() as usize).max(1);
        p
    }

    pub fn sequencer(&self) -> SequencerCfg {
        if self.reference {
            let mut s = self.seq;
            s.polarization_control = false;
            s.coupling.mode = CouplingMode::ThermistorHold;
            s
        } else {
            self.seq
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let k = keys()
            .iter()
            .find(|k| k.name == key)
            .ok_or_else(|| ConfigError::UnknownKey { key: key.to_string(), origin: "--set".to_string() })?;
        (k.set)(self, value.trim()).map_err(|reason| ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            reason,
        })
    }

    pub fn get(&self, key: &str) -> Option<String> {
        keys().iter().find(|k| k.name == key).map(|k| (k.get)(self))
    }

    /// Parses `key = value` lines; `#` starts a comment. All lines are
    /// checked before any is applied.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), ConfigError> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = format!("{origin}:{}", n + 1);
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { origin: at.clone(), line: line.to_string() })?;
            let k = k.trim();
            if !keys().iter().any(|x| x.name == k) {
                return Err(ConfigError::UnknownKey { key: k.to_string(), origin: at });
            }
            pairs.push((k.to_string(), v.trim().to_string()));
        }
        for (k, v) in pairs {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Applies `key=value` overrides, checking every key first.
    pub fn apply_overrides(&mut self, sets: &[String]) -> Result<(), ConfigError> {
        let mut pairs = Vec::new();
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { origin: "--set".to_string(), line: s.clone() })?;
            let k = k.trim();
            if !keys().iter().any(|x| x.name == k) {
                return Err(ConfigError::UnknownKey { key: k.to_string(), origin: "--set".to_string() });
            }
            pairs.push((k.to_string(), v.to_string()));
        }
        for (k, v) in pairs {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    /// Every key with its current value, sorted by key.
    pub fn listing(&self) -> Vec<(&'static str, String)> {
        let mut v: Vec<_> = keys().iter().map(|k| (k.name, (k.get)(self))).collect();
        v.sort_by(|a, b| a.0.cmp(b.0));
        v
    }

    /// SHA-256 over the scenario name and the sorted key listing.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.scenario.name().as_bytes());
        for (k, v) in self.listing() {
            h.update(b"\n");
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

pub struct Key {
    pub name: &'static str,
    pub help: &'static str,
    pub get: fn(&RunConfig) -> String,
    pub set: fn(&mut RunConfig, &str) -> Result<(), String>,
}

fn parse<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| e.to_string())
}

fn parse_finite(v: &str) -> Result<f64, String> {
    let x: f64 = parse(v)?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err("must be finite".to_string())
    }
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err("expected true or false".to_string()),
    }
}

macro_rules! num {
    ($name:literal, $help:literal, $($f:ident).+) => {
        Key {
            name: $name,
            help: $help,
            get: |c| format!("{}", c.$($f).+),
            set: |c, v| {
                c.$($f).+ = parse_finite(v)?;
                Ok(())
            },
        }
    };
}

macro_rules! int {
    ($name:literal, $help:literal, $t:ty, $($f:ident).+) => {
        Key {
            name: $name,
            help: $help,
            get: |c| format!("{}", c.$($f).+),
            set: |c, v| {
                c.$($f).+ = parse::<$t>(v)?;
                Ok(())
            },
        }
    };
}

macro_rules! flag {
    ($name:literal, $help:literal, $($f:ident).+) => {
        Key {
            name: $name,
            help: $help,
            get: |c| format!("{}", c.$($f).+),
            set: |c, v| {
                c.$($f).+ = parse_bool(v)?;
                Ok(())
            },
        }
    };
}

/// The key registry.
pub fn keys() -> &'static [Key] {
    static KEYS: std::sync::OnceLock<Vec<Key>> = std::sync::OnceLock::new();
    KEYS.get_or_init(build_keys)
}

fn build_keys() -> Vec<Key> {
    vec![
        int!("seed", "run seed", u64, plant.seed),
        num!("plant.sample_rate", "simulation sample rate, S/s", plant.sample_rate),
        num!("plant.drift_block_s", "drift update interval, s", drift_block_s),
        num!("plant.beat_hz", "probe frequency shift, Hz", plant.beat_hz),
        num!("plant.modulation_hz", "polarization modulation frequency, Hz", plant.modulation_hz),
        num!("plant.probe_source_w", "probe source power, W", plant.probe_source_w),
        num!("plant.lo_source_w", "LO source power, W", plant.lo_source_w),
        num!("plant.pump_source_w", "pump source power, W", plant.pump_source_w),
        num!("plant.monitor_tap", "power monitor pick-off fraction", plant.monitor_tap),
        num!("plant.opa_tap", "OPA monitor tap fraction", plant.opa_tap),
        num!("plant.dc_noise_rms", "homodyne DC reading noise, V", plant.dc_noise_rms),
        num!("plant.power_noise_rel", "fractional power noise rms", plant.power_noise_rel),
        num!("plant.power_noise_tau", "power noise correlation time, s", plant.power_noise_tau),
        num!("plant.path_loss", "passive loss OPA to detector", plant.path_loss),
        num!("plant.phase_jitter_rms", "fast measurement phase jitter, rad", plant.phase_jitter_rms),
        num!("plant.variance_noise_rel", "relative noise of one variance evaluation", plant.variance_noise_rel),
        num!("plant.lo_reference_w", "LO power of the shot-noise unit, W", plant.lo_reference_w),
        num!("plant.piezo_rad_per_volt", "polarization piezo gain, rad/V", plant.rad_per_volt),
        num!("opa.squeeze_per_sqrt_watt", "squeeze parameter per sqrt(W) of pump", plant.opa.squeeze_per_sqrt_watt),
        num!("opa.insertion_loss", "OPA insertion loss", plant.opa.insertion_loss),
        num!("opa.thermal_settle_tau", "thermal time constant after pump opens, s", plant.opa.thermal_settle_tau),
        num!("opa.thermal_phase_offset", "settled thermal pump-phase offset, rad", plant.opa.thermal_phase_offset),
        num!("splitter.nominal_ratio", "coupler ratio at reference temperature", plant.bs_hd.nominal_ratio),
        num!("splitter.temp_coeff", "coupler ratio change per degC", plant.bs_hd.temp_coeff),
        num!("splitter.pol_coeff", "coupler ratio shift for orthogonal input", plant.bs_hd.pol_coeff),
        num!("splitter.reference_temperature", "coupler reference temperature, degC", plant.bs_hd.reference_temperature),
        num!("stretcher.rad_per_volt", "fiber stretcher gain, rad/V", plant.stretcher.rad_per_volt),
        num!("stretcher.max_voltage", "fiber stretcher range, V", plant.stretcher.max_voltage),
        num!("stretcher.voltage", "initial stretcher voltage, V", plant.stretcher.voltage),
        num!("homodyne.responsivity", "homodyne photodiode responsivity, A/W", plant.homodyne.responsivity),
        num!("homodyne.quantum_efficiency", "homodyne quantum efficiency", plant.homodyne.quantum_efficiency),
        num!("homodyne.transimpedance", "homodyne transimpedance, ohm", plant.homodyne.transimpedance),
        num!("homodyne.post_gain", "homodyne amplifier gain", plant.homodyne.post_gain),
        num!("homodyne.saturation", "homodyne output limit, V", plant.homodyne.saturation),
        num!("homodyne.noise_rms", "homodyne sample noise, V", plant.homodyne.noise_rms),
        num!("opa_monitor.responsivity", "OPA monitor responsivity, A/W", plant.opa_monitor.responsivity),
        num!("opa_monitor.transimpedance", "OPA monitor transimpedance, ohm", plant.opa_monitor.transimpedance),
        num!("opa_monitor.post_gain", "OPA monitor amplifier gain", plant.opa_monitor.post_gain),
        num!("opa_monitor.noise_rms", "OPA monitor sample noise, V", plant.opa_monitor.noise_rms),
        num!("drift.phase_random_walk", "optical phase random walk, rad/sqrt(s)", plant.drift.phase_random_walk),
        num!("drift.probe_phase_ramp", "probe phase ramp, rad/s", plant.drift.probe_phase_ramp),
        num!("drift.lo_phase_ramp", "LO phase ramp, rad/s", plant.drift.lo_phase_ramp),
        num!("drift.pump_phase_ramp", "pump phase ramp, rad/s", plant.drift.pump_phase_ramp),
        num!("drift.pol_random_walk", "polarization random walk, rad/sqrt(s)", plant.drift.pol_random_walk),
        num!("drift.lo_pol_ramp", "LO polarization rotation, rad/s", plant.drift.lo_pol_ramp),
        num!("drift.probe_pol_ramp", "probe polarization rotation, rad/s", plant.drift.probe_pol_ramp),
        num!("drift.power_amplitude", "source power sinusoid amplitude (fraction)", plant.drift.power_amplitude),
        num!("drift.power_period", "source power sinusoid period, s", plant.drift.power_period),
        num!("drift.temperature_amplitude", "coupler temperature sinusoid, degC", plant.drift.temperature_amplitude),
        num!("drift.temperature_period", "coupler temperature period, s", plant.drift.temperature_period),
        num!("pol.modulation_amplitude_counts", "polarization modulation amplitude, counts", seq.pol.modulation_amplitude_counts),
        int!("pol.cycles", "minimum piezo sweeps", usize, seq.pol.cycles),
        int!("pol.max_cycles", "piezo sweeps before giving up", usize, seq.pol.max_cycles),
        num!("pol.bandwidth_hz", "sub-loop closed-loop bandwidth, Hz", seq.pol.bandwidth_hz),
        num!("pol.threshold_factor", "convergence threshold in noise-floor units", seq.pol.threshold_factor),
        num!("pol.min_threshold", "lower bound of the convergence threshold", seq.pol.min_threshold),
        num!("pol.polarity", "+1 maximizes interference, -1 minimizes", seq.pol.polarity),
        num!("pol.settle_s", "settling after a modulation change, s", seq.pol.window.settle_s),
        num!("pol.average_s", "noise-floor averaging window, s", seq.pol.window.average_s),
        num!("pol.check_s", "convergence check interval, s", seq.pol.check_s),
        num!("pol.max_subloop_s", "sub-loop timeout, s", seq.pol.max_subloop_s),
        num!("coupling.loop_gain", "coupling loop gain, degC/(V s)", seq.coupling.loop_gain),
        num!("coupling.max_slew", "Peltier slew limit, degC/s", seq.coupling.max_slew),
        num!("coupling.window_s", "DC averaging window, s", seq.coupling.window_s),
        Key {
            name: "coupling.mode",
            help: "dc-feedback or thermistor-hold",
            get: |c| match c.seq.coupling.mode {
                CouplingMode::DcFeedback => "dc-feedback".to_string(),
                CouplingMode::ThermistorHold => "thermistor-hold".to_string(),
            },
            set: |c, v| {
                c.seq.coupling.mode = match v {
                    "dc-feedback" => CouplingMode::DcFeedback,
                    "thermistor-hold" => CouplingMode::ThermistorHold,
                    _ => return Err("expected dc-feedback or thermistor-hold".to_string()),
                };
                Ok(())
            },
        },
        num!("power.loop_gain", "power loop gain, 1/s", seq.power_loop_gain),
        num!("power.target_probe_opa_align", "probe power for OPA alignment, W", seq.targets.probe_opa_align),
        num!("power.target_probe_hd_align", "probe power for homodyne alignment, W", seq.targets.probe_hd_align),
        num!("power.target_probe_measure", "probe power during measurement, W", seq.targets.probe_measure),
        num!("power.target_lo_align", "LO power for alignment, W", seq.targets.lo_align),
        num!("power.target_lo_measure", "LO power during measurement, W", seq.targets.lo_measure),
        num!("power.target_pump", "pump power at the OPA, W", seq.targets.pump),
        num!("phase.loop_gain", "phase lock gain, 1/s", seq.phase_loop_gain),
        num!("phase.relock_tolerance", "lock tolerance, rad", seq.relock_tolerance),
        num!("sequence.tick_s", "controller tick during procedures, s", seq.tick_s),
        int!("sequence.variance_samples", "evaluations per variance level", usize, seq.variance_samples),
        num!("sequence.lock_timeout_s", "phase lock timeout, s", seq.lock_timeout_s),
        num!("sequence.coupling_tick_s", "coupling alignment tick, s", seq.coupling_tick_s),
        num!("sequence.coupling_tolerance_v", "coupling alignment tolerance, V", seq.coupling_tolerance_v),
        num!("sequence.coupling_timeout_s", "coupling alignment timeout, s", seq.coupling_timeout_s),
        num!("sequence.max_sequence_s", "latest measurement start before slot end, s", seq.max_sequence_s),
        flag!("sequence.polarization_control", "run polarization alignment stages", seq.polarization_control),
        flag!("sequence.pump_enabled", "open the pump shutter during measurements", seq.pump_enabled),
        num!("sequence.analysis_freq_mhz", "analysis frequency label, MHz", seq.analysis_freq_mhz),
        int!("sequence.log_decimation", "keep every n-th loop tick in logs", usize, seq.log_decimation),
        num!("schedule.alignment_period", "alignment period, s", schedule.alignment_period),
        num!("schedule.measurement_period", "measurement period, s", schedule.measurement_period),
        num!("schedule.total", "campaign length, s", schedule.total),
        num!("schedule.compression", "time compression factor", schedule.compression),
        int!("sweep.points", "error-sweep grid points", usize, sweep.points),
        num!("sweep.max_theta", "error-sweep half range, rad", sweep.max_theta),
        int!("sweep.opa_points", "OPA sweep grid points over [0, pi/2]", usize, sweep.opa_points),
        int!("sweep.phases", "optical phases in the phase-immunity sweep", usize, sweep.phases),
        num!("sweep.phase_theta", "mismatch of the phase-immunity sweep, rad", sweep.phase_theta),
        num!("sweep.average_s", "averaging window of one sweep point, s", sweep.average_s),
        num!("sweep.phase_average_s", "averaging window of one phase-immunity point, s", sweep.phase_average_s),
        int!("compare.steps", "steps per polarization trace", usize, compare.steps),
        num!("compare.rate_hz", "steps per second", compare.rate_hz),
        int!("compare.step_counts", "random-walk step, counts", i64, compare.step_counts),
        num!("powerloop.drift", "peak-to-peak source drift (fraction)", power.drift),
        num!("powerloop.period_s", "source drift period, s", power.period_s),
        num!("powerloop.duration_s", "run length per target, s", power.duration_s),
        num!("powerloop.tick_s", "power loop tick, s", power.tick_s),
        flag!("longrun.reference", "disable polarization and coupling control", reference),
        int!("output.trace_decimation", "rows between trace samples", usize, trace_decimation),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_rejected() {
        let mut c = RunConfig::new(Scenario::ErrorSweep);
        let e = c.apply_overrides(&["plant.nope=1".to_string()]).unwrap_err();
        assert!(matches!(e, ConfigError::UnknownKey { .. }));
        let e = c.apply_text("seed = 3\nfoo.bar = 2\n", "cfg").unwrap_err();
        assert_eq!(e, ConfigError::UnknownKey { key: "foo.bar".into(), origin: "cfg:2".into() });
        // nothing applied when any key is bad
        assert_eq!(c.seed(), 1);
    }

    #[test]
    fn every_key_round_trips() {
        let c = RunConfig::new(Scenario::Longrun);
        let mut d = RunConfig::new(Scenario::Longrun);
        for (k, v) in c.listing() {
            d.set(k, &v).unwrap();
        }
        assert_eq!(c, d);
        assert_eq!(c.hash(), d.hash());
    }

    #[test]
    fn override_changes_hash() {
        let a = RunConfig::new(Scenario::ErrorSweep);
        let mut b = a.clone();
        b.apply_overrides(&["drift.lo_pol_ramp=2e-5".into()]).unwrap();
        assert_eq!(b.plant.drift.lo_pol_ramp, 2e-5);
        assert_ne!(a.hash(), b.hash());
        assert!(b.set("coupling.mode", "sideways").is_err());
        assert!(b.set("sweep.points", "-3").is_err());
    }

    #[test]
    fn comments_and_blank_lines() {
        let mut c = RunConfig::new(Scenario::ErrorSweep);
        c.apply_text("# plant\n\nplant.beat_hz = 100e3  # shift\n", "f").unwrap();
        assert_eq!(c.plant.beat_hz, 100e3);
        assert!(c.apply_text("just words", "f").is_err());
    }
}
