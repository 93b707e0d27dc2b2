use std::f64::consts::PI;

use num_complex::Complex64;

use super::log::flags;
use crate::plant::wrap_phase;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseLoopCfg {
    pub carrier_hz: f64,
    /// Demodulated beat phase the loop holds, rad.
    pub lock_quadrature: f64,
    /// Closed-loop bandwidth in rad/s.
    pub loop_gain: f64,
    /// Change of the demodulated beat phase per stretcher volt (signed).
    pub phase_per_volt: f64,
    pub max_voltage: f64,
    /// Voltage the reset moves back toward.
    pub center_voltage: f64,
    /// Time the stretcher takes to slew during a reset, s.
    pub reset_duration: f64,
    /// Error below which the loop counts as locked, rad.
    pub relock_tolerance: f64,
    /// How long the error must stay within tolerance to end a relock, s.
    pub relock_hold: f64,
    /// Minimum beat amplitude for the carrier to count as present, V.
    pub min_amplitude: f64,
}

impl PhaseLoopCfg {
    /// OPA lock: probe stretcher, 2Δω beat, beat phase moves at twice the
    /// stretcher phase.
    pub fn opa(carrier_hz: f64, rad_per_volt: f64) -> Self {
        Self::new(carrier_hz, 2.0 * rad_per_volt)
    }

    /// Homodyne lock: LO stretcher, Δω beat, beat phase moves opposite to
    /// the LO phase.
    pub fn homodyne(carrier_hz: f64, rad_per_volt: f64) -> Self {
        Self::new(carrier_hz, -rad_per_volt)
    }

    fn new(carrier_hz: f64, phase_per_volt: f64) -> Self {
        Self {
            carrier_hz,
            lock_quadrature: 0.0,
            loop_gain: 200.0,
            phase_per_volt,
            max_voltage: 70.0,
            center_voltage: 35.0,
            reset_duration: 0.01,
            relock_tolerance: 0.1,
            relock_hold: 0.02,
            min_amplitude: 1e-4,
        }
    }

    /// Voltage step that shifts the beat phase by one full turn.
    pub fn voltage_period(&self) -> f64 {
        2.0 * PI / self.phase_per_volt.abs()
    }
}

/// Time span during which a loop was reacquiring lock after a reset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelockInterval {
    pub start: f64,
    /// `None` while still relocking.
    pub end: Option<f64>,
}

impl RelockInterval {
    pub fn overlaps(&self, a: f64, b: f64) -> bool {
        let end = self.end.unwrap_or(f64::INFINITY);
        self.start < b && end > a
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseStep {
    pub voltage: f64,
    pub error: f64,
    pub amplitude: f64,
    pub flags: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Mode {
    Tracking,
    Slewing { from: f64, to: f64, t0: f64 },
}

/// Beat-note phase lock with stretcher reset.
#[derive(Debug, Clone)]
pub struct PhaseLoop {
    pub cfg: PhaseLoopCfg,
    pub voltage: f64,
    pub held: bool,
    mode: Mode,
    in_tol_since: Option<f64>,
    pub intervals: Vec<RelockInterval>,
    pub resets: usize,
    pub last_error: f64,
}

/// Phase `Φ` and amplitude of a beat `A cos(ωc t − Φ)` sampled at absolute
/// indices `first_index..`.
pub fn demodulate(samples: &[f64], first_index: u64, carrier_hz: f64, sample_rate: f64) -> (f64, f64) {
    let w = 2.0 * PI * carrier_hz / sample_rate;
    let mut p = Complex64::from_polar(1.0, -2.0 * PI * ((first_index as f64) * carrier_hz / sample_rate).fract());
    let r = Complex64::from_polar(1.0, -w);
    let mut z = Complex64::new(0.0, 0.0);
    for &x in samples {
        z += p * x;
        p *= r;
    }
    let n = samples.len().max(1) as f64;
    (-z.arg(), 2.0 * z.norm() / n)
}

impl PhaseLoop {
    pub fn new(cfg: PhaseLoopCfg, voltage: f64) -> Self {
        Self {
            cfg,
            voltage,
            held: true,
            mode: Mode::Tracking,
            in_tol_since: None,
            intervals: Vec::new(),
            resets: 0,
            last_error: 0.0,
        }
    }

    /// Engages the loop.
    pub fn release(&mut self) {
        self.held = false;
    }

    /// Freezes the stretcher at its present voltage. An open relock
    /// interval is closed at `t`.
    pub fn hold(&mut self, t: f64) {
        self.held = true;
        if let Mode::Slewing { to, .. } = self.mode {
            self.voltage = to;
        }
        self.mode = Mode::Tracking;
        self.close_interval(t);
    }

    pub fn set_quadrature(&mut self, q: f64) {
        self.cfg.lock_quadrature = q;
        self.in_tol_since = None;
    }

    pub fn relocking(&self) -> bool {
        self.intervals.last().map(|i| i.end.is_none()).unwrap_or(false)
    }

    fn close_interval(&mut self, t: f64) {
        if let Some(last) = self.intervals.last_mut() {
            if last.end.is_none() {
                last.end = Some(t);
            }
        }
    }

    /// Whether the error has stayed within tolerance for the hold time.
    pub fn locked(&self, t: f64) -> bool {
        !self.held
            && matches!(self.mode, Mode::Tracking)
            && self.in_tol_since.map(|s| t - s >= self.cfg.relock_hold).unwrap_or(false)
    }
}

/// One tick: demodulate the beat burst, integrate onto the stretcher and
/// handle range exhaustion.
pub fn phase_loop_step(
    lp: &mut PhaseLoop,
    beat: &[f64],
    first_index: u64,
    sample_rate: f64,
    t: f64,
    dt: f64,
) -> PhaseStep {
    let cfg = lp.cfg;
    if lp.held {
        return PhaseStep { voltage: lp.voltage, error: lp.last_error, amplitude: 0.0, flags: flags::HELD };
    }
    if let Mode::Slewing { from, to, t0 } = lp.mode {
        let f = ((t - t0) / cfg.reset_duration).clamp(0.0, 1.0);
        lp.voltage = from + (to - from) * f;
        if f >= 1.0 {
            lp.mode = Mode::Tracking;
        }
        return PhaseStep { voltage: lp.voltage, error: lp.last_error, amplitude: 0.0, flags: flags::RELOCKING };
    }
    let (phi, amplitude) = demodulate(beat, first_index, cfg.carrier_hz, sample_rate);
    if amplitude < cfg.min_amplitude {
        lp.in_tol_since = None;
        return PhaseStep { voltage: lp.voltage, error: lp.last_error, amplitude, flags: flags::NO_CARRIER };
    }
    let err = wrap_phase(phi - cfg.lock_quadrature);
    lp.last_error = err;
    if err.abs() < cfg.relock_tolerance {
        if lp.in_tol_since.is_none() {
            lp.in_tol_since = Some(t);
        }
        if lp.relocking() && t - lp.in_tol_since.unwrap_or(t) >= cfg.relock_hold {
            lp.close_interval(t);
        }
    } else {
        lp.in_tol_since = None;
    }
    let mut fl = if lp.relocking() { flags::RELOCKING } else { 0 };
    let k = (cfg.loop_gain * dt).min(1.0);
    let v = lp.voltage - k * err / cfg.phase_per_volt;
    if v < 0.0 || v > cfg.max_voltage {
        // range exhausted: jump back toward the centre by whole beat periods
        let period = cfg.voltage_period();
        let target = v - ((v - cfg.center_voltage) / period).round() * period;
        lp.mode = Mode::Slewing { from: lp.voltage, to: target.clamp(0.0, cfg.max_voltage), t0: t };
        lp.resets += 1;
        lp.in_tol_since = None;
        lp.close_interval(t);
        lp.intervals.push(RelockInterval { start: t, end: None });
        fl |= flags::RESET | flags::RELOCKING;
    } else {
        lp.voltage = v;
    }
    PhaseStep { voltage: lp.voltage, error: err, amplitude, flags: fl }
}
