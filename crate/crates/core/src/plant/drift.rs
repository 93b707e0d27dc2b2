use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::polarization::SphereRotation;

/// Drift process shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DriftKind {
    /// Brownian motion, `rate` in units/√s.
    RandomWalk { rate: f64 },
    /// `amplitude·sin(2πt/period + phase)`.
    Sinusoid { amplitude: f64, period: f64, phase: f64 },
    /// Linear, `rate` in units/s.
    Ramp { rate: f64 },
}

/// A scalar drift process.
#[derive(Debug, Clone)]
pub struct DriftGenerator {
    pub kind: DriftKind,
    value: f64,
    t: f64,
    rng: ChaCha8Rng,
}

/// Independent, reproducible stream for generator `index` of run `seed`.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

impl DriftGenerator {
    pub fn new(kind: DriftKind, seed: u64, index: u64) -> Self {
        let mut g = Self { kind, value: 0.0, t: 0.0, rng: stream_rng(seed, index) };
        g.value = g.eval_deterministic();
        g
    }

    fn eval_deterministic(&self) -> f64 {
        match self.kind {
            DriftKind::Sinusoid { amplitude, period, phase } => {
                if period > 0.0 {
                    amplitude * (2.0 * PI * self.t / period + phase).sin()
                } else {
                    0.0
                }
            }
            DriftKind::Ramp { rate } => rate * self.t,
            DriftKind::RandomWalk { .. } => self.value,
        }
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn step(&mut self, dt: f64) -> f64 {
        self.t += dt;
        match self.kind {
            DriftKind::RandomWalk { rate } => {
                if rate != 0.0 {
                    let n: f64 = self.rng.sample(StandardNormal);
                    self.value += rate * dt.sqrt() * n;
                }
            }
            _ => self.value = self.eval_deterministic(),
        }
        self.value
    }
}

/// Polarization perturbation of one fiber path: a random walk on the
/// rotation group plus an optional steady rotation about a fixed axis.
#[derive(Debug, Clone)]
pub struct PolarizationDrift {
    pub random_walk_rate: f64,
    pub ramp_axis: [f64; 3],
    pub ramp_rate: f64,
    rotation: SphereRotation,
    rng: ChaCha8Rng,
}

impl PolarizationDrift {
    pub fn new(random_walk_rate: f64, ramp_axis: [f64; 3], ramp_rate: f64, seed: u64, index: u64) -> Self {
        Self {
            random_walk_rate,
            ramp_axis,
            ramp_rate,
            rotation: SphereRotation::identity(),
            rng: stream_rng(seed, index),
        }
    }

    pub fn rotation(&self) -> &SphereRotation {
        &self.rotation
    }

    pub fn step(&mut self, dt: f64) {
        if self.random_walk_rate != 0.0 {
            let s = self.random_walk_rate * dt.sqrt();
            let w = [
                s * self.rng.sample::<f64, _>(StandardNormal),
                s * self.rng.sample::<f64, _>(StandardNormal),
                s * self.rng.sample::<f64, _>(StandardNormal),
            ];
            let angle = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
            if angle > 0.0 {
                let axis = [w[0] / angle, w[1] / angle, w[2] / angle];
                let step = SphereRotation::about_unchecked(axis, angle);
                self.rotation = step.then_after(&self.rotation);
            }
        }
        if self.ramp_rate != 0.0 {
            let step = SphereRotation::about_unchecked(self.ramp_axis, self.ramp_rate * dt);
            self.rotation = step.then_after(&self.rotation);
        }
    }
}

/// Magnitudes of all plant drifts, per nominal (uncompressed) second.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftConfig {
    /// Optical phase random walk per path, rad/√s.
    pub phase_random_walk: f64,
    /// Forced phase ramps, rad/s.
    pub probe_phase_ramp: f64,
    pub lo_phase_ramp: f64,
    pub pump_phase_ramp: f64,
    /// Polarization random walk on the sphere, rad/√s.
    pub pol_random_walk: f64,
    /// Steady polarization rotation on the LO path, rad/s.
    pub lo_pol_ramp: f64,
    /// Steady polarization rotation on the probe path, rad/s.
    pub probe_pol_ramp: f64,
    /// Fractional source-power sinusoid.
    pub power_amplitude: f64,
    pub power_period: f64,
    /// Splitter temperature sinusoid, °C.
    pub temperature_amplitude: f64,
    pub temperature_period: f64,
}

impl Default for DriftConfig {
    fn default() -> Self {
        Self {
            phase_random_walk: 0.05,
            probe_phase_ramp: 0.0,
            lo_phase_ramp: 0.0,
            pump_phase_ramp: 0.0,
            pol_random_walk: 5e-4,
            lo_pol_ramp: 1e-5,
            probe_pol_ramp: 0.0,
            power_amplitude: 0.01,
            power_period: 600.0,
            temperature_amplitude: 0.5,
            temperature_period: 3600.0,
        }
    }
}

impl DriftConfig {
    /// Every drift disabled.
    pub fn none() -> Self {
        Self {
            phase_random_walk: 0.0,
            probe_phase_ramp: 0.0,
            lo_phase_ramp: 0.0,
            pump_phase_ramp: 0.0,
            pol_random_walk: 0.0,
            lo_pol_ramp: 0.0,
            probe_pol_ramp: 0.0,
            power_amplitude: 0.0,
            power_period: 600.0,
            temperature_amplitude: 0.0,
            temperature_period: 3600.0,
        }
    }
}

/// Fixed, generic axis used for steady polarization rotation.
const POL_RAMP_AXIS: [f64; 3] = [0.0, 0.6, 0.8];

/// All drift generators of the plant.
#[derive(Debug, Clone)]
pub struct DriftSuite {
    pub phase_probe: [DriftGenerator; 2],
    pub phase_lo: [DriftGenerator; 2],
    pub phase_pump: [DriftGenerator; 2],
    pub pol_probe: PolarizationDrift,
    pub pol_lo: PolarizationDrift,
    pub power_probe: DriftGenerator,
    pub power_lo: DriftGenerator,
    pub power_pump: DriftGenerator,
    pub temperature: DriftGenerator,
}

impl DriftSuite {
    pub fn new(cfg: &DriftConfig, seed: u64) -> Self {
        let rw = DriftKind::RandomWalk { rate: cfg.phase_random_walk };
        let sin = |amplitude: f64, period: f64, phase: f64| DriftKind::Sinusoid { amplitude, period, phase };
        Self {
            phase_probe: [
                DriftGenerator::new(rw, seed, 1),
                DriftGenerator::new(DriftKind::Ramp { rate: cfg.probe_phase_ramp }, seed, 2),
            ],
            phase_lo: [
                DriftGenerator::new(rw, seed, 3),
                DriftGenerator::new(DriftKind::Ramp { rate: cfg.lo_phase_ramp }, seed, 4),
            ],
            phase_pump: [
                DriftGenerator::new(rw, seed, 5),
                DriftGenerator::new(DriftKind::Ramp { rate: cfg.pump_phase_ramp }, seed, 6),
            ],
            pol_probe: PolarizationDrift::new(cfg.pol_random_walk, POL_RAMP_AXIS, cfg.probe_pol_ramp, seed, 7),
            pol_lo: PolarizationDrift::new(cfg.pol_random_walk, POL_RAMP_AXIS, cfg.lo_pol_ramp, seed, 8),
            power_probe: DriftGenerator::new(sin(cfg.power_amplitude, cfg.power_period, 0.0), seed, 9),
            power_lo: DriftGenerator::new(sin(cfg.power_amplitude, cfg.power_period, 2.1), seed, 10),
            power_pump: DriftGenerator::new(sin(cfg.power_amplitude, cfg.power_period, 4.2), seed, 11),
            temperature: DriftGenerator::new(
                sin(cfg.temperature_amplitude, cfg.temperature_period, 0.0),
                seed,
                12,
            ),
        }
    }

    pub fn step(&mut self, dt: f64) {
        for g in self
            .phase_probe
            .iter_mut()
            .chain(self.phase_lo.iter_mut())
            .chain(self.phase_pump.iter_mut())
        {
            g.step(dt);
        }
        self.pol_probe.step(dt);
        self.pol_lo.step(dt);
        self.power_probe.step(dt);
        self.power_lo.step(dt);
        self.power_pump.step(dt);
        self.temperature.step(dt);
    }

    pub fn probe_phase(&self) -> f64 {
        self.phase_probe[0].value() + self.phase_probe[1].value()
    }

    pub fn lo_phase(&self) -> f64 {
        self.phase_lo[0].value() + self.phase_lo[1].value()
    }

    pub fn pump_phase(&self) -> f64 {
        self.phase_pump[0].value() + self.phase_pump[1].value()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_integrates() {
        let mut g = DriftGenerator::new(DriftKind::Ramp { rate: 0.1 }, 1, 0);
        for _ in 0..1000 {
            g.step(0.01);
        }
        assert!((g.value() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_rates_produce_zero_output() {
        let mut s = DriftSuite::new(&DriftConfig::none(), 42);
        for _ in 0..100 {
            s.step(0.5);
        }
        assert_eq!(s.probe_phase(), 0.0);
        assert_eq!(s.temperature.value(), 0.0);
        assert_eq!(s.pol_lo.rotation(), &SphereRotation::identity());
    }

    #[test]
    fn random_walk_replays() {
        let run = |seed| {
            let mut g = DriftGenerator::new(DriftKind::RandomWalk { rate: 0.05 }, seed, 3);
            (0..500).map(|_| g.step(0.01)).collect::<Vec<f64>>()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }
}
