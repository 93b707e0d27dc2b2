use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::plant::{stream_rng, PlantState};

/// Target powers of each stage, W.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerTargets {
    pub probe_opa_align: f64,
    pub probe_hd_align: f64,
    pub probe_measure: f64,
    pub lo_align: f64,
    pub lo_measure: f64,
    pub pump: f64,
}

impl Default for PowerTargets {
    fn default() -> Self {
        Self {
            probe_opa_align: 1e-6,
            probe_hd_align: 100e-6,
            probe_measure: 100e-9,
            lo_align: 100e-6,
            lo_measure: 16e-3,
            pump: crate::plant::PUMP_OPERATING_W,
        }
    }
}

impl PowerTargets {
    /// The five probe/LO settings.
    pub fn settings(&self) -> [(usize, f64); 5] {
        [
            (0, self.probe_opa_align),
            (0, self.probe_hd_align),
            (0, self.probe_measure),
            (1, self.lo_align),
            (1, self.lo_measure),
        ]
    }
}

/// Two-range photodiode pair behind the monitor tap: the pick-off is split
/// 90:10 between a high-gain and a low-gain detector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerMonitorCfg {
    /// Fraction of the pick-off sent to the low-gain detector.
    pub split_ratio: f64,
    pub responsivity: f64,
    pub high_gain: f64,
    pub low_gain: f64,
    pub saturation: f64,
    pub noise_rms: f64,
}

impl PowerMonitorCfg {
    pub fn signal_path() -> Self {
        Self { split_ratio: 0.1, responsivity: 1.0, high_gain: 1e6, low_gain: 1e4, saturation: 10.0, noise_rms: 1e-6 }
    }

    pub fn pump_path() -> Self {
        Self { split_ratio: 0.1, responsivity: 1.0, high_gain: 1e3, low_gain: 10.0, saturation: 10.0, noise_rms: 1e-6 }
    }
}

/// Reads the delivered power of one attenuator path from its monitor.
#[derive(Debug, Clone)]
pub struct PowerMonitor {
    pub cfg: PowerMonitorCfg,
    rng: ChaCha8Rng,
}

impl PowerMonitor {
    pub fn new(cfg: PowerMonitorCfg, seed: u64, stream: u64) -> Self {
        Self { cfg, rng: stream_rng(seed, stream) }
    }

    /// Estimated delivered power of path `idx`, W.
    pub fn read(&mut self, plant: &PlantState, idx: usize) -> f64 {
        let pick = plant.monitor_power(idx);
        let c = &self.cfg;
        let n1: f64 = self.rng.sample(StandardNormal);
        let n2: f64 = self.rng.sample(StandardNormal);
        let hi = pick * (1.0 - c.split_ratio) * c.responsivity * c.high_gain + c.noise_rms * n1;
        let lo = pick * c.split_ratio * c.responsivity * c.low_gain + c.noise_rms * n2;
        let est_pick = if hi < 0.9 * c.saturation {
            hi / ((1.0 - c.split_ratio) * c.responsivity * c.high_gain)
        } else {
            lo.min(c.saturation) / (c.split_ratio * c.responsivity * c.low_gain)
        };
        let tap = plant.cfg.monitor_tap;
        est_pick.max(0.0) * (1.0 - tap) / tap
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerLoopCfg {
    pub target: f64,
    /// Integral gain on the logarithmic power error, 1/s.
    pub loop_gain: f64,
    pub min_transmission: f64,
}

impl PowerLoopCfg {
    pub fn new(target: f64) -> Self {
        Self { target, loop_gain: 50.0, min_transmission: 1e-9 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerCommand {
    pub transmission: f64,
    pub saturated: bool,
}

/// Integral power stabilizer driving a variable attenuator.
///
/// The integrator runs on `ln T` so that large target changes converge at
/// the same rate as small corrections; a tick longer than `1/loop_gain`
/// applies the full correction at once.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerLoop {
    pub cfg: PowerLoopCfg,
    pub transmission: f64,
    pub saturated: bool,
}

impl PowerLoop {
    pub fn new(cfg: PowerLoopCfg, transmission: f64) -> Self {
        Self { cfg, transmission: transmission.clamp(cfg.min_transmission, 1.0), saturated: false }
    }

    pub fn set_target(&mut self, target: f64) {
        self.cfg.target = target;
    }
}

pub fn power_loop_step(lp: &mut PowerLoop, measured: f64, dt: f64) -> PowerCommand {
    let ratio = if measured > 0.0 { lp.cfg.target / measured } else { 10.0 };
    let err = ratio.ln().clamp(-10f64.ln(), 10f64.ln());
    let k = (lp.cfg.loop_gain * dt).min(1.0);
    let t = (lp.transmission.ln() + k * err).exp();
    lp.transmission = t.clamp(lp.cfg.min_transmission, 1.0);
    lp.saturated = lp.transmission >= 1.0 && measured < lp.cfg.target * (1.0 - 1e-3);
    PowerCommand { transmission: lp.transmission, saturated: lp.saturated }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn on_target_leaves_command_unchanged() {
        let mut lp = PowerLoop::new(PowerLoopCfg::new(1e-6), 0.3);
        let c = power_loop_step(&mut lp, 1e-6, 1e-3);
        assert_eq!(c.transmission, 0.3);
        assert!(!c.saturated);
    }

    #[test]
    fn unreachable_target_flags_saturation() {
        let mut lp = PowerLoop::new(PowerLoopCfg::new(1.0), 0.5);
        let mut c = power_loop_step(&mut lp, 0.1, 1e-3);
        for _ in 0..1000 {
            c = power_loop_step(&mut lp, 0.1, 1e-3);
        }
        assert_eq!(c.transmission, 1.0);
        assert!(c.saturated);
    }

    #[test]
    fn converges_against_constant_disturbance() {
        let source = 1e-3;
        let mut lp = PowerLoop::new(PowerLoopCfg::new(1e-6), 0.5);
        let mut measured = source * lp.transmission;
        for _ in 0..2000 {
            power_loop_step(&mut lp, measured, 1e-3);
            measured = source * 1.07 * lp.transmission;
        }
        assert!((measured - 1e-6).abs() / 1e-6 < 1e-3);
    }
}
