use crate::plant::DcSample;

use super::log::flags;

/// How the homodyne coupler temperature is managed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CouplingMode {
    /// Integrate the homodyne DC level onto the Peltier command.
    DcFeedback,
    /// Hold the Peltier at a fixed temperature; ambient drift passes.
    ThermistorHold,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CouplingLoopCfg {
    pub mode: CouplingMode,
    /// DC level the loop regulates to, V.
    pub setpoint: f64,
    /// °C per volt-second. The default gives about 0.1 s⁻¹ closed-loop rate
    /// with 16 mW of LO.
    pub loop_gain: f64,
    /// Length of the DC averaging window, s.
    pub window_s: f64,
    /// Maximum Peltier slew, °C/s.
    pub max_slew: f64,
    /// DC level used in place of a saturated reading, V.
    pub saturation: f64,
}

impl Default for CouplingLoopCfg {
    fn default() -> Self {
        Self {
            mode: CouplingMode::DcFeedback,
            setpoint: 0.0,
            loop_gain: 7.2e-3,
            window_s: 0.01,
            max_slew: 0.1,
            saturation: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CouplingStep {
    pub command: f64,
    /// Windowed mean DC, V.
    pub error: f64,
    pub flags: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CouplingLoop {
    pub cfg: CouplingLoopCfg,
    /// Peltier temperature command, °C.
    pub command: f64,
    pub held: bool,
}

impl CouplingLoop {
    pub fn new(cfg: CouplingLoopCfg, command: f64) -> Self {
        Self { cfg, command, held: false }
    }
}

/// Integrates the mean of `dc` toward the setpoint. A clipped reading
/// carries no magnitude, so only its sign drives the integrator.
pub fn coupling_lock_step(lp: &mut CouplingLoop, dc: &[DcSample], dt: f64) -> CouplingStep {
    if dc.is_empty() {
        return CouplingStep { command: lp.command, error: 0.0, flags: flags::NO_CARRIER };
    }
    let saturated = dc.iter().any(|s| s.saturated);
    let mean = dc.iter().map(|s| s.volts).sum::<f64>() / dc.len() as f64;
    let err = mean - lp.cfg.setpoint;
    let mut fl = if saturated { flags::SATURATED } else { 0 };
    if lp.held || lp.cfg.mode == CouplingMode::ThermistorHold {
        return CouplingStep { command: lp.command, error: err, flags: fl | flags::HELD };
    }
    let drive = if saturated { lp.cfg.saturation * err.signum() } else { err };
    let limit = lp.cfg.max_slew * dt;
    let step = (-lp.cfg.loop_gain * drive * dt).clamp(-limit, limit);
    if step.abs() >= limit {
        fl |= flags::SATURATED;
    }
    lp.command += step;
    CouplingStep { command: lp.command, error: err, flags: fl }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dc(v: f64, saturated: bool) -> DcSample {
        DcSample { volts: v, saturated }
    }

    #[test]
    fn balanced_ratio_keeps_command() {
        let mut lp = CouplingLoop::new(CouplingLoopCfg::default(), 25.0);
        let s = coupling_lock_step(&mut lp, &[dc(0.0, false); 4], 1.0);
        assert_eq!(s.command, 25.0);
    }

    #[test]
    fn saturated_reading_uses_sign_and_slew_limit() {
        let mut lp = CouplingLoop::new(CouplingLoopCfg::default(), 25.0);
        let s = coupling_lock_step(&mut lp, &[dc(1.0, true)], 1.0);
        assert!((s.command - (25.0 - 7.2e-3)).abs() < 1e-12);
        assert!(s.flags & flags::SATURATED != 0);
        let mut fast = CouplingLoop::new(CouplingLoopCfg { loop_gain: 10.0, ..Default::default() }, 25.0);
        let s = coupling_lock_step(&mut fast, &[dc(0.5, false)], 2.0);
        assert!((s.command - 24.8).abs() < 1e-12);
    }

    #[test]
    fn thermistor_hold_ignores_dc() {
        let cfg = CouplingLoopCfg { mode: CouplingMode::ThermistorHold, ..Default::default() };
        let mut lp = CouplingLoop::new(cfg, 25.0);
        assert_eq!(coupling_lock_step(&mut lp, &[dc(0.3, false)], 1.0).command, 25.0);
    }
}
