use std::f64::consts::PI;

use crate::polarization::{mode_overlap, JonesState};

use super::PlantError;

/// Wraps an angle into `(-π, π]`.
pub fn wrap_phase(phi: f64) -> f64 {
    let w = phi.rem_euclid(2.0 * PI);
    if w > PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// Slowly varying envelope of one optical field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldEnvelope {
    /// Field amplitude, √W.
    pub amplitude: f64,
    /// Offset from the degenerate frequency, Hz.
    pub freq_offset_hz: f64,
    phase: f64,
    pub pol: JonesState,
    pub shutter_open: bool,
}

impl FieldEnvelope {
    pub fn new(power_w: f64, freq_offset_hz: f64, pol: JonesState) -> Self {
        Self {
            amplitude: power_w.max(0.0).sqrt(),
            freq_offset_hz,
            phase: 0.0,
            pol,
            shutter_open: false,
        }
    }

    pub fn power(&self) -> f64 {
        self.amplitude * self.amplitude
    }

    /// Power reaching downstream optics (zero with the shutter closed).
    pub fn delivered_power(&self) -> f64 {
        if self.shutter_open {
            self.power()
        } else {
            0.0
        }
    }

    pub fn set_power(&mut self, power_w: f64) {
        self.amplitude = power_w.max(0.0).sqrt();
    }

    pub fn phase(&self) -> f64 {
        wrap_phase(self.phase)
    }

    pub fn set_phase(&mut self, phi: f64) {
        self.phase = phi;
    }
}

/// Degenerate optical parametric amplifier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpaModel {
    /// `r = κ·√P_pump`, 1/√W.
    pub squeeze_per_sqrt_watt: f64,
    pub crystal_axis: JonesState,
    pub insertion_loss: f64,
    pub thermal_settle_tau: f64,
    /// Pump-phase offset reached after the thermal transient, rad.
    pub thermal_phase_offset: f64,
}

impl OpaModel {
    pub fn squeeze_param(&self, pump_power_w: f64) -> f64 {
        self.squeeze_per_sqrt_watt * pump_power_w.max(0.0).sqrt()
    }

    /// Thermal pump-phase offset `s` seconds after the pump shutter opened.
    pub fn thermal_phase(&self, since_open_s: f64) -> f64 {
        if since_open_s <= 0.0 || self.thermal_settle_tau <= 0.0 {
            return if since_open_s > 0.0 { self.thermal_phase_offset } else { 0.0 };
        }
        self.thermal_phase_offset * (1.0 - (-since_open_s / self.thermal_settle_tau).exp())
    }
}

/// Fiber coupler whose ratio depends on temperature and input polarization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitterModel {
    pub nominal_ratio: f64,
    /// Ratio change per °C.
    pub temp_coeff: f64,
    /// Ratio shift for polarization orthogonal to `reference_pol`.
    pub pol_coeff: f64,
    pub reference_temperature: f64,
    pub temperature: f64,
    pub reference_pol: JonesState,
}

impl Default for SplitterModel {
    fn default() -> Self {
        Self {
            nominal_ratio: 0.5,
            temp_coeff: 0.0095,
            pol_coeff: 0.029,
            reference_temperature: 25.0,
            temperature: 25.0,
            reference_pol: JonesState::vertical(),
        }
    }
}

/// Fraction of the input sent to the `+` port.
pub fn splitter_ratio(m: &SplitterModel, j_in: &JonesState) -> f64 {
    let g = 1.0 - mode_overlap(j_in, &m.reference_pol);
    let r = m.nominal_ratio + m.temp_coeff * (m.temperature - m.reference_temperature) + m.pol_coeff * g;
    r.clamp(0.0, 1.0)
}

/// Piezo fiber stretcher.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StretcherModel {
    pub voltage: f64,
    pub rad_per_volt: f64,
    pub max_voltage: f64,
}

impl Default for StretcherModel {
    fn default() -> Self {
        Self { voltage: 35.0, rad_per_volt: 6.0 * PI / 70.0, max_voltage: 70.0 }
    }
}

impl StretcherModel {
    pub fn range_wavelengths(&self) -> f64 {
        self.rad_per_volt * self.max_voltage / (2.0 * PI)
    }

    pub fn phase(&self) -> f64 {
        self.voltage * self.rad_per_volt
    }
}

/// Optical phase produced by `voltage`; voltages outside `[0, max]` exhaust
/// the range.
pub fn stretcher_apply(m: &StretcherModel, voltage: f64) -> Result<f64, PlantError> {
    if !(0.0..=m.max_voltage).contains(&voltage) {
        return Err(PlantError::StretcherRange { voltage, max: m.max_voltage });
    }
    Ok(voltage * m.rad_per_volt)
}

/// Photodetector with transimpedance stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorModel {
    pub responsivity: f64,
    pub quantum_efficiency: f64,
    pub transimpedance: f64,
    pub post_gain: f64,
    pub saturation: f64,
    /// Additive white noise per sample, V rms.
    pub noise_rms: f64,
}

impl DetectorModel {
    /// Balanced homodyne detector.
    pub fn homodyne() -> Self {
        Self {
            responsivity: 1.0,
            quantum_efficiency: 0.96,
            transimpedance: 3030.0,
            post_gain: 15.0,
            saturation: 1.0,
            noise_rms: 0.02,
        }
    }

    /// OPA monitor photodiode followed by the ×10 amplifier.
    pub fn opa_monitor() -> Self {
        Self {
            responsivity: 1.0,
            quantum_efficiency: 1.0,
            transimpedance: 1e5,
            post_gain: 10.0,
            saturation: 10.0,
            noise_rms: 2e-5,
        }
    }

    /// Volts per watt.
    pub fn gain(&self) -> f64 {
        self.responsivity * self.transimpedance * self.post_gain
    }

    /// Clips to the output range; returns the value and whether it clipped.
    pub fn clip(&self, v: f64) -> (f64, bool) {
        if v > self.saturation {
            (self.saturation, true)
        } else if v < -self.saturation {
            (-self.saturation, true)
        } else {
            (v, false)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polarization::JonesState;

    #[test]
    fn stretcher_span_is_three_wavelengths() {
        let s = StretcherModel::default();
        assert_eq!(stretcher_apply(&s, 0.0).unwrap(), 0.0);
        assert!((stretcher_apply(&s, 70.0).unwrap() - 6.0 * PI).abs() < 1e-12);
        assert!((s.range_wavelengths() - 3.0).abs() < 0.03);
        assert!(matches!(stretcher_apply(&s, 71.0), Err(PlantError::StretcherRange { .. })));
        assert!(stretcher_apply(&s, -0.1).is_err());
    }

    #[test]
    fn splitter_examples() {
        let mut m = SplitterModel::default();
        let v = JonesState::vertical();
        assert!((splitter_ratio(&m, &v) - 0.5).abs() < 1e-15);
        m.temperature += 1.0;
        assert!((splitter_ratio(&m, &v) - 0.5095).abs() < 1e-12);
        m.temperature -= 1.0;
        assert!((splitter_ratio(&m, &JonesState::horizontal()) - 0.529).abs() < 1e-12);
        m.temperature = 1000.0;
        assert_eq!(splitter_ratio(&m, &v), 1.0);
    }

    #[test]
    fn phase_wraps_to_half_open_interval() {
        assert!((wrap_phase(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_phase(-PI) - PI).abs() < 1e-12);
        assert!((wrap_phase(0.5) - 0.5).abs() < 1e-15);
        let mut f = FieldEnvelope::new(1e-3, 0.0, JonesState::vertical());
        f.set_phase(7.0);
        assert!((f.phase() - (7.0 - 2.0 * PI)).abs() < 1e-12);
        assert_eq!(f.delivered_power(), 0.0);
    }
}
