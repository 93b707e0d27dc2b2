use std::f64::consts::{FRAC_1_SQRT_2, PI};

use num_complex::Complex64;

use super::DspError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterKind {
    LowPass,
    HighPass,
    BandPass,
    BandReject,
    AllPass,
}

/// Second-order section specification.
///
/// `q` is the resonator quality factor for band-pass/band-reject and the
/// all-pass; low-pass and high-pass always use the Butterworth value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterSpec {
    pub kind: FilterKind,
    pub freq_hz: f64,
    pub sample_rate: f64,
    pub q: f64,
}

impl FilterSpec {
    pub fn low_pass(freq_hz: f64, sample_rate: f64) -> Self {
        Self { kind: FilterKind::LowPass, freq_hz, sample_rate, q: FRAC_1_SQRT_2 }
    }

    pub fn high_pass(freq_hz: f64, sample_rate: f64) -> Self {
        Self { kind: FilterKind::HighPass, freq_hz, sample_rate, q: FRAC_1_SQRT_2 }
    }

    pub fn band_pass(freq_hz: f64, sample_rate: f64, q: f64) -> Self {
        Self { kind: FilterKind::BandPass, freq_hz, sample_rate, q }
    }

    pub fn band_reject(freq_hz: f64, sample_rate: f64, q: f64) -> Self {
        Self { kind: FilterKind::BandReject, freq_hz, sample_rate, q }
    }

    pub fn all_pass(freq_hz: f64, sample_rate: f64, q: f64) -> Self {
        Self { kind: FilterKind::AllPass, freq_hz, sample_rate, q }
    }

    pub fn order(&self) -> usize {
        2
    }
}

/// Normalized biquad coefficients (`a0 = 1`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficients {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Coefficients {
    /// Frequency response at `f` Hz.
    pub fn response(&self, f: f64, sample_rate: f64) -> Complex64 {
        let w = 2.0 * PI * f / sample_rate;
        let z1 = Complex64::from_polar(1.0, -w);
        let z2 = z1 * z1;
        let num = self.b[0] + self.b[1] * z1 + self.b[2] * z2;
        let den = 1.0 + self.a[0] * z1 + self.a[1] * z2;
        num / den
    }

    pub fn magnitude_db(&self, f: f64, sample_rate: f64) -> f64 {
        20.0 * self.response(f, sample_rate).norm().log10()
    }

    /// Radii of the two poles.
    pub fn pole_radii(&self) -> [f64; 2] {
        let (a1, a2) = (self.a[0], self.a[1]);
        let disc = a1 * a1 - 4.0 * a2;
        if disc >= 0.0 {
            let s = disc.sqrt();
            [((-a1 + s) / 2.0).abs(), ((-a1 - s) / 2.0).abs()]
        } else {
            // complex pair with |p|² = a2
            let r = a2.sqrt();
            [r, r]
        }
    }
}

/// Bilinear-transform design (RBJ forms with frequency prewarping).
pub fn design_biquad(spec: &FilterSpec) -> Result<Coefficients, DspError> {
    let fs = spec.sample_rate;
    if !(fs > 0.0) || !fs.is_finite() {
        return Err(DspError::InvalidSampleRate(fs));
    }
    if !(spec.freq_hz > 0.0) || spec.freq_hz >= fs / 2.0 {
        return Err(DspError::AboveNyquist { freq_hz: spec.freq_hz, sample_rate: fs });
    }
    if !(spec.q > 0.0) || !spec.q.is_finite() {
        return Err(DspError::InvalidQ(spec.q));
    }
    let w0 = 2.0 * PI * spec.freq_hz / fs;
    let (sn, cs) = w0.sin_cos();
    let alpha = sn / (2.0 * spec.q);
    let (b, a0, a1, a2) = match spec.kind {
        FilterKind::LowPass => {
            ([(1.0 - cs) / 2.0, 1.0 - cs, (1.0 - cs) / 2.0], 1.0 + alpha, -2.0 * cs, 1.0 - alpha)
        }
        FilterKind::HighPass => {
            ([(1.0 + cs) / 2.0, -(1.0 + cs), (1.0 + cs) / 2.0], 1.0 + alpha, -2.0 * cs, 1.0 - alpha)
        }
        // constant 0 dB peak gain
        FilterKind::BandPass => ([alpha, 0.0, -alpha], 1.0 + alpha, -2.0 * cs, 1.0 - alpha),
        FilterKind::BandReject => ([1.0, -2.0 * cs, 1.0], 1.0 + alpha, -2.0 * cs, 1.0 - alpha),
        FilterKind::AllPass => {
            ([1.0 - alpha, -2.0 * cs, 1.0 + alpha], 1.0 + alpha, -2.0 * cs, 1.0 - alpha)
        }
    };
    Ok(Coefficients {
        b: [b[0] / a0, b[1] / a0, b[2] / a0],
        a: [a1 / a0, a2 / a0],
    })
}

/// Direct-form I second-order section.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    c: Coefficients,
    x1: f64,
    x2: f64,
    y1: f64,
    y2: f64,
}

impl Biquad {
    pub fn new(c: Coefficients) -> Self {
        Self { c, x1: 0.0, x2: 0.0, y1: 0.0, y2: 0.0 }
    }

    pub fn design(spec: &FilterSpec) -> Result<Self, DspError> {
        Ok(Self::new(design_biquad(spec)?))
    }

    pub fn coefficients(&self) -> &Coefficients {
        &self.c
    }

    pub fn reset(&mut self) {
        self.x1 = 0.0;
        self.x2 = 0.0;
        self.y1 = 0.0;
        self.y2 = 0.0;
    }

    #[inline]
    pub fn step(&mut self, x: f64) -> f64 {
        let c = &self.c;
        let y = c.b[0] * x + c.b[1] * self.x1 + c.b[2] * self.x2 - c.a[0] * self.y1 - c.a[1] * self.y2;
        self.x2 = self.x1;
        self.x1 = x;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Advances `state` by one input sample.
pub fn filter_step(state: &mut Biquad, x: f64) -> f64 {
    state.step(x)
}

/// All-pass section whose phase at `at_hz` equals `phase` (taken modulo 2π
/// into `(-2π, 0]`). The centre frequency is found by bisection.
pub fn allpass_for_phase(
    phase: f64,
    at_hz: f64,
    sample_rate: f64,
    q: f64,
) -> Result<Coefficients, DspError> {
    let two_pi = 2.0 * PI;
    let mut target = phase % two_pi;
    if target > 0.0 {
        target -= two_pi;
    }
    // phase lag at `at_hz` as a continuous function of the centre frequency:
    // goes from ~-2π (f0 → 0) to ~0 (f0 → Nyquist)
    let lag = |f0: f64| -> Result<f64, DspError> {
        let c = design_biquad(&FilterSpec::all_pass(f0, sample_rate, q))?;
        let ph = c.response(at_hz, sample_rate).arg();
        // unwrap: below f0 the lag is in (-π, 0], above it in (-2π, -π]
        Ok(if at_hz > f0 && ph > 0.0 { ph - two_pi } else { ph })
    };
    let mut lo = at_hz * 1e-4;
    let mut hi = sample_rate / 2.0 * 0.999_999;
    let lag_lo = lag(lo)?;
    let lag_hi = lag(hi)?;
    if target <= lag_lo {
        return design_biquad(&FilterSpec::all_pass(lo, sample_rate, q));
    }
    if target >= lag_hi {
        return design_biquad(&FilterSpec::all_pass(hi, sample_rate, q));
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if lag(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo - 1.0 < 1e-13 {
            break;
        }
    }
    design_biquad(&FilterSpec::all_pass((lo * hi).sqrt(), sample_rate, q))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lowpass_corner_is_minus_3db() {
        let c = design_biquad(&FilterSpec::low_pass(10.0, 312_500.0)).unwrap();
        assert!((c.magnitude_db(10.0, 312_500.0) + 3.0103).abs() < 0.01);
    }

    #[test]
    fn nyquist_corner_rejected() {
        assert!(design_biquad(&FilterSpec::low_pass(200.0, 400.0)).is_err());
        assert!(design_biquad(&FilterSpec::high_pass(250.0, 400.0)).is_err());
    }

    #[test]
    fn zero_in_zero_out() {
        let mut b = Biquad::design(&FilterSpec::band_pass(200e3, 5e6, 10.0)).unwrap();
        for _ in 0..100 {
            assert_eq!(b.step(0.0), 0.0);
        }
    }

    #[test]
    fn allpass_hits_requested_phase() {
        let fs = 312_500.0;
        for &p in &[-0.01, -0.5, -2.0, -4.0, -6.0, 0.3] {
            let c = allpass_for_phase(p, 300.0, fs, FRAC_1_SQRT_2).unwrap();
            let got = c.response(300.0, fs).arg();
            let d = (got - p).rem_euclid(2.0 * PI);
            let d = d.min(2.0 * PI - d);
            assert!(d < 1e-6, "phase {p}: got {got}");
        }
    }
}
