use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::biquad::{allpass_for_phase, Biquad, FilterSpec};
use super::DspError;

/// Parameters of the square-law lock-in chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LockInConfig {
    pub sample_rate: f64,
    pub carrier_hz: f64,
    pub carrier_q: f64,
    pub post_square_lpf_hz: f64,
    pub downsample: usize,
    pub dc_block_hz: f64,
    pub demod_hz: f64,
    pub demod_hpf_hz: f64,
    /// Phase of the reference all-pass at `demod_hz`, rad.
    pub demod_allpass_phase: f64,
    pub allpass_q: f64,
    pub second_harmonic_br_hz: f64,
    pub second_harmonic_br_q: f64,
    pub output_lpf_hz: f64,
    /// Scale applied to the demodulated output (set by calibration).
    pub gain: f64,
}

impl LockInConfig {
    pub fn homodyne(sample_rate: f64) -> Self {
        Self::with_carrier(sample_rate, 200e3)
    }

    pub fn opa(sample_rate: f64) -> Self {
        Self::with_carrier(sample_rate, 400e3)
    }

    pub fn with_carrier(sample_rate: f64, carrier_hz: f64) -> Self {
        Self {
            sample_rate,
            carrier_hz,
            carrier_q: 10.0,
            post_square_lpf_hz: 30e3,
            downsample: 16,
            dc_block_hz: 10.0,
            demod_hz: 300.0,
            demod_hpf_hz: 10.0,
            demod_allpass_phase: 0.0,
            allpass_q: FRAC_1_SQRT_2,
            second_harmonic_br_hz: 600.0,
            second_harmonic_br_q: 2.0,
            output_lpf_hz: 10.0,
            gain: 1.0,
        }
    }

    pub fn decimated_rate(&self) -> f64 {
        self.sample_rate / self.downsample as f64
    }
}

/// Stages that can be captured by the debug tap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TapStage {
    Bandpass,
    Squared,
    SquaredLowpass,
    DcBlocked,
    Reference,
    Mixed,
    Notched,
    Output,
}

impl TapStage {
    fn decimated(&self) -> bool {
        !matches!(self, TapStage::Bandpass | TapStage::Squared | TapStage::SquaredLowpass)
    }
}

/// One decimated output sample.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LockInOutput {
    /// Full-rate sample index this output belongs to.
    pub index: u64,
    /// Modulation depth scaled by the carrier amplitude (volts).
    pub beta: f64,
    /// Relative modulation depth.
    pub beta_rel: f64,
    /// Estimated carrier amplitude (volts).
    pub carrier_amplitude: f64,
    /// Unnormalized demodulator output.
    pub raw: f64,
}

/// Streaming state of one lock-in chain.
#[derive(Debug, Clone)]
pub struct LockInChain {
    cfg: LockInConfig,
    bpf: Biquad,
    lpf: Biquad,
    dc_block: Biquad,
    ref_hpf: Biquad,
    ref_allpass: Option<Biquad>,
    ref_sign: f64,
    br: Biquad,
    out_lpf: Biquad,
    dc_lpf: Biquad,
    last: LockInOutput,
    tap: Option<(TapStage, usize, Vec<(u64, f64)>)>,
}

impl LockInChain {
    pub fn new(cfg: LockInConfig) -> Result<Self, DspError> {
        let fs = cfg.sample_rate;
        if cfg.downsample == 0 {
            return Err(DspError::Downsample(cfg.downsample));
        }
        let fd = cfg.decimated_rate();
        if (fd - fd.round()).abs() > 1e-9 {
            return Err(DspError::UnalignedRate { sample_rate: fs, downsample: cfg.downsample });
        }
        let bpf = Biquad::design(&FilterSpec::band_pass(cfg.carrier_hz, fs, cfg.carrier_q))?;
        let lpf = Biquad::design(&FilterSpec::low_pass(cfg.post_square_lpf_hz, fs))?;
        let dc_block = Biquad::design(&FilterSpec::high_pass(cfg.dc_block_hz, fd))?;
        let ref_hpf = Biquad::design(&FilterSpec::high_pass(cfg.demod_hpf_hz, fd))?;
        if cfg.demod_hz >= fd / 2.0 {
            return Err(DspError::AboveNyquist { freq_hz: cfg.demod_hz, sample_rate: fd });
        }
        // keep the all-pass lag within (-π, 0]; the remaining half turn is a sign flip
        let mut phase = cfg.demod_allpass_phase.rem_euclid(2.0 * PI);
        if phase > 0.0 {
            phase -= 2.0 * PI;
        }
        let mut ref_sign = 1.0;
        if phase < -PI {
            phase += PI;
            ref_sign = -1.0;
        }
        let ref_allpass = if phase.abs() < 1e-12 {
            None
        } else {
            Some(Biquad::new(allpass_for_phase(phase, cfg.demod_hz, fd, cfg.allpass_q)?))
        };
        let br = Biquad::design(&FilterSpec::band_reject(
            cfg.second_harmonic_br_hz,
            fd,
            cfg.second_harmonic_br_q,
        ))?;
        let out_lpf = Biquad::design(&FilterSpec::low_pass(cfg.output_lpf_hz, fd))?;
        let dc_lpf = Biquad::design(&FilterSpec::low_pass(cfg.output_lpf_hz, fd))?;
        Ok(Self {
            cfg,
            bpf,
            lpf,
            dc_block,
            ref_hpf,
            ref_allpass,
            ref_sign,
            br,
            out_lpf,
            dc_lpf,
            last: LockInOutput::default(),
            tap: None,
        })
    }

    pub fn config(&self) -> &LockInConfig {
        &self.cfg
    }

    pub fn sample_rate(&self) -> f64 {
        self.cfg.sample_rate
    }

    /// Clears all filter state.
    pub fn reset(&mut self) {
        for b in [
            &mut self.bpf,
            &mut self.lpf,
            &mut self.dc_block,
            &mut self.ref_hpf,
            &mut self.br,
            &mut self.out_lpf,
            &mut self.dc_lpf,
        ] {
            b.reset();
        }
        if let Some(a) = self.ref_allpass.as_mut() {
            a.reset();
        }
        self.last = LockInOutput::default();
    }

    pub fn last(&self) -> LockInOutput {
        self.last
    }

    /// Starts capturing up to `capacity` samples of `stage`.
    pub fn enable_tap(&mut self, stage: TapStage, capacity: usize) {
        self.tap = Some((stage, capacity, Vec::new()));
    }

    pub fn take_tap(&mut self) -> Option<(TapStage, Vec<(u64, f64)>)> {
        self.tap.take().map(|(s, _, v)| (s, v))
    }

    #[inline]
    fn record(&mut self, stage: TapStage, index: u64, v: f64) {
        if let Some((s, cap, buf)) = self.tap.as_mut() {
            if *s == stage && buf.len() < *cap {
                buf.push((index, v));
            }
        }
    }

    /// Demodulation reference `sin(ωm t)` on the shared sample clock.
    #[inline]
    pub fn reference(demod_hz: f64, sample_rate: f64, index: u64) -> f64 {
        (2.0 * PI * ((index as f64) * demod_hz / sample_rate).fract()).sin()
    }

    /// Processes samples whose first element has absolute index
    /// `first_index`; `on_output` receives every decimated output.
    pub fn process<F: FnMut(LockInOutput)>(&mut self, samples: &[f64], first_index: u64, mut on_output: F) {
        let d = self.cfg.downsample as u64;
        let tapping = self.tap.is_some();
        let tap_full = tapping && self.tap.as_ref().map(|t| !t.0.decimated()).unwrap_or(false);
        for (i, &x) in samples.iter().enumerate() {
            let n = first_index + i as u64;
            let bp = self.bpf.step(x);
            let sq = bp * bp;
            let s = self.lpf.step(sq);
            if tap_full {
                self.record(TapStage::Bandpass, n, bp);
                self.record(TapStage::Squared, n, sq);
                self.record(TapStage::SquaredLowpass, n, s);
            }
            if n % d != 0 {
                continue;
            }
            let y = self.dc_block.step(s);
            let mut r = self.ref_hpf.step(Self::reference(self.cfg.demod_hz, self.cfg.sample_rate, n));
            if let Some(a) = self.ref_allpass.as_mut() {
                r = a.step(r);
            }
            r *= self.ref_sign;
            let m = y * r;
            let notched = self.br.step(m);
            let raw = self.out_lpf.step(notched);
            let pdc = self.dc_lpf.step(s).max(1e-300);
            // s ≈ V0²/2·(1 + 2β sin ωm t): the demodulated term is V0²β/2
            let beta_rel = self.cfg.gain * raw / pdc;
            let amp = (2.0 * pdc).sqrt();
            let out = LockInOutput { index: n, beta: beta_rel * amp, beta_rel, carrier_amplitude: amp, raw };
            if tapping {
                self.record(TapStage::DcBlocked, n, y);
                self.record(TapStage::Reference, n, r);
                self.record(TapStage::Mixed, n, m);
                self.record(TapStage::Notched, n, notched);
                self.record(TapStage::Output, n, out.beta);
            }
            self.last = out;
            on_output(out);
        }
    }
}

/// Synthetic amplitude-modulated carrier `(1 + β sin ωm t)·cos(ωc t + φ)`.
pub fn synthetic_am(cfg: &LockInConfig, beta: f64, phi: f64, first_index: u64, out: &mut [f64]) {
    for (i, v) in out.iter_mut().enumerate() {
        let n = first_index + i as u64;
        let m = LockInChain::reference(cfg.demod_hz, cfg.sample_rate, n);
        let carrier_phase = 2.0 * PI * ((n as f64) * cfg.carrier_hz / cfg.sample_rate).fract();
        *v = (1.0 + beta * m) * (carrier_phase + phi).cos();
    }
}

/// Settle and averaging windows used when reading a chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReadWindow {
    pub settle_s: f64,
    pub average_s: f64,
}

impl Default for ReadWindow {
    fn default() -> Self {
        Self { settle_s: 0.5, average_s: 0.1 }
    }
}

/// Runs a fresh chain on a synthetic signal and returns the mean output
/// over the averaging window.
fn run_synthetic(cfg: &LockInConfig, beta: f64, window: ReadWindow) -> Result<f64, DspError> {
    let mut chain = LockInChain::new(*cfg)?;
    let total = ((window.settle_s + window.average_s) * cfg.sample_rate).round() as usize;
    let settle = (window.settle_s * cfg.sample_rate).round() as u64;
    let block = 1 << 14;
    let mut buf = vec![0.0; block];
    let (mut acc, mut count) = (0.0, 0usize);
    let mut done = 0usize;
    while done < total {
        let n = block.min(total - done);
        synthetic_am(cfg, beta, 0.3, done as u64, &mut buf[..n]);
        chain.process(&buf[..n], done as u64, |o| {
            if o.index >= settle {
                acc += o.beta_rel;
                count += 1;
            }
        });
        done += n;
    }
    Ok(acc / count.max(1) as f64)
}

/// Sets the reference all-pass phase and output gain so that a known
/// modulation depth is reported in phase and at unit scale.
///
/// Two runs with reference phases a quarter turn apart give the in-phase
/// and quadrature responses; the phase that maximizes the in-phase
/// response follows from their ratio.
pub fn calibrate_chain(cfg: &LockInConfig, window: ReadWindow) -> Result<LockInConfig, DspError> {
    let beta = 0.02;
    let mut c = *cfg;
    c.gain = 1.0;
    c.demod_allpass_phase = 0.0;
    let i0 = run_synthetic(&c, beta, window)?;
    c.demod_allpass_phase = -PI / 2.0;
    let q0 = run_synthetic(&c, beta, window)?;
    // output ∝ cos(ψ - ψ0) with ψ the reference lag
    let psi0 = -q0.atan2(i0);
    let k = (i0 * i0 + q0 * q0).sqrt() / beta;
    c.demod_allpass_phase = psi0;
    c.gain = 1.0 / k;
    Ok(c)
}
