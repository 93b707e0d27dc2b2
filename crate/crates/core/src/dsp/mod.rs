//! Second-order IIR filters, the square-law lock-in chain and the
//! track-and-hold integrator.

mod biquad;
mod lockin;

pub use biquad::{
    allpass_for_phase, design_biquad, filter_step, Biquad, Coefficients, FilterKind, FilterSpec,
};
pub use lockin::{
    calibrate_chain, synthetic_am, LockInChain, LockInConfig, LockInOutput, ReadWindow, TapStage,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DspError {
    #[error("filter frequency {freq_hz} Hz is not below Nyquist for {sample_rate} S/s")]
    AboveNyquist { freq_hz: f64, sample_rate: f64 },
    #[error("invalid sample rate {0}")]
    InvalidSampleRate(f64),
    #[error("invalid quality factor {0}")]
    InvalidQ(f64),
    #[error("invalid downsample factor {0}")]
    Downsample(usize),
    #[error("sample rate {sample_rate} is not an integer multiple of the downsample factor {downsample}")]
    UnalignedRate { sample_rate: f64, downsample: usize },
    #[error("chain runs at {chain} S/s but the plant delivers {plant} S/s")]
    RateMismatch { chain: f64, plant: f64 },
}

/// Integrator with track-and-hold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Integrator {
    pub gain: f64,
    pub state: f64,
    pub held: bool,
}

impl Integrator {
    pub fn new(gain: f64, state: f64) -> Self {
        Self { gain, state, held: false }
    }

    pub fn hold(&mut self) {
        self.held = true;
    }

    pub fn release(&mut self) {
        self.held = false;
    }
}

/// Advances the integrator by `dt` seconds of error `err`.
pub fn integrator_step(i: &mut Integrator, err: f64, dt: f64) -> f64 {
    if !i.held {
        i.state += i.gain * err * dt;
    }
    i.state
}
