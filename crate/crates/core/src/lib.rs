//! Simulation and control core for an automated fiber-optic squeezed-light
//! source: optical plant, lock-in signal chain, feedback loops, the
//! alignment/measurement scheduler and squeezing analysis.

pub mod analysis;
pub mod dsp;
pub mod loops;
pub mod plant;
pub mod polarization;
pub mod sequencer;
