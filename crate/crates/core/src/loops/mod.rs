//! Feedback controllers: power stabilization, beat-note phase locks,
//! polarization optimization and the coupling-ratio temperature lock.

mod coupling;
mod log;
mod phase;
mod pol;
mod power;

pub use coupling::{coupling_lock_step, CouplingLoop, CouplingLoopCfg, CouplingMode, CouplingStep};
pub use log::{flags, LoopLog, LoopRecord};
pub use phase::{demodulate, phase_loop_step, PhaseLoop, PhaseLoopCfg, PhaseStep, RelockInterval};
pub use pol::{
    pol_optimize, random_walk_optimize, ActuatorEvent, BetaSample, PolError, PolLoopCfg, PolOptimizer,
    PolOutcome, PolTarget, RandomWalkCfg, SubloopRecord,
};
pub use power::{
    power_loop_step, PowerCommand, PowerLoop, PowerLoopCfg, PowerMonitor, PowerMonitorCfg, PowerTargets,
};
