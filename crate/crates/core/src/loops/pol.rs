use rand::Rng;
use thiserror::Error;

use crate::dsp::{integrator_step, DspError, Integrator, LockInChain, ReadWindow};
use crate::plant::{stream_rng, Detector, Modulation, PathId, PlantState};
use crate::polarization::{PiezoBank, PIEZO_MAX_COUNT};

/// Which interference the optimizer maximizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolTarget {
    /// Probe against the OPA crystal axis, read on the OPA monitor.
    Opa,
    /// LO against the probe, read on the homodyne detector.
    Homodyne,
}

impl PolTarget {
    pub fn detector(&self) -> Detector {
        match self {
            PolTarget::Opa => Detector::OpaMonitor,
            PolTarget::Homodyne => Detector::Homodyne,
        }
    }

    pub fn path(&self) -> PathId {
        match self {
            PolTarget::Opa => PathId::Probe,
            PolTarget::Homodyne => PathId::Lo,
        }
    }

    /// Curvature of the carrier amplitude against the piezo sphere angle
    /// near the optimum: the OPA monitor carrier follows the overlap, the
    /// homodyne carrier its square root.
    fn curvature(&self) -> f64 {
        match self {
            PolTarget::Opa => 0.5,
            PolTarget::Homodyne => 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolLoopCfg {
    pub modulation_amplitude_counts: f64,
    /// Minimum number of Piezo 1→2→3 sweeps.
    pub cycles: usize,
    /// Sweeps allowed before giving up.
    pub max_cycles: usize,
    /// Controller update period, s.
    pub block_s: f64,
    /// Settling after each modulation change and β averaging window.
    pub window: ReadWindow,
    /// Interval of the convergence check, s.
    pub check_s: f64,
    pub max_subloop_s: f64,
    /// Closed-loop bandwidth of each sub-loop at ideal geometry, Hz.
    pub bandwidth_hz: f64,
    pub threshold_factor: f64,
    /// Lower bound on the convergence threshold (normalized β).
    pub min_threshold: f64,
    /// +1 climbs toward maximum interference, −1 toward minimum.
    pub polarity: f64,
}

impl Default for PolLoopCfg {
    fn default() -> Self {
        Self {
            modulation_amplitude_counts: 32.0,
            cycles: 3,
            max_cycles: 5,
            block_s: 1e-3,
            window: ReadWindow::default(),
            check_s: 0.05,
            max_subloop_s: 4.0,
            bandwidth_hz: 0.5,
            threshold_factor: 3.0,
            min_threshold: 1e-6,
            polarity: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubloopRecord {
    pub cycle: usize,
    pub piezo: usize,
    pub t_start: f64,
    pub t_end: f64,
    /// Normalized β over the first and last check windows.
    pub beta_start: f64,
    pub beta_end: f64,
    pub count_start: u16,
    pub count_end: u16,
    pub converged: bool,
}

/// Modulation switched onto `piezo` (or off) at `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActuatorEvent {
    pub t: f64,
    pub piezo: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaSample {
    pub t: f64,
    pub piezo: usize,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolOutcome {
    pub bank: PiezoBank,
    pub subloops: Vec<SubloopRecord>,
    pub actuator_log: Vec<ActuatorEvent>,
    pub beta_trace: Vec<BetaSample>,
    /// RMS of the normalized β with modulation off.
    pub noise_floor: f64,
    pub threshold: f64,
    /// Carrier amplitude used to normalize β, V.
    pub reference_amplitude: f64,
    pub converged: bool,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolError {
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error("no carrier on the {0:?} detector")]
    NoCarrier(Detector),
    #[error("polarization loop did not converge; final |β| per piezo {final_beta:?}")]
    NotConverged { final_beta: [f64; 3], outcome: Box<PolOutcome> },
}

/// Streams one controller block through the chain; returns the mean β and
/// carrier amplitude of the decimated outputs.
fn run_block(plant: &mut PlantState, chain: &mut LockInChain, det: Detector, buf: &mut [f64]) -> (f64, f64) {
    let start = plant.sample_index();
    plant.stream(det, buf);
    let (mut b, mut a, mut n) = (0.0, 0.0, 0usize);
    chain.process(buf, start, |o| {
        b += o.beta;
        a += o.carrier_amplitude;
        n += 1;
    });
    let n = n.max(1) as f64;
    (b / n, a / n)
}

/// Cyclic modulation-method optimizer.
pub struct PolOptimizer<'a> {
    pub cfg: PolLoopCfg,
    pub target: PolTarget,
    chain: &'a mut LockInChain,
    buf: Vec<f64>,
    gain: f64,
    pub outcome: PolOutcome,
}

impl<'a> PolOptimizer<'a> {
    /// Checks the chain against the plant and measures the noise floor with
    /// modulation off.
    pub fn new(
        cfg: PolLoopCfg,
        chain: &'a mut LockInChain,
        plant: &mut PlantState,
        target: PolTarget,
    ) -> Result<Self, PolError> {
        if (chain.sample_rate() - plant.sample_rate()).abs() > 1e-9 {
            return Err(DspError::RateMismatch { chain: chain.sample_rate(), plant: plant.sample_rate() }.into());
        }
        let block = (cfg.block_s * plant.sample_rate()).round().max(1.0) as usize;
        let det = target.detector();
        plant.set_modulation(None);
        chain.reset();
        let mut buf = vec![0.0; block];
        let settle = (cfg.window.settle_s / cfg.block_s).round() as usize;
        let avg = (cfg.window.average_s / cfg.block_s).round().max(1.0) as usize;
        for _ in 0..settle {
            run_block(plant, chain, det, &mut buf);
        }
        let (mut amp, mut sq) = (0.0, 0.0);
        for _ in 0..avg {
            let (b, a) = run_block(plant, chain, det, &mut buf);
            amp += a;
            sq += b * b;
        }
        let v_ref = amp / avg as f64;
        if !(v_ref > 0.0) || v_ref < 1e-9 {
            return Err(PolError::NoCarrier(det));
        }
        let floor = (sq / avg as f64).sqrt() / v_ref;
        let bank = plant.path(target.path()).bank;
        let rpc = bank.rad_per_count(0);
        let a_sphere = cfg.modulation_amplitude_counts * rpc;
        let gain = cfg.polarity * 2.0 * std::f64::consts::PI * cfg.bandwidth_hz
            / (rpc * a_sphere * target.curvature());
        Ok(Self {
            cfg,
            target,
            chain,
            buf,
            gain,
            outcome: PolOutcome {
                bank,
                subloops: Vec::new(),
                actuator_log: Vec::new(),
                beta_trace: Vec::new(),
                noise_floor: floor,
                threshold: (cfg.threshold_factor * floor).max(cfg.min_threshold),
                reference_amplitude: v_ref,
                converged: false,
            },
        })
    }

    fn modulate(&mut self, plant: &mut PlantState, piezo: Option<usize>) {
        let path = self.target.path();
        let m = piezo.map(|k| {
            Modulation::from_counts(path, k, self.cfg.modulation_amplitude_counts, &plant.path(path).bank)
        });
        plant.set_modulation(m);
        self.outcome.actuator_log.push(ActuatorEvent { t: plant.time(), piezo });
    }

    /// Runs one sub-loop on piezo `k`. Stops at convergence, at the
    /// sub-loop timeout, or at plant time `deadline`. `observe` sees the
    /// bank after every block.
    pub fn subloop<F: FnMut(f64, [u16; 3])>(
        &mut self,
        plant: &mut PlantState,
        cycle: usize,
        k: usize,
        deadline: f64,
        mut observe: F,
    ) -> SubloopRecord {
        let det = self.target.detector();
        let path = self.target.path();
        let t_start = plant.time();
        let count_start = plant.path(path).bank.value(k);
        self.modulate(plant, Some(k));
        let settle = (self.cfg.window.settle_s / self.cfg.block_s).round() as usize;
        for _ in 0..settle {
            if plant.time() >= deadline {
                break;
            }
            run_block(plant, self.chain, det, &mut self.buf);
            observe(plant.time(), plant.path(path).bank.values());
        }
        let per_check = (self.cfg.check_s / self.cfg.block_s).round().max(1.0) as usize;
        let v_ref = self.outcome.reference_amplitude;
        let mut integ = Integrator::new(self.gain, count_start as f64);
        let (mut acc, mut n) = (0.0, 0usize);
        let mut beta_start = None;
        let mut beta_end = 0.0;
        let mut converged = false;
        // a piezo already inside the threshold is left alone, so noise
        // cannot walk the bank along directions the overlap ignores
        let mut pre = (0.0, 0usize);
        while pre.1 < per_check && plant.time() < deadline {
            let (b, _) = run_block(plant, self.chain, det, &mut self.buf);
            observe(plant.time(), plant.path(path).bank.values());
            pre.0 += b / v_ref;
            pre.1 += 1;
        }
        if pre.1 == per_check {
            let mean = pre.0 / per_check as f64;
            self.outcome.beta_trace.push(BetaSample { t: plant.time(), piezo: k, beta: mean });
            beta_start = Some(mean);
            beta_end = mean;
            converged = mean.abs() < self.outcome.threshold;
        }
        let t_int = plant.time();
        while !converged && plant.time() < deadline {
            let (b, _) = run_block(plant, self.chain, det, &mut self.buf);
            let e = b / v_ref;
            let v = integrator_step(&mut integ, e, self.cfg.block_s);
            integ.state = v.clamp(0.0, PIEZO_MAX_COUNT as f64);
            plant.set_piezo(path, k, integ.state.round() as i64);
            observe(plant.time(), plant.path(path).bank.values());
            acc += e;
            n += 1;
            if n == per_check {
                let mean = acc / n as f64;
                self.outcome.beta_trace.push(BetaSample { t: plant.time(), piezo: k, beta: mean });
                beta_start.get_or_insert(mean);
                beta_end = mean;
                acc = 0.0;
                n = 0;
                if mean.abs() < self.outcome.threshold {
                    converged = true;
                    break;
                }
                if plant.time() - t_int >= self.cfg.max_subloop_s {
                    break;
                }
            }
        }
        self.modulate(plant, None);
        let rec = SubloopRecord {
            cycle,
            piezo: k,
            t_start,
            t_end: plant.time(),
            beta_start: beta_start.unwrap_or(beta_end),
            beta_end,
            count_start,
            count_end: plant.path(path).bank.value(k),
            converged,
        };
        self.outcome.subloops.push(rec.clone());
        rec
    }

    /// Runs full cycles until every sub-loop of a cycle converges (after at
    /// least `cycles` sweeps) or `max_cycles` is reached.
    pub fn optimize(mut self, plant: &mut PlantState) -> Result<PolOutcome, PolError> {
        let mut final_beta = [0.0; 3];
        let mut all_converged = false;
        for cycle in 0..self.cfg.max_cycles.max(1) {
            all_converged = true;
            for k in 0..3 {
                let rec = self.subloop(plant, cycle, k, f64::INFINITY, |_, _| {});
                final_beta[k] = rec.beta_end.abs();
                all_converged &= rec.converged;
            }
            if cycle + 1 >= self.cfg.cycles && all_converged {
                break;
            }
        }
        self.outcome.bank = plant.path(self.target.path()).bank;
        self.outcome.converged = all_converged;
        if all_converged {
            Ok(self.outcome)
        } else {
            Err(PolError::NotConverged { final_beta, outcome: Box::new(self.outcome) })
        }
    }

    /// Keeps cycling sub-loops for `duration` seconds of plant time,
    /// reporting the bank after every block.
    pub fn track<F: FnMut(f64, [u16; 3])>(mut self, plant: &mut PlantState, duration: f64, mut observe: F) -> PolOutcome {
        let deadline = plant.time() + duration;
        let mut cycle = 0;
        'outer: loop {
            for k in 0..3 {
                if plant.time() >= deadline {
                    break 'outer;
                }
                self.subloop(plant, cycle, k, deadline, &mut observe);
            }
            cycle += 1;
        }
        self.outcome.bank = plant.path(self.target.path()).bank;
        self.outcome
    }
}

/// Runs the modulation-method optimizer to convergence.
pub fn pol_optimize(
    cfg: &PolLoopCfg,
    chain: &mut LockInChain,
    plant: &mut PlantState,
    target: PolTarget,
) -> Result<PolOutcome, PolError> {
    PolOptimizer::new(*cfg, chain, plant, target)?.optimize(plant)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomWalkCfg {
    pub step_counts: i64,
    pub steps: usize,
    pub rate_hz: f64,
    pub seed: u64,
}

impl Default for RandomWalkCfg {
    fn default() -> Self {
        Self { step_counts: 8, steps: 1000, rate_hz: 30.0, seed: 1 }
    }
}

/// Baseline optimizer: nudge a random piezo by a fixed step and keep the
/// move only if the measured interference amplitude grew. Returns the bank
/// values after every step, starting with the initial values.
pub fn random_walk_optimize(cfg: &RandomWalkCfg, plant: &mut PlantState, target: PolTarget) -> Vec<[u16; 3]> {
    let mut rng = stream_rng(cfg.seed, 200);
    let det = target.detector();
    let path = target.path();
    let half = 0.5 / cfg.rate_hz;
    plant.set_modulation(None);
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    trace.push(plant.path(path).bank.values());
    for _ in 0..cfg.steps {
        plant.advance(half);
        let before = plant.carrier_amplitude(det);
        let k = rng.random_range(0..3usize);
        let dir = if rng.random::<bool>() { 1 } else { -1 };
        let old = plant.path(path).bank.value(k);
        plant.set_piezo(path, k, old as i64 + dir * cfg.step_counts);
        plant.advance(half);
        let after = plant.carrier_amplitude(det);
        if after <= before {
            plant.set_piezo(path, k, old as i64);
        }
        trace.push(plant.path(path).bank.values());
    }
    trace
}
