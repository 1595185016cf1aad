//! Monte Carlo generation of detection streams from a gated detector.
//!
//! Each gate fires when a photon is detected (Poissonian source, mean `μη`
//! detected photons per gate), a dark count occurs, or a trapped carrier from
//! an earlier avalanche is released. Afterpulsing either follows only the
//! most recent avalanche ([`AfterpulseMemory::LastAvalancheOnly`], the
//! assumption behind the analytic interval model) or superposes all earlier
//! avalanches still within the horizon ([`AfterpulseMemory::Accumulating`]).
//!
//! The default sampler does not walk gate by gate. Photon/dark counts and
//! afterpulses are independent per gate, so the next detection is the earlier
//! of a geometric waiting time and the first afterpulse, the latter drawn by
//! inverting its survival function. [`simulate_stream_gatewise`] is the literal
//! per-gate Bernoulli walk and is kept as a reference.
//!
//! # Random streams
//!
//! Runs draw from ChaCha8 seeded by [`SimConfig::seed`] with the independent
//! stream selected by [`SimConfig::stream`]. Parallel runs share a seed and use
//! distinct stream numbers; each run owns its generator, so no state is
//! shared between runs.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric};
use thiserror::Error;

use crate::model::{DetectorParams, GateModel, ModelError};

pub const DEFAULT_HORIZON_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("a detection occurs in every gate; only a gate-count stop is allowed")]
    Saturated,
    #[error("no detection can ever occur; only a gate-count stop is allowed")]
    NeverFires,
    #[error("invalid event stream: {0}")]
    InvalidStream(String),
}

pub type Result<T> = std::result::Result<T, SimError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopCondition {
    /// Stop after this many detections.
    Detections(u64),
    /// Stop after this many gates have elapsed.
    Gates(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AfterpulseMemory {
    #[default]
    LastAvalancheOnly,
    Accumulating,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub params: DetectorParams,
    pub stop: StopCondition,
    pub seed: u64,
    /// ChaCha stream number, for independent parallel runs under one seed.
    pub stream: u64,
    pub memory: AfterpulseMemory,
    /// Afterpulse contributions below this probability are dropped.
    pub horizon_eps: f64,
}

impl SimConfig {
    pub fn new(params: DetectorParams, stop: StopCondition, seed: u64) -> Self {
        Self {
            params,
            stop,
            seed,
            stream: 0,
            memory: AfterpulseMemory::default(),
            horizon_eps: DEFAULT_HORIZON_EPS,
        }
    }

    pub fn with_stream(mut self, stream: u64) -> Self {
        self.stream = stream;
        self
    }

    pub fn with_memory(mut self, memory: AfterpulseMemory) -> Self {
        self.memory = memory;
        self
    }

    fn validate(&self) -> Result<GateModel> {
        let model = self.params.gate_model()?;
        if !(self.horizon_eps > 0.0 && self.horizon_eps < 1.0) {
            return Err(SimError::InvalidConfig(format!(
                "horizon_eps must lie in (0, 1), got {}",
                self.horizon_eps
            )));
        }
        if let StopCondition::Detections(_) = self.stop {
            if model.q() == 0.0 {
                return Err(SimError::Saturated);
            }
            if model.one_minus_q() == 0.0 {
                return Err(SimError::NeverFires);
            }
        }
        Ok(model)
    }
}

pub fn sim_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Gate indices of detections, strictly increasing and starting at 1.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EventStream {
    gates: Vec<u64>,
    n_gates_simulated: u64,
}

impl EventStream {
    pub fn new(gates: Vec<u64>, n_gates_simulated: u64) -> Result<Self> {
        if let Some(&first) = gates.first() {
            if first == 0 {
                return Err(SimError::InvalidStream("gate indices start at 1".into()));
            }
        }
        if let Some(i) = gates.windows(2).position(|w| w[1] <= w[0]) {
            return Err(SimError::InvalidStream(format!(
                "gate {} at position {} does not follow {}",
                gates[i + 1],
                i + 1,
                gates[i]
            )));
        }
        if let Some(&last) = gates.last() {
            if last > n_gates_simulated {
                return Err(SimError::InvalidStream(format!(
                    "gate {last} beyond the {n_gates_simulated} gates elapsed"
                )));
            }
        }
        Ok(Self {
            gates,
            n_gates_simulated,
        })
    }

    /// Stream whose elapsed gate count ends at the last detection.
    pub fn from_gates(gates: Vec<u64>) -> Result<Self> {
        let n = gates.last().copied().unwrap_or(0);
        Self::new(gates, n)
    }

    pub fn gates(&self) -> &[u64] {
        &self.gates
    }

    pub fn len(&self) -> usize {
        self.gates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gates.is_empty()
    }

    pub fn n_gates_simulated(&self) -> u64 {
        self.n_gates_simulated
    }

    pub fn into_gates(self) -> Vec<u64> {
        self.gates
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SimStats {
    pub detections: u64,
    /// Detections in whose gate an afterpulse fired (possibly together with
    /// a photon or dark count).
    pub afterpulse_gates: u64,
}

/// Probability of a detection in the current gate given the gates elapsed
/// since the latest detection (`None` before the first one).
pub fn per_gate_count_prob(params: &DetectorParams, gates_since_last: Option<u64>) -> Result<f64> {
    Ok(params.gate_model()?.count_prob(gates_since_last)?)
}

pub fn simulate_stream(config: &SimConfig) -> Result<EventStream> {
    simulate_with_stats(config).map(|(stream, _)| stream)
}

pub fn simulate_with_stats(config: &SimConfig) -> Result<(EventStream, SimStats)> {
    let model = config.validate()?;
    let mut rng = sim_rng(config.seed, config.stream);
    let mut sink = Sink::new(config.stop);
    match config.memory {
        AfterpulseMemory::LastAvalancheOnly => {
            run_last_only(&model, config.horizon_eps, &mut rng, &mut sink)
        }
        AfterpulseMemory::Accumulating => {
            run_accumulating(&model, config.horizon_eps, &mut rng, &mut sink)
        }
    }
    Ok(sink.finish())
}

struct Sink {
    stop: StopCondition,
    gates: Vec<u64>,
    stats: SimStats,
}

impl Sink {
    fn new(stop: StopCondition) -> Self {
        let cap = match stop {
            StopCondition::Detections(n) => n.min(1 << 26) as usize,
            StopCondition::Gates(_) => 0,
        };
        Self {
            stop,
            gates: Vec::with_capacity(cap),
            stats: SimStats::default(),
        }
    }

    fn last(&self) -> u64 {
        self.gates.last().copied().unwrap_or(0)
    }

    fn done(&self) -> bool {
        match self.stop {
            StopCondition::Detections(n) => self.gates.len() as u64 >= n,
            StopCondition::Gates(_) => false,
        }
    }

    /// Records a detection; returns false once the gate budget is exceeded.
    fn push(&mut self, gate: u64, afterpulse: bool) -> bool {
        if let StopCondition::Gates(n) = self.stop {
            if gate > n {
                return false;
            }
        }
        self.gates.push(gate);
        self.stats.detections += 1;
        if afterpulse {
            self.stats.afterpulse_gates += 1;
        }
        !self.done()
    }

    fn finish(self) -> (EventStream, SimStats) {
        let n = match self.stop {
            StopCondition::Gates(n) => n,
            StopCondition::Detections(_) => self.last(),
        };
        let stream = EventStream {
            gates: self.gates,
            n_gates_simulated: n,
        };
        (stream, self.stats)
    }
}

/// Waiting time (≥ 1 gates) to the next photon or dark count, or `None` if
/// none can occur.
struct PhotonWait(Option<Geometric>);

impl PhotonWait {
    fn new(model: &GateModel) -> Self {
        let p = model.one_minus_q();
        Self(if p > 0.0 {
            Some(Geometric::new(p).expect("probability in (0, 1]"))
        } else {
            None
        })
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Option<u64> {
        self.0.as_ref().map(|g| g.sample(rng).saturating_add(1))
    }
}

/// Cumulative log-survival `L[k-1] = Σ_{x=1}^{k} ln(1 - P_a(x))` up to the
/// horizon.
fn afterpulse_log_survival(model: &GateModel, horizon_eps: f64) -> Vec<f64> {
    let mut table = Vec::new();
    let mut acc = 0.0;
    for x in 1u64.. {
        let pa = model.p0() * (-(x as f64) * model.decay()).exp();
        if pa < horizon_eps {
            break;
        }
        acc += (-pa).ln_1p();
        table.push(acc);
    }
    table
}

fn run_last_only<R: Rng>(model: &GateModel, horizon_eps: f64, rng: &mut R, sink: &mut Sink) {
    let wait = PhotonWait::new(model);
    let log_surv = afterpulse_log_survival(model, horizon_eps);

    // no afterpulsing before the first detection
    let Some(first) = wait.sample(rng) else {
        return;
    };
    if !sink.push(first, false) {
        return;
    }
    loop {
        let photon = wait.sample(rng);
        let afterpulse = if log_surv.is_empty() {
            None
        } else {
            let ln_u = (1.0 - rng.random::<f64>()).ln();
            let k = log_surv.partition_point(|&l| l >= ln_u);
            (k < log_surv.len()).then_some(k as u64 + 1)
        };
        let (gap, by_afterpulse) = match (photon, afterpulse) {
            (Some(p), Some(a)) => (p.min(a), a <= p),
            (Some(p), None) => (p, false),
            (None, Some(a)) => (a, true),
            (None, None) => return,
        };
        if !sink.push(sink.last() + gap, by_afterpulse) {
            return;
        }
    }
}

fn run_accumulating<R: Rng>(model: &GateModel, horizon_eps: f64, rng: &mut R, sink: &mut Sink) {
    let wait = PhotonWait::new(model);
    let pa = |age: u64| model.p0() * (-(age as f64) * model.decay()).exp();
    let mut active: VecDeque<u64> = VecDeque::new();
    let mut gate = 0u64;
    loop {
        let next = gate + 1;
        while let Some(&oldest) = active.front() {
            if pa(next - oldest) < horizon_eps {
                active.pop_front();
            } else {
                break;
            }
        }
        let detection = if active.is_empty() {
            match wait.sample(rng) {
                Some(w) => Some((gate + w, false)),
                None => return,
            }
        } else {
            let photon = rng.random::<f64>() < model.one_minus_q();
            let survive: f64 = active.iter().map(|&g| 1.0 - pa(next - g)).product();
            let afterpulse = rng.random::<f64>() < 1.0 - survive;
            (photon || afterpulse).then_some((next, afterpulse))
        };
        match detection {
            Some((g, by_afterpulse)) => {
                if !sink.push(g, by_afterpulse) {
                    return;
                }
                active.push_back(g);
                gate = g;
            }
            None => {
                if let StopCondition::Gates(n) = sink.stop {
                    if next >= n {
                        return;
                    }
                }
                gate = next;
            }
        }
    }
}

/// Literal per-gate Bernoulli walk, one uniform draw per gate.
///
/// Much slower than [`simulate_stream`] and drawn from the same generator in a
/// different order, so streams differ sample by sample but agree in
/// distribution.
pub fn simulate_stream_gatewise(config: &SimConfig) -> Result<EventStream> {
    let model = config.validate()?;
    let mut rng = sim_rng(config.seed, config.stream);
    let mut sink = Sink::new(config.stop);
    let pa = |age: u64| model.p0() * (-(age as f64) * model.decay()).exp();
    let mut history: VecDeque<u64> = VecDeque::new();
    let mut gate = 0u64;
    loop {
        gate += 1;
        if let StopCondition::Gates(n) = config.stop {
            if gate > n {
                break;
            }
        }
        let p = match config.memory {
            AfterpulseMemory::LastAvalancheOnly => {
                model.count_prob(history.back().map(|&g| gate - g))?
            }
            AfterpulseMemory::Accumulating => {
                while history
                    .front()
                    .is_some_and(|&g| pa(gate - g) < config.horizon_eps)
                {
                    history.pop_front();
                }
                let survive: f64 = history.iter().map(|&g| 1.0 - pa(gate - g)).product();
                1.0 - model.q() * survive
            }
        };
        if rng.random::<f64>() < p {
            if config.memory == AfterpulseMemory::LastAvalancheOnly {
                history.clear();
            }
            history.push_back(gate);
            if !sink.push(gate, false) {
                break;
            }
        }
    }
    Ok(sink.finish().0)
}
