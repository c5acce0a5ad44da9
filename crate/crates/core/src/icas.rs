//! Discrete pilot-tone synchronization of carrier frequency (CFO) and
//! timing (TO).
//!
//! Every agent updates at its own nominal repetition period `T_S,i`. The
//! carrier stage runs a standard Kuramoto protocol on an accumulated CFO
//! estimate; the timing stage runs the extended protocol on the repetition
//! frequency `Ω_i` and phase `Θ_i`, with phase offsets measured from the
//! rising edges of the pilot tones. A rising edge is emitted whenever the
//! piecewise-linear `Θ_i(t)` crosses a multiple of 2π.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::f64::consts::TAU;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::analysis::wrap_phase;
use crate::graph::Network;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IcasError {
    #[error("transceiver {agent}: {reason}")]
    InvalidTransceiver { agent: usize, reason: String },

    #[error("{0} transceivers configured for a network of {1} agents")]
    DimensionMismatch(usize, usize),

    #[error("gain `{name}` must be positive and finite, got {value}")]
    InvalidGain { name: &'static str, value: f64 },

    #[error("noise deviation `{name}` must be finite and nonnegative, got {value}")]
    InvalidNoise { name: &'static str, value: f64 },

    #[error(
        "{stage} stage of agent {agent} is unstable: step gain {gain:.3} leaves the unit circle \
         (reduce the gain or the update period)"
    )]
    UnstableGain {
        stage: &'static str,
        agent: usize,
        gain: f64,
    },

    #[error("repetition phase of agent {agent} stopped advancing at t = {time} s")]
    Stalled { agent: usize, time: f64 },

    #[error("state of agent {agent} diverged at t = {time} s")]
    Diverged { agent: usize, time: f64 },

    #[error("tone budget must be at least 2")]
    TooFewTones,
}

/// One radio: its free-running clocks and pilot-tone parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Transceiver {
    /// Carrier frequency `ω_i` in rad/s (offset from the nominal carrier).
    pub carrier_freq: f64,
    /// Repetition frequency `Ω_S,i` in rad/s.
    pub repetition_freq: f64,
    /// Pilot-tone duration `T_P,i` in seconds.
    pub tone_duration: f64,
    /// CFO sampling factor `λ`.
    pub cfo_sampling: f64,
    /// TO sampling factor `Λ`.
    pub to_sampling: f64,
    pub initial_carrier_phase: f64,
    /// `Θ_i(0)`, expected in `[0, 2π)` so that tone counts start together.
    pub initial_repetition_phase: f64,
}

impl Transceiver {
    pub fn new(carrier_freq: f64, repetition_freq: f64, tone_duration: f64) -> Self {
        Self {
            carrier_freq,
            repetition_freq,
            tone_duration,
            cfo_sampling: 1.0,
            to_sampling: 1.0,
            initial_carrier_phase: 0.0,
            initial_repetition_phase: 0.0,
        }
    }

    /// Nominal update period `T_S,i = 2π/Ω_S,i`.
    pub fn period(&self) -> f64 {
        TAU / self.repetition_freq
    }

    fn validate(&self, agent: usize) -> Result<(), IcasError> {
        let fail = |reason: String| Err(IcasError::InvalidTransceiver { agent, reason });
        let finite = [
            self.carrier_freq,
            self.repetition_freq,
            self.tone_duration,
            self.cfo_sampling,
            self.to_sampling,
            self.initial_carrier_phase,
            self.initial_repetition_phase,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return fail("all parameters must be finite".into());
        }
        if self.repetition_freq <= 0.0 {
            return fail(format!(
                "repetition frequency {} must be positive",
                self.repetition_freq
            ));
        }
        if !(self.tone_duration > 0.0 && self.tone_duration < self.period()) {
            return fail(format!(
                "tone duration {} s must lie in (0, T_S = {} s)",
                self.tone_duration,
                self.period()
            ));
        }
        for (name, v) in [
            ("cfo_sampling", self.cfo_sampling),
            ("to_sampling", self.to_sampling),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return fail(format!("{name} = {v} must lie in (0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcasGains {
    /// `K^θ`, carrier coupling.
    pub k_carrier: f64,
    /// `K^Θ`, repetition-phase coupling.
    pub k_repetition: f64,
    /// `a^Ω`, uniform repetition-frequency weight.
    pub a_frequency: f64,
    /// `a^Θ`, uniform repetition-phase weight.
    pub a_phase: f64,
}

impl Default for IcasGains {
    fn default() -> Self {
        Self {
            k_carrier: 1.0,
            k_repetition: 1.0,
            a_frequency: 1.0,
            a_phase: 1.0,
        }
    }
}

/// How the repetition-frequency offset `Ω_Δ,ij` is formed from consecutive
/// phase-offset measurements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ToEstimator {
    /// `(Ω_i/2π)(Θ_Δ(k) − Θ_Δ(k−1))` as is. It sees the phase-coupling
    /// corrections of both agents as frequency offset, which leaves a
    /// residual phase offset.
    EdgeDifference,
    /// As above minus the contribution of the coupling rates, which each
    /// agent reports alongside its tone.
    #[default]
    CorrectionAware,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MeasurementNoise {
    /// Standard deviation of the CFO measurement in rad/s.
    pub cfo_sigma: f64,
    /// Standard deviation of the edge-offset measurement in seconds.
    pub to_sigma: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct IcasConfig {
    pub transceivers: Vec<Transceiver>,
    /// Communication topology; only the neighbor sets are used, the weights
    /// come from [`IcasGains`].
    pub network: Network,
    pub gains: IcasGains,
    pub estimator: ToEstimator,
    pub noise: MeasurementNoise,
    /// Simulated span, in periods of the slowest agent.
    pub tones: usize,
}

impl IcasConfig {
    pub fn n_agents(&self) -> usize {
        self.transceivers.len()
    }

    pub fn horizon(&self) -> f64 {
        let slowest = self
            .transceivers
            .iter()
            .map(Transceiver::period)
            .fold(0.0, f64::max);
        self.tones as f64 * slowest
    }

    /// Checks parameters and the linearized per-update gain of each stage.
    ///
    /// For a stage with step gain `g` and Laplacian eigenvalue `μ` the update
    /// contracts iff `|1 − g·μ| < 1`; the check uses the Gershgorin disk
    /// `|μ − d_i| ≤ d_i` of each agent, which covers all eigenvalues.
    pub fn validate(&self) -> Result<(), IcasError> {
        let n = self.network.n_agents();
        if self.transceivers.len() != n {
            return Err(IcasError::DimensionMismatch(self.transceivers.len(), n));
        }
        if self.tones < 2 {
            return Err(IcasError::TooFewTones);
        }
        for (i, tx) in self.transceivers.iter().enumerate() {
            tx.validate(i)?;
        }
        let g = self.gains;
        for (name, value) in [
            ("k_carrier", g.k_carrier),
            ("k_repetition", g.k_repetition),
            ("a_frequency", g.a_frequency),
            ("a_phase", g.a_phase),
        ] {
            if !(value.is_finite() && value > 0.0) {
                return Err(IcasError::InvalidGain { name, value });
            }
        }
        for (name, value) in [
            ("cfo_sigma", self.noise.cfo_sigma),
            ("to_sigma", self.noise.to_sigma),
        ] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(IcasError::InvalidNoise { name, value });
            }
        }

        let nf = n as f64;
        let max_deg = self.network.max_in_degree() as f64;
        for (i, tx) in self.transceivers.iter().enumerate() {
            let deg = self.network.in_neighbors(i).len() as f64;
            // the CFO accumulator of edge (i, j) sees both endpoints' corrections
            let stages = [
                (
                    "carrier",
                    tx.cfo_sampling * tx.tone_duration * g.k_carrier / nf * (deg + max_deg),
                ),
                (
                    "repetition-frequency",
                    tx.period() * g.a_frequency * 2.0 * deg,
                ),
                (
                    "repetition-phase",
                    tx.period() * g.k_repetition / nf * g.a_phase * 2.0 * deg,
                ),
            ];
            for (stage, gain) in stages {
                if gain >= 2.0 {
                    return Err(IcasError::UnstableGain {
                        stage,
                        agent: i,
                        gain,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Protocol state of one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    /// Corrected carrier phase `θ_i(k)`.
    pub carrier_phase: f64,
    /// Carrier frequency currently transmitted, `θ̇_i(k)`.
    pub carrier_rate: f64,
    /// Repetition frequency estimate `Ω_i(k)`.
    pub rep_freq: f64,
    /// Repetition phase `Θ_i(k)` at the last update.
    pub rep_phase: f64,
    /// `Θ̇_i` on the current segment.
    pub rep_rate: f64,
    /// Phase-coupling part of `Θ̇_i` on the current segment.
    pub coupling_rate: f64,
    /// Start of the current segment.
    pub last_update: f64,
    /// `Θ_i(k+1)`, taken over at the next update.
    pub next_rep_phase: f64,
    pub updates: usize,
}

impl AgentState {
    fn new(tx: &Transceiver) -> Self {
        Self {
            carrier_phase: tx.initial_carrier_phase,
            carrier_rate: tx.carrier_freq,
            rep_freq: tx.repetition_freq,
            rep_phase: tx.initial_repetition_phase,
            rep_rate: tx.repetition_freq,
            coupling_rate: 0.0,
            last_update: 0.0,
            next_rep_phase: tx.initial_repetition_phase,
            updates: 0,
        }
    }

    /// `Θ_i(t)` on the current segment.
    pub fn rep_phase_at(&self, t: f64) -> f64 {
        self.rep_phase + self.rep_rate * (t - self.last_update)
    }
}

/// What agent `i` remembers about neighbor `j`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairMemory {
    /// Accumulated carrier offset `θ_Δ,ij(k)`.
    pub theta_delta: f64,
    /// `Θ_Δ,ij(k−1)`, once a timing measurement exists.
    pub rep_theta_delta_prev: Option<f64>,
    /// `P_Δ(k)`: tones received from `j` minus tones sent by `i`.
    pub tone_count_delta: i64,
}

/// Rising edge of a pilot tone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tone {
    pub time: f64,
    /// Coupling rate of the sender when the tone went out.
    pub coupling_rate: f64,
}

/// Ideal exchange for pair `(i, j)` at time `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairMeasurement {
    /// `ω̂_Δ,ij = θ̇_j − θ̇_i`.
    pub omega_hat_delta: f64,
    /// `T̂_Δ,ij = t_i − t_j` between the most recent rising edges, when both
    /// agents have sent one.
    pub t_hat_delta: Option<f64>,
    pub tone_count_delta: i64,
    /// Coupling rate reported with `j`'s most recent tone.
    pub sender_coupling_rate: f64,
}

/// Measures pair `(i, j)` from the true states and the tones sent strictly
/// before `t`.
pub fn measure_pair(
    agent: &AgentState,
    neighbor: &AgentState,
    tones_i: &[Tone],
    tones_j: &[Tone],
    t: f64,
) -> PairMeasurement {
    let sent_i = tones_i.partition_point(|e| e.time < t);
    let sent_j = tones_j.partition_point(|e| e.time < t);
    let t_hat_delta =
        (sent_i > 0 && sent_j > 0).then(|| tones_i[sent_i - 1].time - tones_j[sent_j - 1].time);
    PairMeasurement {
        omega_hat_delta: neighbor.carrier_rate - agent.carrier_rate,
        t_hat_delta,
        tone_count_delta: sent_j as i64 - sent_i as i64,
        sender_coupling_rate: if sent_j > 0 {
            tones_j[sent_j - 1].coupling_rate
        } else {
            0.0
        },
    }
}

/// Carrier update of agent `i`: advance every accumulator by `λ T_P ω̂`, set
/// `θ̇_i = ω_i + (K^θ/N) Σ sin θ_Δ,ij` and step `θ_i` by `T_S,i θ̇_i`.
/// Returns `(θ̇_i(k), θ_i(k+1))`.
pub fn cfo_step(
    agent: &AgentState,
    tx: &Transceiver,
    pairs: &mut [PairMemory],
    omega_hats: &[f64],
    k_carrier: f64,
    n_agents: usize,
) -> (f64, f64) {
    let mut pull = 0.0;
    for (mem, &w) in pairs.iter_mut().zip(omega_hats) {
        mem.theta_delta += tx.cfo_sampling * tx.tone_duration * w;
        pull += mem.theta_delta.sin();
    }
    let rate = tx.carrier_freq + k_carrier / n_agents as f64 * pull;
    (rate, agent.carrier_phase + tx.period() * rate)
}

/// Timing sample for one neighbor: `Θ_Δ,ij(k) = −Λ(Ω_i T̂ + 2π P_Δ)` and the
/// coupling-rate correction to remove from its increment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingSample {
    pub rep_theta_delta: f64,
    pub correction: f64,
}

/// Eq.-style offset from an edge delay and a tone-count difference.
pub fn rep_theta_delta(
    rep_freq: f64,
    t_hat_delta: f64,
    tone_count_delta: i64,
    to_sampling: f64,
) -> f64 {
    -to_sampling * (rep_freq * t_hat_delta + TAU * tone_count_delta as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingUpdate {
    pub rep_freq_next: f64,
    pub rep_rate: f64,
    pub coupling_rate: f64,
    pub rep_phase_next: f64,
}

/// Timing update of agent `i`. `samples[m]` is `None` while no edge from
/// that neighbor has arrived.
///
/// `Ω_Δ,ij = (Ω_i/2π)(Θ_Δ(k) − Θ_Δ(k−1)) − correction`,
/// `Ω̇_i = −Σ a^Ω Ω_Δ,ij`, `Θ̇_i = Ω_i + (K^Θ/N) Σ a^Θ sin(Θ_j − Θ_i)`.
pub fn to_step(
    agent: &AgentState,
    tx: &Transceiver,
    pairs: &mut [PairMemory],
    samples: &[Option<TimingSample>],
    gains: &IcasGains,
    n_agents: usize,
) -> TimingUpdate {
    let mut freq_drift = 0.0;
    let mut pull = 0.0;
    for (mem, sample) in pairs.iter_mut().zip(samples) {
        let Some(s) = sample else { continue };
        if let Some(prev) = mem.rep_theta_delta_prev {
            let omega_delta = agent.rep_freq / TAU * (s.rep_theta_delta - prev) - s.correction;
            freq_drift -= gains.a_frequency * omega_delta;
        }
        mem.rep_theta_delta_prev = Some(s.rep_theta_delta);
        // Θ_Δ,ij = Θ_i − Θ_j, so sin(Θ_j − Θ_i) = −sin Θ_Δ,ij
        pull -= gains.a_phase * s.rep_theta_delta.sin();
    }
    let period = tx.period();
    let coupling_rate = gains.k_repetition / n_agents as f64 * pull;
    let rep_rate = agent.rep_freq + coupling_rate;
    TimingUpdate {
        rep_freq_next: agent.rep_freq + period * freq_drift,
        rep_rate,
        coupling_rate,
        rep_phase_next: agent.rep_phase + period * rep_rate,
    }
}

/// Snapshot taken after each agent update.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateRecord {
    pub time: f64,
    pub agent: usize,
    pub step: usize,
    pub carrier_phase: f64,
    pub carrier_rate: f64,
    pub rep_freq: f64,
    pub rep_phase: f64,
    /// Largest `|ω̂_Δ,ij|` measured in this update.
    pub max_cfo_hat: f64,
    /// Largest `|T̂_Δ,ij|` measured in this update, if any.
    pub max_to_hat: Option<f64>,
    /// Network-wide `max |θ̇_i − θ̇_j|` after this update.
    pub mutual_cfo: f64,
    /// Network-wide `max |wrap(Θ_i − Θ_j)|` at this time.
    pub mutual_to_phase: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcasMetrics {
    pub horizon: f64,
    pub updates: usize,
    pub final_mutual_cfo: f64,
    pub final_mutual_to_phase: f64,
    /// Largest wrapped offset between the latest rising edges, in seconds.
    pub final_edge_offset: f64,
    /// Common carrier rate reached (mean of `θ̇_i`).
    pub carrier_consensus: f64,
    /// Mean of `Ω_i` at the end.
    pub rep_freq_consensus: f64,
    /// Largest mutual CFO and TO phase over the last quarter of the run.
    pub tail_mutual_cfo: f64,
    pub tail_mutual_to_phase: f64,
}

#[derive(Debug, Clone)]
pub struct IcasRun {
    pub records: Vec<UpdateRecord>,
    pub states: Vec<AgentState>,
    pub memories: Vec<Vec<PairMemory>>,
    pub tones: Vec<Vec<Tone>>,
    pub metrics: IcasMetrics,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Event {
    time: f64,
    agent: usize,
}

impl Eq for Event {}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.agent.cmp(&other.agent))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn mutual_cfo(states: &[AgentState]) -> f64 {
    let hi = states
        .iter()
        .map(|s| s.carrier_rate)
        .fold(f64::MIN, f64::max);
    let lo = states
        .iter()
        .map(|s| s.carrier_rate)
        .fold(f64::MAX, f64::min);
    hi - lo
}

fn mutual_to_phase(states: &[AgentState], t: f64) -> f64 {
    let phases: Vec<f64> = states.iter().map(|s| s.rep_phase_at(t)).collect();
    let mut worst: f64 = 0.0;
    for i in 0..phases.len() {
        for j in i + 1..phases.len() {
            worst = worst.max(wrap_phase(phases[i] - phases[j]).abs());
        }
    }
    worst
}

/// Rising edges of `Θ(t) = start + rate·(t − t0)` on `[t0, t0 + span)`.
fn segment_edges(t0: f64, start: f64, rate: f64, span: f64) -> Vec<f64> {
    let end = start + rate * span;
    let mut m = (start / TAU).ceil();
    let mut out = Vec::new();
    while TAU * m < end {
        out.push(t0 + (TAU * m - start) / rate);
        m += 1.0;
    }
    out
}

/// Runs the event-driven simulation until `config.horizon()`.
pub fn run_icas(config: &IcasConfig) -> Result<IcasRun, IcasError> {
    config.validate()?;
    let n = config.n_agents();
    let horizon = config.horizon();
    let txs = &config.transceivers;
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            config
                .network
                .in_neighbors(i)
                .iter()
                .map(|&(j, _)| j)
                .collect()
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.noise.seed);
    let cfo_noise = Normal::new(0.0, config.noise.cfo_sigma).expect("validated sigma");
    let to_noise = Normal::new(0.0, config.noise.to_sigma).expect("validated sigma");

    let mut states: Vec<AgentState> = txs.iter().map(AgentState::new).collect();
    let mut memories: Vec<Vec<PairMemory>> = neighbors
        .iter()
        .map(|nb| vec![PairMemory::default(); nb.len()])
        .collect();
    let mut tones: Vec<Vec<Tone>> = vec![Vec::new(); n];
    let mut records = Vec::new();

    let mut queue: BinaryHeap<Reverse<Event>> = (0..n)
        .map(|agent| Reverse(Event { time: 0.0, agent }))
        .collect();

    while let Some(Reverse(Event { time: t, agent: i })) = queue.pop() {
        if t > horizon * (1.0 + 1e-12) {
            break;
        }
        let tx = &txs[i];
        states[i].rep_phase = states[i].next_rep_phase;
        states[i].last_update = t;
        let me = states[i].clone();

        let mut omega_hats = Vec::with_capacity(neighbors[i].len());
        let mut samples = Vec::with_capacity(neighbors[i].len());
        let mut max_to_hat: Option<f64> = None;
        for (m, &j) in neighbors[i].iter().enumerate() {
            let meas = measure_pair(&me, &states[j], &tones[i], &tones[j], t);
            let omega_hat = meas.omega_hat_delta + sample(&cfo_noise, &mut rng);
            omega_hats.push(omega_hat);
            memories[i][m].tone_count_delta = meas.tone_count_delta;
            samples.push(meas.t_hat_delta.map(|dt| {
                let dt = dt + sample(&to_noise, &mut rng);
                max_to_hat = Some(max_to_hat.map_or(dt.abs(), |v: f64| v.max(dt.abs())));
                let scale = tx.to_sampling * me.rep_freq * tx.period() / TAU;
                TimingSample {
                    rep_theta_delta: rep_theta_delta(
                        me.rep_freq,
                        dt,
                        meas.tone_count_delta,
                        tx.to_sampling,
                    ),
                    correction: match config.estimator {
                        ToEstimator::EdgeDifference => 0.0,
                        ToEstimator::CorrectionAware => {
                            scale * (me.coupling_rate - meas.sender_coupling_rate)
                        }
                    },
                }
            }));
        }

        let (carrier_rate, carrier_next) = cfo_step(
            &me,
            tx,
            &mut memories[i],
            &omega_hats,
            config.gains.k_carrier,
            n,
        );
        let timing = to_step(&me, tx, &mut memories[i], &samples, &config.gains, n);
        let finite = [
            carrier_rate,
            carrier_next,
            timing.rep_freq_next,
            timing.rep_rate,
            timing.rep_phase_next,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(IcasError::Diverged { agent: i, time: t });
        }
        if timing.rep_rate <= 0.0 {
            return Err(IcasError::Stalled { agent: i, time: t });
        }

        let period = tx.period();
        for edge in segment_edges(t, me.rep_phase, timing.rep_rate, period) {
            tones[i].push(Tone {
                time: edge,
                coupling_rate: timing.coupling_rate,
            });
        }

        let s = &mut states[i];
        s.carrier_rate = carrier_rate;
        s.carrier_phase = carrier_next;
        s.rep_freq = timing.rep_freq_next;
        s.rep_rate = timing.rep_rate;
        s.coupling_rate = timing.coupling_rate;
        s.next_rep_phase = timing.rep_phase_next;
        s.updates += 1;
        let max_cfo_hat = omega_hats.iter().fold(0.0f64, |a, w| a.max(w.abs()));
        records.push(UpdateRecord {
            time: t,
            agent: i,
            step: s.updates - 1,
            carrier_phase: me.carrier_phase,
            carrier_rate,
            rep_freq: me.rep_freq,
            rep_phase: me.rep_phase,
            max_cfo_hat,
            max_to_hat,
            mutual_cfo: mutual_cfo(&states),
            mutual_to_phase: mutual_to_phase(&states, t),
        });

        queue.push(Reverse(Event {
            time: t + period,
            agent: i,
        }));
    }

    let metrics = summarize(&states, &tones, &records, horizon);
    Ok(IcasRun {
        records,
        states,
        memories,
        tones,
        metrics,
    })
}

fn sample(dist: &Normal<f64>, rng: &mut ChaCha8Rng) -> f64 {
    if dist.std_dev() == 0.0 {
        0.0
    } else {
        dist.sample(rng)
    }
}

fn summarize(
    states: &[AgentState],
    tones: &[Vec<Tone>],
    records: &[UpdateRecord],
    horizon: f64,
) -> IcasMetrics {
    let n = states.len() as f64;
    let mut edge_offset: f64 = 0.0;
    let last: Vec<Option<f64>> = tones
        .iter()
        .map(|e| e.iter().rev().find(|x| x.time <= horizon).map(|x| x.time))
        .collect();
    let mean_period = TAU / (states.iter().map(|s| s.rep_rate).sum::<f64>() / n);
    for i in 0..last.len() {
        for j in i + 1..last.len() {
            if let (Some(a), Some(b)) = (last[i], last[j]) {
                let d = (a - b).rem_euclid(mean_period);
                edge_offset = edge_offset.max(d.min(mean_period - d));
            }
        }
    }
    let tail: Vec<&UpdateRecord> = records
        .iter()
        .filter(|r| r.time >= 0.75 * horizon)
        .collect();
    IcasMetrics {
        horizon,
        updates: records.len(),
        final_mutual_cfo: mutual_cfo(states),
        final_mutual_to_phase: mutual_to_phase(states, horizon),
        final_edge_offset: edge_offset,
        carrier_consensus: states.iter().map(|s| s.carrier_rate).sum::<f64>() / n,
        rep_freq_consensus: states.iter().map(|s| s.rep_freq).sum::<f64>() / n,
        tail_mutual_cfo: tail.iter().map(|r| r.mutual_cfo).fold(0.0, f64::max),
        tail_mutual_to_phase: tail.iter().map(|r| r.mutual_to_phase).fold(0.0, f64::max),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair() -> Network {
        Network::from_neighbor_lists(&[vec![1], vec![0]], 1.0).unwrap()
    }

    fn two_agent(estimator: ToEstimator) -> IcasConfig {
        let mut a = Transceiver::new(1.0, TAU, 0.1);
        let mut b = Transceiver::new(1.1, TAU * 1.02, 0.1);
        a.initial_repetition_phase = 0.3;
        b.initial_repetition_phase = 1.2;
        IcasConfig {
            transceivers: vec![a, b],
            network: pair(),
            gains: IcasGains {
                k_carrier: 1.0,
                k_repetition: 1.0,
                a_frequency: 0.25,
                a_phase: 1.0,
            },
            estimator,
            noise: MeasurementNoise::default(),
            tones: 500,
        }
    }

    fn five_agent() -> IcasConfig {
        let omega = [1.1, 0.8, 1.0, 1.3, 1.05];
        let rep = [1.0, 1.02, 0.99, 1.01, 0.985];
        let phase0 = [0.5, 2.5, 1.5, 2.0, 4.5];
        let transceivers = (0..5)
            .map(|i| {
                let mut t = Transceiver::new(omega[i], TAU * rep[i], 0.1);
                t.initial_repetition_phase = phase0[i];
                t
            })
            .collect();
        IcasConfig {
            transceivers,
            network: Network::from_neighbor_lists(
                &[
                    vec![1, 4],
                    vec![0, 2, 3, 4],
                    vec![0, 1, 3],
                    vec![0, 1, 4],
                    vec![0, 3],
                ],
                1.0,
            )
            .unwrap(),
            gains: IcasGains {
                k_carrier: 5.0,
                k_repetition: 1.0,
                a_frequency: 0.1,
                a_phase: 1.0,
            },
            estimator: ToEstimator::CorrectionAware,
            noise: MeasurementNoise::default(),
            tones: 1000,
        }
    }

    fn identical(n: usize) -> IcasConfig {
        IcasConfig {
            transceivers: vec![Transceiver::new(0.7, TAU, 0.1); n],
            network: Network::all_to_all(n, 1.0).unwrap(),
            gains: IcasGains {
                a_frequency: 0.1,
                ..IcasGains::default()
            },
            estimator: ToEstimator::CorrectionAware,
            noise: MeasurementNoise::default(),
            tones: 50,
        }
    }

    fn state(carrier_rate: f64) -> AgentState {
        AgentState::new(&Transceiver::new(carrier_rate, TAU, 0.1))
    }

    fn tones(times: &[f64]) -> Vec<Tone> {
        times
            .iter()
            .map(|&time| Tone {
                time,
                coupling_rate: 0.0,
            })
            .collect()
    }

    #[test]
    fn ideal_measurements() {
        let m = measure_pair(
            &state(1.0),
            &state(1.0),
            &tones(&[0.0, 1.0]),
            &tones(&[0.0, 1.0]),
            1.5,
        );
        assert_eq!(
            (m.omega_hat_delta, m.t_hat_delta, m.tone_count_delta),
            (0.0, Some(0.0), 0)
        );
        let m = measure_pair(&state(1.0), &state(1.3), &[], &[], 1.5);
        assert!((m.omega_hat_delta - 0.3).abs() < 1e-12);
        assert_eq!(m.t_hat_delta, None);
        let m = measure_pair(
            &state(1.0),
            &state(1.0),
            &tones(&[0.02, 1.02]),
            &tones(&[0.0, 1.0, 2.0]),
            1.5,
        );
        assert!((m.t_hat_delta.unwrap() - 0.02).abs() < 1e-12);
        // the tone at 2.0 has not been sent yet
        assert_eq!(m.tone_count_delta, 0);
        let m = measure_pair(
            &state(1.0),
            &state(1.0),
            &tones(&[0.5]),
            &tones(&[0.0, 1.0]),
            1.5,
        );
        assert_eq!(m.tone_count_delta, 1);
    }

    #[test]
    fn timing_offset_arithmetic() {
        assert!((rep_theta_delta(TAU, 0.25, 0, 1.0) + std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        assert!((rep_theta_delta(TAU, 0.25, 1, 1.0) + 2.5 * std::f64::consts::PI).abs() < 1e-12);
        assert!((rep_theta_delta(TAU, 0.25, 0, 0.5) + std::f64::consts::FRAC_PI_4).abs() < 1e-12);
    }

    #[test]
    fn cfo_accumulator_unrolls() {
        let tx = Transceiver::new(1.0, TAU, 0.1);
        let agent = AgentState::new(&tx);
        let mut mem = [PairMemory::default()];
        for k in 1..=5 {
            // λ T_P ω̂ = 0.1 · 0.1 = 0.01
            let (rate, next) = cfo_step(&agent, &tx, &mut mem, &[0.1], 2.0, 2);
            assert!((mem[0].theta_delta - 0.01 * k as f64).abs() < 1e-12);
            assert!((rate - (1.0 + (0.01 * k as f64).sin())).abs() < 1e-12);
            assert!((next - tx.period() * rate).abs() < 1e-12);
        }
        let mut mem = [PairMemory::default(), PairMemory::default()];
        let (rate, _) = cfo_step(&agent, &tx, &mut mem, &[0.0, 0.0], 2.0, 3);
        assert_eq!(rate, 1.0);
        assert_eq!(mem[0].theta_delta, 0.0);
    }

    #[test]
    fn timing_step_without_offsets_is_free_running() {
        let tx = Transceiver::new(1.0, TAU, 0.1);
        let agent = AgentState::new(&tx);
        let mut mem = [PairMemory {
            rep_theta_delta_prev: Some(0.0),
            ..PairMemory::default()
        }];
        let sample = TimingSample {
            rep_theta_delta: 0.0,
            correction: 0.0,
        };
        let u = to_step(
            &agent,
            &tx,
            &mut mem,
            &[Some(sample)],
            &IcasGains::default(),
            2,
        );
        assert_eq!(u.rep_freq_next, TAU);
        assert_eq!(u.rep_rate, TAU);
        assert!((u.rep_phase_next - TAU).abs() < 1e-12);
        // a neighbor ahead (Θ_Δ < 0) speeds the agent up
        let ahead = TimingSample {
            rep_theta_delta: -0.2,
            correction: 0.0,
        };
        let u = to_step(
            &agent,
            &tx,
            &mut mem,
            &[Some(ahead)],
            &IcasGains::default(),
            2,
        );
        assert!(u.coupling_rate > 0.0);
        assert!(u.rep_freq_next > TAU);
    }

    #[test]
    fn identical_clocks_are_an_exact_fixed_point() {
        let run = run_icas(&identical(4)).unwrap();
        for r in &run.records {
            assert_eq!(r.mutual_cfo, 0.0);
            assert_eq!(r.mutual_to_phase, 0.0);
            assert_eq!(r.carrier_rate, 0.7);
            assert_eq!(r.rep_freq, TAU);
            assert_eq!(r.max_cfo_hat, 0.0);
        }
        assert!(run
            .memories
            .iter()
            .flatten()
            .all(|m| m.theta_delta == 0.0 && m.tone_count_delta == 0));
    }

    #[test]
    fn two_agents_agree_on_carrier() {
        let mut c = two_agent(ToEstimator::CorrectionAware);
        c.tones = 200;
        let run = run_icas(&c).unwrap();
        assert!(run.metrics.final_mutual_cfo < 1e-4, "{:?}", run.metrics);
    }

    #[test]
    fn two_agents_align_tones() {
        let run = run_icas(&two_agent(ToEstimator::CorrectionAware)).unwrap();
        assert!(
            run.metrics.final_mutual_to_phase < 1e-3,
            "{:?}",
            run.metrics
        );
        assert!(run.metrics.final_edge_offset < 1e-3);
    }

    #[test]
    fn literal_frequency_estimate_leaves_timing_offset() {
        let run = run_icas(&two_agent(ToEstimator::EdgeDifference)).unwrap();
        assert!(run.metrics.final_mutual_cfo < 1e-4);
        assert!(run.metrics.tail_mutual_to_phase > 0.1, "{:?}", run.metrics);
    }

    #[test]
    fn five_agents_converge() {
        let run = run_icas(&five_agent()).unwrap();
        assert!(run.metrics.final_mutual_cfo < 1e-4, "{:?}", run.metrics);
        assert!(
            run.metrics.final_mutual_to_phase < 1e-3,
            "{:?}",
            run.metrics
        );
    }

    #[test]
    fn noise_keeps_offsets_bounded_but_nonzero() {
        let mut c = five_agent();
        c.noise = MeasurementNoise {
            cfo_sigma: 1e-3,
            to_sigma: 1e-4,
            seed: 7,
        };
        let run = run_icas(&c).unwrap();
        assert!(run.metrics.tail_mutual_cfo > 0.0 && run.metrics.tail_mutual_cfo < 1e-2);
        assert!(run.metrics.tail_mutual_to_phase > 0.0 && run.metrics.tail_mutual_to_phase < 5e-2);
        let again = run_icas(&c).unwrap();
        assert_eq!(run.metrics, again.metrics);
    }

    #[test]
    fn tone_count_difference_matches_true_phases() {
        let run = run_icas(&five_agent()).unwrap();
        let c = five_agent();
        let sent = |j: usize, t: f64| {
            let s = &run.states[j];
            let theta0 = c.transceivers[j].initial_repetition_phase;
            ((s.rep_phase_at(t) / TAU).ceil() - (theta0 / TAU).ceil()) as i64
        };
        let mut checked = 0;
        for i in 0..5 {
            let t = run.states[i].last_update;
            for (m, &(j, _)) in c.network.in_neighbors(i).iter().enumerate() {
                if run.states[j].last_update <= t && i != j {
                    let expected = sent(j, t) - sent(i, t);
                    assert_eq!(run.memories[i][m].tone_count_delta, expected);
                    checked += 1;
                }
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn stages_are_separated() {
        let base = run_icas(&five_agent()).unwrap();
        let mut shifted = five_agent();
        for tx in &mut shifted.transceivers {
            tx.initial_repetition_phase = (tx.initial_repetition_phase + 1.0) % TAU;
        }
        let other = run_icas(&shifted).unwrap();
        for (a, b) in base.records.iter().zip(&other.records) {
            assert_eq!(a.carrier_rate, b.carrier_rate);
        }
        let mut detuned = five_agent();
        detuned.transceivers[0].carrier_freq += 0.5;
        let other = run_icas(&detuned).unwrap();
        for (a, b) in base.records.iter().zip(&other.records) {
            assert_eq!((a.rep_freq, a.rep_phase), (b.rep_freq, b.rep_phase));
        }
    }

    #[test]
    fn rejects_bad_configurations() {
        let mut c = five_agent();
        c.gains = IcasGains::default();
        assert!(matches!(
            c.validate(),
            Err(IcasError::UnstableGain {
                stage: "repetition-frequency",
                ..
            })
        ));
        let mut c = five_agent();
        c.transceivers[2].tone_duration = 2.0;
        assert!(matches!(
            c.validate(),
            Err(IcasError::InvalidTransceiver { agent: 2, .. })
        ));
        let mut c = five_agent();
        c.transceivers[0].cfo_sampling = 1.5;
        assert!(c.validate().is_err());
        let mut c = five_agent();
        c.transceivers.pop();
        assert_eq!(
            c.validate().unwrap_err(),
            IcasError::DimensionMismatch(4, 5)
        );
        let mut c = five_agent();
        c.noise.to_sigma = -1.0;
        assert!(c.validate().is_err());
    }
}
