//! Continuous-time protocols and their fixed-step integration.
//!
//! Four protocols share one state layout convention: the phase-like state
//! `θ` (or the consensus state `x`) always occupies the trailing `N` entries;
//! the extended Kuramoto model prepends its frequency stage `ϑ`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::Network;
use crate::integrator::integrate_fixed;

/// Default (and maximum, unless overridden) integration step in seconds.
pub const DEFAULT_STEP: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("{what} has length {got}, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{what} contains a non-finite value at index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("{0} protocol requires a positive coupling strength, got {1}")]
    InvalidCoupling(ProtocolKind, f64),

    #[error("frequency-stage network of the extended model is not connected")]
    FrequencyNetworkDisconnected,

    #[error("phase-stage weight a[{i}][{j}] = {value} is not 0 or 1")]
    NonBinaryPhaseWeight { i: usize, j: usize, value: f64 },

    #[error("step must be positive and finite, got {0}")]
    InvalidStep(f64),

    #[error(
        "step {step} s exceeds the {limit} s ceiling (raise the ceiling explicitly to allow it)"
    )]
    StepTooLarge { step: f64, limit: f64 },

    #[error("horizon must be positive and finite, got {0}")]
    InvalidHorizon(f64),

    #[error("horizon {horizon} s is not an integer multiple of the step {step} s")]
    NonIntegralHorizon { horizon: f64, step: f64 },

    #[error("state diverged (non-finite) at t = {0} s")]
    Diverged(f64),
}

/// Per-agent phase acceleration `φ̈_i(t)` in rad/s².
pub type Disturbance = Arc<dyn Fn(usize, f64) -> f64 + Send + Sync>;

/// Local oscillators `φ_i(t) = ω_i t + φ_{0,i}`.
#[derive(Clone)]
pub struct OscillatorBank {
    natural_freq: Vec<f64>,
    initial_phase: Vec<f64>,
    disturbance: Option<Disturbance>,
}

impl fmt::Debug for OscillatorBank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OscillatorBank")
            .field("natural_freq", &self.natural_freq)
            .field("initial_phase", &self.initial_phase)
            .field("disturbance", &self.disturbance.as_ref().map(|_| "<fn>"))
            .finish()
    }
}

impl OscillatorBank {
    pub fn new(natural_freq: Vec<f64>, initial_phase: Vec<f64>) -> Result<Self, DynamicsError> {
        check_len("initial_phase", natural_freq.len(), initial_phase.len())?;
        check_finite("natural_freq", &natural_freq)?;
        check_finite("initial_phase", &initial_phase)?;
        Ok(Self {
            natural_freq,
            initial_phase,
            disturbance: None,
        })
    }

    /// All-zero bank of `n` oscillators.
    pub fn zeros(n: usize) -> Self {
        Self {
            natural_freq: vec![0.0; n],
            initial_phase: vec![0.0; n],
            disturbance: None,
        }
    }

    pub fn with_disturbance(mut self, disturbance: Disturbance) -> Self {
        self.disturbance = Some(disturbance);
        self
    }

    pub fn n_agents(&self) -> usize {
        self.natural_freq.len()
    }

    pub fn natural_freq(&self) -> &[f64] {
        &self.natural_freq
    }

    pub fn initial_phase(&self) -> &[f64] {
        &self.initial_phase
    }

    /// `φ_i(t)`.
    pub fn phase_at(&self, i: usize, t: f64) -> f64 {
        self.natural_freq[i] * t + self.initial_phase[i]
    }

    /// `φ̈_i(t)`; zero when no disturbance is attached.
    pub fn disturbance_at(&self, i: usize, t: f64) -> f64 {
        self.disturbance.as_ref().map_or(0.0, |d| d(i, t))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    StaticConsensus,
    DynamicConsensus,
    Kuramoto,
    ExtendedKuramoto,
}

impl ProtocolKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::StaticConsensus => "static_consensus",
            Self::DynamicConsensus => "dynamic_consensus",
            Self::Kuramoto => "kuramoto",
            Self::ExtendedKuramoto => "extended_kuramoto",
        }
    }

    /// True for the two phase protocols whose state lives on the circle.
    pub fn is_phase_model(self) -> bool {
        matches!(self, Self::Kuramoto | Self::ExtendedKuramoto)
    }
}

impl fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProtocolKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "static_consensus" => Ok(Self::StaticConsensus),
            "dynamic_consensus" => Ok(Self::DynamicConsensus),
            "kuramoto" => Ok(Self::Kuramoto),
            "extended_kuramoto" => Ok(Self::ExtendedKuramoto),
            other => Err(format!("unknown protocol kind `{other}`")),
        }
    }
}

/// Protocol selection and its gains.
///
/// `coupling` is the Kuramoto strength `K`; the per-edge gain is `K/N`.
/// For the extended model, `freq_weights` carries `a^ϑ_ij` and
/// `phase_weights` the binary `a^θ_ij`. When absent they default to the
/// scenario network and its unit-weight topology respectively.
#[derive(Debug, Clone)]
pub struct ProtocolSpec {
    pub kind: ProtocolKind,
    pub coupling: f64,
    pub freq_weights: Option<Network>,
    pub phase_weights: Option<Network>,
}

impl ProtocolSpec {
    pub fn static_consensus() -> Self {
        Self::plain(ProtocolKind::StaticConsensus, 0.0)
    }

    pub fn dynamic_consensus() -> Self {
        Self::plain(ProtocolKind::DynamicConsensus, 0.0)
    }

    pub fn kuramoto(coupling: f64) -> Self {
        Self::plain(ProtocolKind::Kuramoto, coupling)
    }

    pub fn extended_kuramoto(coupling: f64) -> Self {
        Self::plain(ProtocolKind::ExtendedKuramoto, coupling)
    }

    fn plain(kind: ProtocolKind, coupling: f64) -> Self {
        Self {
            kind,
            coupling,
            freq_weights: None,
            phase_weights: None,
        }
    }
}

/// `u̇(t)` written into the output slice.
pub type RateFn = Arc<dyn Fn(f64, &mut [f64]) + Send + Sync>;

/// Time-varying input rate `u̇(t)` for the dynamic consensus protocol.
#[derive(Clone)]
pub enum InputRate {
    Constant(Vec<f64>),
    Function(RateFn),
}

impl InputRate {
    fn fill(&self, t: f64, out: &mut [f64]) {
        match self {
            Self::Constant(v) => out.copy_from_slice(v),
            Self::Function(f) => f(t, out),
        }
    }
}

impl fmt::Debug for InputRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Constant(v) => f.debug_tuple("Constant").field(v).finish(),
            Self::Function(_) => f.write_str("Function(<fn>)"),
        }
    }
}

// ---------------------------------------------------------------------------
// Right-hand sides
// ---------------------------------------------------------------------------

/// Writes `−(L x)` into `out`.
pub fn static_consensus_rhs_into(x: &[f64], net: &Network, out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = -net
            .in_neighbors(i)
            .iter()
            .map(|&(j, a)| a * (x[i] - x[j]))
            .sum::<f64>();
    }
}

/// `ẋ = −L x`.
pub fn static_consensus_rhs(x: &[f64], net: &Network) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    static_consensus_rhs_into(x, net, &mut out);
    out
}

/// `ẋ = u̇ − L x`.
pub fn dynamic_consensus_rhs(x: &[f64], u_dot: &[f64], net: &Network) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    static_consensus_rhs_into(x, net, &mut out);
    for (o, u) in out.iter_mut().zip(u_dot) {
        *o += u;
    }
    out
}

/// Writes `θ̇_i = ω_i + gain · Σ_{j ∈ N_i} sin(θ_j − θ_i)` into `out`, where the
/// sum runs over in-neighbors only.
fn kuramoto_rhs_into(theta: &[f64], omega: &[f64], gain: f64, net: &Network, out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        let pull: f64 = net
            .in_neighbors(i)
            .iter()
            .map(|&(j, _)| (theta[j] - theta[i]).sin())
            .sum();
        *o = omega[i] + gain * pull;
    }
}

/// Standard Kuramoto model on `net` with per-edge gain `K/N`.
pub fn kuramoto_rhs(
    theta: &[f64],
    bank: &OscillatorBank,
    spec: &ProtocolSpec,
    net: &Network,
) -> Vec<f64> {
    let gain = spec.coupling / net.n_agents() as f64;
    let mut out = vec![0.0; theta.len()];
    kuramoto_rhs_into(theta, bank.natural_freq(), gain, net, &mut out);
    out
}

/// Writes both stages of the extended model.
///
/// Frequency stage: `ϑ̇_i = −Σ a^ϑ_ij (ϑ_i − ϑ_j) + φ̈_i(t)`.
/// Phase stage: `θ̇_i = (K/N) Σ a^θ_ij sin(θ_j − θ_i) + ϑ_i`.
#[allow(clippy::too_many_arguments)]
fn extended_rhs_into(
    vartheta: &[f64],
    theta: &[f64],
    t: f64,
    bank: &OscillatorBank,
    gain: f64,
    freq_net: &Network,
    phase_net: &Network,
    d_vartheta: &mut [f64],
    d_theta: &mut [f64],
) {
    static_consensus_rhs_into(vartheta, freq_net, d_vartheta);
    for (i, d) in d_vartheta.iter_mut().enumerate() {
        *d += bank.disturbance_at(i, t);
    }
    for (i, d) in d_theta.iter_mut().enumerate() {
        let pull: f64 = phase_net
            .in_neighbors(i)
            .iter()
            .map(|&(j, a)| a * (theta[j] - theta[i]).sin())
            .sum();
        *d = gain * pull + vartheta[i];
    }
}

/// Extended Kuramoto model; returns `(ϑ̇, θ̇)`.
pub fn extended_kuramoto_rhs(
    vartheta: &[f64],
    theta: &[f64],
    t: f64,
    bank: &OscillatorBank,
    spec: &ProtocolSpec,
    freq_net: &Network,
    phase_net: &Network,
) -> (Vec<f64>, Vec<f64>) {
    let n = theta.len();
    let gain = spec.coupling / n as f64;
    let mut dv = vec![0.0; n];
    let mut dt = vec![0.0; n];
    extended_rhs_into(
        vartheta, theta, t, bank, gain, freq_net, phase_net, &mut dv, &mut dt,
    );
    (dv, dt)
}

/// Initial state at `t₀ = 0`: `θ(0) = φ₀`, and for the extended model also
/// `ϑ(0) = ω`.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialState {
    pub theta: Vec<f64>,
    pub vartheta: Option<Vec<f64>>,
}

pub fn initialize(spec: &ProtocolSpec, bank: &OscillatorBank) -> InitialState {
    InitialState {
        theta: bank.initial_phase().to_vec(),
        vartheta: (spec.kind == ProtocolKind::ExtendedKuramoto)
            .then(|| bank.natural_freq().to_vec()),
    }
}

// ---------------------------------------------------------------------------
// Assembled system
// ---------------------------------------------------------------------------

/// A protocol bound to its oscillators and networks, ready to integrate.
#[derive(Debug, Clone)]
pub struct System {
    kind: ProtocolKind,
    bank: OscillatorBank,
    spec: ProtocolSpec,
    net: Network,
    freq_net: Network,
    phase_net: Network,
    input: InputRate,
}

impl System {
    pub fn new(
        bank: &OscillatorBank,
        spec: &ProtocolSpec,
        net: &Network,
    ) -> Result<Self, DynamicsError> {
        let n = net.n_agents();
        check_len("oscillator bank", n, bank.n_agents())?;
        if spec.kind.is_phase_model() && !(spec.coupling.is_finite() && spec.coupling > 0.0) {
            return Err(DynamicsError::InvalidCoupling(spec.kind, spec.coupling));
        }
        let freq_net = spec.freq_weights.clone().unwrap_or_else(|| net.clone());
        let phase_net = spec
            .phase_weights
            .clone()
            .unwrap_or_else(|| net.unit_weights());
        if spec.kind == ProtocolKind::ExtendedKuramoto {
            check_len("frequency-stage network", n, freq_net.n_agents())?;
            check_len("phase-stage network", n, phase_net.n_agents())?;
            if !freq_net.is_connected() {
                return Err(DynamicsError::FrequencyNetworkDisconnected);
            }
            let w = phase_net.weights();
            for i in 0..n {
                for j in 0..n {
                    let value = w[(i, j)];
                    if value != 0.0 && value != 1.0 {
                        return Err(DynamicsError::NonBinaryPhaseWeight { i, j, value });
                    }
                }
            }
        }
        Ok(Self {
            kind: spec.kind,
            bank: bank.clone(),
            spec: spec.clone(),
            net: net.clone(),
            freq_net,
            phase_net,
            input: InputRate::Constant(bank.natural_freq().to_vec()),
        })
    }

    /// Replaces the dynamic-consensus input rate (defaults to `u̇ = ω`).
    pub fn with_input_rate(mut self, input: InputRate) -> Self {
        self.input = input;
        self
    }

    pub fn kind(&self) -> ProtocolKind {
        self.kind
    }

    pub fn n_agents(&self) -> usize {
        self.net.n_agents()
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn bank(&self) -> &OscillatorBank {
        &self.bank
    }

    pub fn spec(&self) -> &ProtocolSpec {
        &self.spec
    }

    pub fn frequency_network(&self) -> &Network {
        &self.freq_net
    }

    pub fn phase_network(&self) -> &Network {
        &self.phase_net
    }

    /// Length of the stacked state vector.
    pub fn dimension(&self) -> usize {
        match self.kind {
            ProtocolKind::ExtendedKuramoto => 2 * self.n_agents(),
            _ => self.n_agents(),
        }
    }

    pub fn initial_state(&self) -> Vec<f64> {
        let init = initialize(&self.spec, &self.bank);
        match init.vartheta {
            Some(mut v) => {
                v.extend_from_slice(&init.theta);
                v
            }
            None => init.theta,
        }
    }

    /// Stacked right-hand side.
    pub fn rhs(&self, t: f64, state: &[f64], out: &mut [f64]) {
        let n = self.n_agents();
        let gain = self.spec.coupling / n as f64;
        match self.kind {
            ProtocolKind::StaticConsensus => static_consensus_rhs_into(state, &self.net, out),
            ProtocolKind::DynamicConsensus => {
                self.input.fill(t, out);
                for (i, o) in out.iter_mut().enumerate() {
                    *o -= self
                        .net
                        .in_neighbors(i)
                        .iter()
                        .map(|&(j, a)| a * (state[i] - state[j]))
                        .sum::<f64>();
                }
            }
            ProtocolKind::Kuramoto => {
                kuramoto_rhs_into(state, self.bank.natural_freq(), gain, &self.net, out)
            }
            ProtocolKind::ExtendedKuramoto => {
                let (vartheta, theta) = state.split_at(n);
                let (dv, dt) = out.split_at_mut(n);
                extended_rhs_into(
                    vartheta,
                    theta,
                    t,
                    &self.bank,
                    gain,
                    &self.freq_net,
                    &self.phase_net,
                    dv,
                    dt,
                );
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Integration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorSettings {
    pub step: f64,
    pub horizon: f64,
    /// Largest accepted step; [`DEFAULT_STEP`] unless raised explicitly.
    pub max_step: f64,
}

impl IntegratorSettings {
    pub fn new(step: f64, horizon: f64) -> Self {
        Self {
            step,
            horizon,
            max_step: DEFAULT_STEP,
        }
    }

    /// Number of steps on the uniform grid.
    pub fn steps(&self) -> Result<usize, DynamicsError> {
        if !(self.step.is_finite() && self.step > 0.0) {
            return Err(DynamicsError::InvalidStep(self.step));
        }
        if self.step > self.max_step * (1.0 + 1e-12) {
            return Err(DynamicsError::StepTooLarge {
                step: self.step,
                limit: self.max_step,
            });
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(DynamicsError::InvalidHorizon(self.horizon));
        }
        let ratio = self.horizon / self.step;
        let steps = ratio.round();
        if (ratio - steps).abs() > 1e-9 * ratio.max(1.0) || steps < 1.0 {
            return Err(DynamicsError::NonIntegralHorizon {
                horizon: self.horizon,
                step: self.step,
            });
        }
        Ok(steps as usize)
    }
}

impl Default for IntegratorSettings {
    fn default() -> Self {
        Self::new(DEFAULT_STEP, 5.0)
    }
}

/// Uniformly sampled solution. `theta` holds the consensus state `x` for the
/// two linear protocols.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub kind: ProtocolKind,
    pub step: f64,
    pub times: Vec<f64>,
    pub theta: Vec<Vec<f64>>,
    pub vartheta: Option<Vec<Vec<f64>>>,
    /// `θ̇` at every grid point.
    pub theta_dot: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn n_agents(&self) -> usize {
        self.theta.first().map_or(0, Vec::len)
    }

    pub fn t_end(&self) -> f64 {
        *self
            .times
            .last()
            .expect("trajectory has at least one sample")
    }

    /// Index of the first grid point at or after `t`.
    pub fn index_at(&self, t: f64) -> usize {
        let k = ((t - self.times[0]) / self.step - 1e-9).ceil();
        (k.max(0.0) as usize).min(self.len() - 1)
    }
}

/// Integrates `system` from `t₀ = 0` with classical RK4.
pub fn integrate(
    system: &System,
    settings: &IntegratorSettings,
) -> Result<Trajectory, DynamicsError> {
    let steps = settings.steps()?;
    let n = system.n_agents();
    let offset = system.dimension() - n;
    let extended = system.kind() == ProtocolKind::ExtendedKuramoto;

    let mut times = Vec::with_capacity(steps + 1);
    let mut theta = Vec::with_capacity(steps + 1);
    let mut theta_dot = Vec::with_capacity(steps + 1);
    let mut vartheta = extended.then(|| Vec::with_capacity(steps + 1));

    integrate_fixed(
        |t, x, dx| system.rhs(t, x, dx),
        0.0,
        &system.initial_state(),
        settings.step,
        steps,
        |_, t, x, dx| {
            times.push(t);
            theta.push(x[offset..].to_vec());
            theta_dot.push(dx[offset..].to_vec());
            if let Some(v) = vartheta.as_mut() {
                v.push(x[..n].to_vec());
            }
        },
    )
    .map_err(DynamicsError::Diverged)?;

    Ok(Trajectory {
        kind: system.kind(),
        step: settings.step,
        times,
        theta,
        vartheta,
        theta_dot,
    })
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), DynamicsError> {
    if expected == got {
        Ok(())
    } else {
        Err(DynamicsError::DimensionMismatch {
            what,
            expected,
            got,
        })
    }
}

fn check_finite(what: &'static str, values: &[f64]) -> Result<(), DynamicsError> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(DynamicsError::NonFinite { what, index }),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn two_agents() -> Network {
        Network::from_neighbor_lists(&[vec![1], vec![0]], 1.0).unwrap()
    }

    fn five_agent_network() -> Network {
        Network::from_neighbor_lists(
            &[
                vec![1, 4],
                vec![0, 2, 3, 4],
                vec![0, 1, 3],
                vec![0, 1, 4],
                vec![0, 3],
            ],
            1.0,
        )
        .unwrap()
    }

    fn five_agent_bank() -> OscillatorBank {
        OscillatorBank::new(
            vec![1.1, 0.8, 1.0, 1.3, 1.05],
            vec![0.5, 2.5, 1.5, 2.0, 4.5],
        )
        .unwrap()
    }

    #[test]
    fn consensus_is_an_equilibrium() {
        let dx = static_consensus_rhs(&[3.0; 5], &five_agent_network());
        assert!(dx.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn static_consensus_by_hand() {
        assert_eq!(
            static_consensus_rhs(&[1.0, 0.0], &two_agents()),
            vec![-1.0, 1.0]
        );
        let omega = five_agent_bank().natural_freq().to_vec();
        let dx = static_consensus_rhs(&omega, &five_agent_network());
        assert_abs_diff_eq!(dx[0], -(2.0 * 1.1 - 0.8 - 1.05), epsilon = 1e-12);
        assert_abs_diff_eq!(dx[0], -0.35, epsilon = 1e-12);
    }

    #[test]
    fn dynamic_consensus_reduces_to_static() {
        let net = five_agent_network();
        let x = [0.3, -1.0, 2.0, 0.7, 0.1];
        assert_eq!(
            dynamic_consensus_rhs(&x, &[0.0; 5], &net),
            static_consensus_rhs(&x, &net)
        );
        let omega = five_agent_bank().natural_freq().to_vec();
        assert_eq!(dynamic_consensus_rhs(&[2.0; 5], &omega, &net), omega);
    }

    #[test]
    fn kuramoto_at_common_phase_runs_at_natural_frequency() {
        let bank = five_agent_bank();
        let dth = kuramoto_rhs(
            &[0.7; 5],
            &bank,
            &ProtocolSpec::kuramoto(5.0),
            &five_agent_network(),
        );
        assert_eq!(dth, bank.natural_freq());
    }

    #[test]
    fn kuramoto_uses_in_neighbors_only() {
        // agent 0 listens to 1; agent 1 listens to nobody
        let net = Network::from_neighbor_lists(&[vec![1], vec![]], 1.0).unwrap();
        let bank = OscillatorBank::zeros(2);
        let d = kuramoto_rhs(&[0.0, PI / 2.0], &bank, &ProtocolSpec::kuramoto(2.0), &net);
        assert_abs_diff_eq!(d[0], 1.0, epsilon = 1e-15);
        assert_eq!(d[1], 0.0);
    }

    #[test]
    fn extended_rhs_at_consensus() {
        let net = five_agent_network();
        let bank = five_agent_bank().with_disturbance(Arc::new(|i, t| 0.1 * i as f64 + t));
        let spec = ProtocolSpec::extended_kuramoto(5.0);
        let (dv, dt) = extended_kuramoto_rhs(
            &[1.2; 5],
            &[0.4; 5],
            2.0,
            &bank,
            &spec,
            &net,
            &net.unit_weights(),
        );
        for i in 0..5 {
            assert_abs_diff_eq!(dv[i], 0.1 * i as f64 + 2.0, epsilon = 1e-15);
            assert_eq!(dt[i], 1.2);
        }
    }

    #[test]
    fn extended_rhs_at_start() {
        let net = five_agent_network();
        let bank = five_agent_bank();
        let spec = ProtocolSpec::extended_kuramoto(5.0);
        let init = initialize(&spec, &bank);
        let (dv, _) = extended_kuramoto_rhs(
            init.vartheta.as_ref().unwrap(),
            &init.theta,
            0.0,
            &bank,
            &spec,
            &net,
            &net.unit_weights(),
        );
        assert_abs_diff_eq!(dv[0], -0.35, epsilon = 1e-12);
    }

    #[test]
    fn initialization() {
        let bank = five_agent_bank();
        let k = initialize(&ProtocolSpec::kuramoto(5.0), &bank);
        assert_eq!(k.theta, vec![0.5, 2.5, 1.5, 2.0, 4.5]);
        assert_eq!(k.vartheta, None);
        let e = initialize(&ProtocolSpec::extended_kuramoto(5.0), &bank);
        assert_eq!(e.vartheta, Some(vec![1.1, 0.8, 1.0, 1.3, 1.05]));
        let z = initialize(&ProtocolSpec::kuramoto(1.0), &OscillatorBank::zeros(3));
        assert_eq!(z.theta, vec![0.0; 3]);
    }

    #[test]
    fn system_validation() {
        let net = five_agent_network();
        let bank = five_agent_bank();
        assert!(matches!(
            System::new(&bank, &ProtocolSpec::kuramoto(0.0), &net),
            Err(DynamicsError::InvalidCoupling(ProtocolKind::Kuramoto, _))
        ));
        assert!(matches!(
            System::new(
                &OscillatorBank::zeros(3),
                &ProtocolSpec::kuramoto(1.0),
                &net
            ),
            Err(DynamicsError::DimensionMismatch { .. })
        ));
        let mut spec = ProtocolSpec::extended_kuramoto(1.0);
        spec.phase_weights = Some(net.scaled(0.5).unwrap());
        assert!(matches!(
            System::new(&bank, &spec, &net),
            Err(DynamicsError::NonBinaryPhaseWeight { .. })
        ));
        let mut spec = ProtocolSpec::extended_kuramoto(1.0);
        spec.freq_weights = Some(
            Network::from_neighbor_lists(&[vec![1], vec![0], vec![3], vec![4], vec![3]], 1.0)
                .unwrap(),
        );
        assert_eq!(
            System::new(&bank, &spec, &net).unwrap_err(),
            DynamicsError::FrequencyNetworkDisconnected
        );
        assert!(OscillatorBank::new(vec![1.0], vec![1.0, 2.0]).is_err());
        assert!(OscillatorBank::new(vec![f64::NAN, 1.0], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn settings_validation() {
        assert_eq!(IntegratorSettings::new(0.01, 5.0).steps(), Ok(500));
        assert!(matches!(
            IntegratorSettings::new(0.02, 5.0).steps(),
            Err(DynamicsError::StepTooLarge { .. })
        ));
        let mut relaxed = IntegratorSettings::new(0.02, 5.0);
        relaxed.max_step = 0.05;
        assert_eq!(relaxed.steps(), Ok(250));
        assert!(matches!(
            IntegratorSettings::new(0.003, 5.0).steps(),
            Err(DynamicsError::NonIntegralHorizon { .. })
        ));
        assert!(IntegratorSettings::new(0.01, 0.0).steps().is_err());
        assert!(IntegratorSettings::new(-0.01, 1.0).steps().is_err());
    }

    #[test]
    fn trajectory_records_grid_and_derivatives() {
        let net = five_agent_network();
        let system = System::new(
            &five_agent_bank(),
            &ProtocolSpec::extended_kuramoto(5.0),
            &net,
        )
        .unwrap();
        let traj = integrate(&system, &IntegratorSettings::new(0.01, 1.0)).unwrap();
        assert_eq!(traj.len(), 101);
        assert_eq!(traj.theta[0], vec![0.5, 2.5, 1.5, 2.0, 4.5]);
        assert_eq!(
            traj.vartheta.as_ref().unwrap()[0],
            vec![1.1, 0.8, 1.0, 1.3, 1.05]
        );
        for w in traj.times.windows(2) {
            assert_abs_diff_eq!(w[1] - w[0], 0.01, epsilon = 1e-12);
        }
        // recorded derivative matches a fresh evaluation
        let k = 37;
        let mut state = traj.vartheta.as_ref().unwrap()[k].clone();
        state.extend_from_slice(&traj.theta[k]);
        let mut out = vec![0.0; 10];
        system.rhs(traj.times[k], &state, &mut out);
        assert_eq!(&out[5..], traj.theta_dot[k].as_slice());
        assert_eq!(traj.index_at(0.37), 37);
    }

    #[test]
    fn two_agent_static_consensus_closed_form() {
        let bank = OscillatorBank::new(vec![0.0, 0.0], vec![1.0, 0.0]).unwrap();
        let system = System::new(&bank, &ProtocolSpec::static_consensus(), &two_agents()).unwrap();
        let traj = integrate(&system, &IntegratorSettings::new(0.01, 5.0)).unwrap();
        // x(t) = 0.5 ± 0.5 e^{-2t}
        let last = traj.theta.last().unwrap();
        let decay = 0.5 * (-10f64).exp();
        assert_abs_diff_eq!(last[0], 0.5 + decay, epsilon = 1e-9);
        assert_abs_diff_eq!(last[1], 0.5 - decay, epsilon = 1e-9);
    }

    #[test]
    fn divergence_is_reported() {
        let input = InputRate::Function(Arc::new(|t, out: &mut [f64]| {
            out.iter_mut()
                .for_each(|o| *o = if t > 0.5 { f64::INFINITY } else { 0.0 })
        }));
        let system = System::new(
            &OscillatorBank::zeros(2),
            &ProtocolSpec::dynamic_consensus(),
            &two_agents(),
        )
        .unwrap()
        .with_input_rate(input);
        match integrate(&system, &IntegratorSettings::new(0.01, 1.0)) {
            Err(DynamicsError::Diverged(t)) => assert!((0.5..=0.52).contains(&t)),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
