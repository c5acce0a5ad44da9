//! Scenario files: TOML documents describing a network, its oscillators, the
//! protocol, the integration grid and optionally a pilot-tone simulation.
//!
//! Agent indices in neighbor lists are 1-based, as in the usual tabulated
//! form; they are converted to 0-based internally.

use std::f64::consts::TAU;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;
use toml::Spanned;

use crate::dynamics::{
    integrate, DynamicsError, IntegratorSettings, OscillatorBank, ProtocolKind, ProtocolSpec,
    System, Trajectory, DEFAULT_STEP,
};
use crate::graph::{GraphError, Network};
use crate::icas::{IcasConfig, IcasGains, MeasurementNoise, ToEstimator, Transceiver};

/// Five-agent reference network, standard Kuramoto model.
pub const BUNDLED_KURAMOTO: &str = include_str!("../fixtures/five_agent_kuramoto.toml");
/// Five-agent reference network, extended Kuramoto model.
pub const BUNDLED_EXTENDED: &str = include_str!("../fixtures/five_agent_extended.toml");
/// Five-agent reference network, pilot-tone synchronization.
pub const BUNDLED_ICAS: &str = include_str!("../fixtures/five_agent_icas.toml");

/// Names accepted by [`Scenario::bundled`].
pub const BUNDLED_NAMES: [&str; 3] = ["kuramoto", "extended", "icas"];

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{0}")]
    Parse(String),

    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },

    #[error("{0}")]
    Unlocated(String),

    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("unknown bundled scenario `{0}` (available: kuramoto, extended, icas)")]
    UnknownBundled(String),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    name: Option<String>,
    network: RawNetwork,
    oscillators: RawOscillators,
    protocol: RawProtocol,
    #[serde(default)]
    integrator: RawIntegrator,
    #[serde(default)]
    output: RawOutput,
    icas: Option<RawIcas>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNetwork {
    neighbors: Spanned<Vec<Vec<i64>>>,
    #[serde(default = "one")]
    weight: Spanned<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOscillators {
    natural_freq: Spanned<Vec<f64>>,
    initial_phase: Option<Spanned<Vec<f64>>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProtocol {
    kind: Spanned<String>,
    #[serde(default = "zero")]
    coupling: Spanned<f64>,
    freq_neighbors: Option<Spanned<Vec<Vec<i64>>>>,
    freq_weight: Option<Spanned<f64>>,
    phase_neighbors: Option<Spanned<Vec<Vec<i64>>>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawIntegrator {
    #[serde(default = "default_step")]
    step: Spanned<f64>,
    #[serde(default = "default_horizon")]
    horizon: Spanned<f64>,
    #[serde(default)]
    allow_large_step: bool,
    fit_window: Option<Spanned<Vec<f64>>>,
}

impl Default for RawIntegrator {
    fn default() -> Self {
        Self {
            step: default_step(),
            horizon: default_horizon(),
            allow_large_step: false,
            fit_window: None,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    #[serde(default = "default_trajectory")]
    trajectory: String,
    #[serde(default = "default_metrics")]
    metrics: String,
    #[serde(default = "default_records")]
    icas_records: String,
}

impl Default for RawOutput {
    fn default() -> Self {
        Self {
            trajectory: default_trajectory(),
            metrics: default_metrics(),
            icas_records: default_records(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawIcas {
    #[serde(default = "default_tones")]
    tones: Spanned<i64>,
    repetition_freq: Spanned<Vec<f64>>,
    initial_repetition_phase: Option<Spanned<Vec<f64>>>,
    carrier_freq: Option<Spanned<Vec<f64>>>,
    tone_duration: Spanned<f64>,
    #[serde(default = "one")]
    cfo_sampling: Spanned<f64>,
    #[serde(default = "one")]
    to_sampling: Spanned<f64>,
    #[serde(default = "one")]
    k_carrier: Spanned<f64>,
    #[serde(default = "one")]
    k_repetition: Spanned<f64>,
    #[serde(default = "one")]
    a_frequency: Spanned<f64>,
    #[serde(default = "one")]
    a_phase: Spanned<f64>,
    #[serde(default)]
    estimator: Option<Spanned<String>>,
    #[serde(default)]
    cfo_sigma: f64,
    #[serde(default)]
    to_sigma: f64,
    #[serde(default)]
    seed: u64,
}

fn zero() -> Spanned<f64> {
    Spanned::new(0..0, 0.0)
}

fn one() -> Spanned<f64> {
    Spanned::new(0..0, 1.0)
}

fn default_step() -> Spanned<f64> {
    Spanned::new(0..0, DEFAULT_STEP)
}

fn default_horizon() -> Spanned<f64> {
    Spanned::new(0..0, 5.0)
}

fn default_tones() -> Spanned<i64> {
    Spanned::new(0..0, 1000)
}

fn default_trajectory() -> String {
    "trajectory.csv".into()
}

fn default_metrics() -> String {
    "metrics.txt".into()
}

fn default_records() -> String {
    "icas.csv".into()
}

/// Output file names, relative to the output directory.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputPaths {
    pub trajectory: PathBuf,
    pub metrics: PathBuf,
    pub icas_records: PathBuf,
}

/// A validated scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    /// 0-based in-neighbor lists.
    pub neighbors: Vec<Vec<usize>>,
    pub weight: f64,
    pub network: Network,
    pub bank: OscillatorBank,
    pub protocol: ProtocolSpec,
    pub integrator: IntegratorSettings,
    pub fit_window: Option<(f64, f64)>,
    pub output: OutputPaths,
    pub icas: Option<IcasConfig>,
}

struct Source<'a> {
    text: &'a str,
}

impl Source<'_> {
    fn line(&self, span: &Range<usize>) -> usize {
        let end = span.start.min(self.text.len());
        self.text[..end].matches('\n').count() + 1
    }

    fn invalid(&self, span: Range<usize>, message: impl Into<String>) -> ScenarioError {
        if span.is_empty() && span.start == 0 {
            ScenarioError::Unlocated(message.into())
        } else {
            ScenarioError::Invalid {
                line: self.line(&span),
                message: message.into(),
            }
        }
    }

    fn neighbor_lists(
        &self,
        raw: &Spanned<Vec<Vec<i64>>>,
    ) -> Result<Vec<Vec<usize>>, ScenarioError> {
        let n = raw.get_ref().len() as i64;
        raw.get_ref()
            .iter()
            .enumerate()
            .map(|(i, list)| {
                list.iter()
                    .map(|&j| {
                        if j < 1 || j > n {
                            Err(self.invalid(
                                raw.span(),
                                format!(
                                    "agent {} lists neighbor {j}, valid indices are 1..={n}",
                                    i + 1
                                ),
                            ))
                        } else {
                            Ok((j - 1) as usize)
                        }
                    })
                    .collect()
            })
            .collect()
    }

    fn network(
        &self,
        raw: &Spanned<Vec<Vec<i64>>>,
        weight: f64,
    ) -> Result<(Vec<Vec<usize>>, Network), ScenarioError> {
        let lists = self.neighbor_lists(raw)?;
        let net = Network::from_neighbor_lists(&lists, weight)
            .map_err(|e| self.invalid(raw.span(), one_based(e)))?;
        if !net.is_connected() {
            return Err(self.invalid(raw.span(), one_based(GraphError::Disconnected)));
        }
        Ok((lists, net))
    }

    fn sized(
        &self,
        raw: &Spanned<Vec<f64>>,
        what: &str,
        n: usize,
    ) -> Result<Vec<f64>, ScenarioError> {
        let v = raw.get_ref();
        if v.len() != n {
            return Err(self.invalid(
                raw.span(),
                format!("{what} has {} entries, the network has {n} agents", v.len()),
            ));
        }
        if let Some(k) = v.iter().position(|x| !x.is_finite()) {
            return Err(self.invalid(raw.span(), format!("{what}[{}] is not finite", k + 1)));
        }
        Ok(v.clone())
    }
}

/// Graph errors speak 0-based indices; config users think 1-based.
fn one_based(e: GraphError) -> String {
    match e {
        GraphError::SelfLoop(i) => format!("agent {} lists itself as a neighbor", i + 1),
        GraphError::Disconnected => "network is not connected (no agent reaches all others)".into(),
        other => other.to_string(),
    }
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        let raw: RawScenario =
            toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        let src = Source { text };

        let weight = *raw.network.weight.get_ref();
        let (neighbors, network) = src.network(&raw.network.neighbors, weight)?;
        let n = network.n_agents();

        let freq = src.sized(&raw.oscillators.natural_freq, "natural_freq", n)?;
        let phase = match &raw.oscillators.initial_phase {
            Some(p) => src.sized(p, "initial_phase", n)?,
            None => vec![0.0; n],
        };
        let bank = OscillatorBank::new(freq, phase)
            .map_err(|e| ScenarioError::Unlocated(e.to_string()))?;

        let p = &raw.protocol;
        let kind: ProtocolKind = p
            .kind
            .get_ref()
            .parse()
            .map_err(|e: String| src.invalid(p.kind.span(), e))?;
        let mut protocol = ProtocolSpec {
            kind,
            coupling: *p.coupling.get_ref(),
            freq_weights: None,
            phase_weights: None,
        };
        if kind.is_phase_model() && !(protocol.coupling > 0.0 && protocol.coupling.is_finite()) {
            return Err(src.invalid(
                p.coupling.span(),
                format!("{kind} needs a positive `coupling`"),
            ));
        }
        let extended_only = [
            (
                p.freq_neighbors.as_ref().map(Spanned::span),
                "freq_neighbors",
            ),
            (p.freq_weight.as_ref().map(Spanned::span), "freq_weight"),
            (
                p.phase_neighbors.as_ref().map(Spanned::span),
                "phase_neighbors",
            ),
        ];
        if kind != ProtocolKind::ExtendedKuramoto {
            if let Some((Some(span), key)) = extended_only.iter().find(|(s, _)| s.is_some()) {
                return Err(src.invalid(
                    span.clone(),
                    format!("`{key}` only applies to extended_kuramoto"),
                ));
            }
        } else {
            let fw = p.freq_weight.as_ref().map_or(weight, |w| *w.get_ref());
            protocol.freq_weights = Some(match &p.freq_neighbors {
                Some(lists) => {
                    let (_, net) = src.network(lists, fw)?;
                    check_agents(&src, lists, net.n_agents(), n)?;
                    net
                }
                None => network.unit_weights().scaled(fw).map_err(|e| {
                    src.invalid(p.freq_weight.as_ref().unwrap().span(), e.to_string())
                })?,
            });
            if let Some(lists) = &p.phase_neighbors {
                let ls = src.neighbor_lists(lists)?;
                check_agents(&src, lists, ls.len(), n)?;
                protocol.phase_weights = Some(
                    Network::from_neighbor_lists(&ls, 1.0)
                        .map_err(|e| src.invalid(lists.span(), one_based(e)))?,
                );
            }
        }

        let ig = &raw.integrator;
        let mut integrator = IntegratorSettings::new(*ig.step.get_ref(), *ig.horizon.get_ref());
        if ig.allow_large_step {
            integrator.max_step = f64::INFINITY;
        }
        integrator.steps().map_err(|e| match e {
            DynamicsError::InvalidHorizon(_) | DynamicsError::NonIntegralHorizon { .. } => {
                src.invalid(ig.horizon.span(), e.to_string())
            }
            _ => src.invalid(ig.step.span(), e.to_string()),
        })?;
        let fit_window =
            match &ig.fit_window {
                None => None,
                Some(w) => match w.get_ref().as_slice() {
                    &[a, b] if a < b && a >= 0.0 && b <= integrator.horizon + 1e-9 => Some((a, b)),
                    _ => return Err(src.invalid(
                        w.span(),
                        format!(
                            "fit_window must be [start, end] with 0 <= start < end <= horizon ({})",
                            integrator.horizon
                        ),
                    )),
                },
            };

        let icas = raw
            .icas
            .as_ref()
            .map(|ic| build_icas(&src, ic, &network, &bank))
            .transpose()?;

        Ok(Scenario {
            name: raw.name.unwrap_or_else(|| "scenario".into()),
            neighbors,
            weight,
            network,
            bank,
            protocol,
            integrator,
            fit_window,
            output: OutputPaths {
                trajectory: raw.output.trajectory.into(),
                metrics: raw.output.metrics.into(),
                icas_records: raw.output.icas_records.into(),
            },
            icas,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn bundled(name: &str) -> Result<Self, ScenarioError> {
        let text = match name {
            "kuramoto" => BUNDLED_KURAMOTO,
            "extended" => BUNDLED_EXTENDED,
            "icas" => BUNDLED_ICAS,
            other => return Err(ScenarioError::UnknownBundled(other.into())),
        };
        Self::from_toml_str(text)
    }

    pub fn n_agents(&self) -> usize {
        self.network.n_agents()
    }

    pub fn system(&self) -> Result<System, DynamicsError> {
        System::new(&self.bank, &self.protocol, &self.network)
    }

    pub fn integrate(&self) -> Result<Trajectory, DynamicsError> {
        integrate(&self.system()?, &self.integrator)
    }
}

fn check_agents(
    src: &Source,
    raw: &Spanned<Vec<Vec<i64>>>,
    got: usize,
    n: usize,
) -> Result<(), ScenarioError> {
    if got == n {
        Ok(())
    } else {
        Err(src.invalid(
            raw.span(),
            format!("lists {got} agents, the network has {n}"),
        ))
    }
}

fn build_icas(
    src: &Source,
    ic: &RawIcas,
    network: &Network,
    bank: &OscillatorBank,
) -> Result<IcasConfig, ScenarioError> {
    let n = network.n_agents();
    let rep = src.sized(&ic.repetition_freq, "repetition_freq", n)?;
    let rep_phase = match &ic.initial_repetition_phase {
        Some(p) => src.sized(p, "initial_repetition_phase", n)?,
        None => vec![0.0; n],
    };
    let carrier = match &ic.carrier_freq {
        Some(c) => src.sized(c, "carrier_freq", n)?,
        None => bank.natural_freq().to_vec(),
    };
    let tones = *ic.tones.get_ref();
    if tones < 2 {
        return Err(src.invalid(ic.tones.span(), "tones must be at least 2"));
    }
    let estimator = match ic.estimator.as_ref() {
        None => ToEstimator::default(),
        Some(s) => match s.get_ref().as_str() {
            "correction_aware" => ToEstimator::CorrectionAware,
            "edge_difference" => ToEstimator::EdgeDifference,
            other => return Err(src.invalid(
                s.span(),
                format!(
                    "unknown estimator `{other}` (expected correction_aware or edge_difference)"
                ),
            )),
        },
    };
    let transceivers = (0..n)
        .map(|i| Transceiver {
            carrier_freq: carrier[i],
            repetition_freq: rep[i],
            tone_duration: *ic.tone_duration.get_ref(),
            cfo_sampling: *ic.cfo_sampling.get_ref(),
            to_sampling: *ic.to_sampling.get_ref(),
            initial_carrier_phase: bank.initial_phase()[i],
            initial_repetition_phase: rep_phase[i].rem_euclid(TAU),
        })
        .collect();
    let config = IcasConfig {
        transceivers,
        network: network.clone(),
        gains: IcasGains {
            k_carrier: *ic.k_carrier.get_ref(),
            k_repetition: *ic.k_repetition.get_ref(),
            a_frequency: *ic.a_frequency.get_ref(),
            a_phase: *ic.a_phase.get_ref(),
        },
        estimator,
        noise: MeasurementNoise {
            cfo_sigma: ic.cfo_sigma,
            to_sigma: ic.to_sigma,
            seed: ic.seed,
        },
        tones: tones as usize,
    };
    config.validate().map_err(|e| {
        let span = match &e {
            crate::icas::IcasError::UnstableGain { stage, .. } => match *stage {
                "carrier" => ic.k_carrier.span(),
                "repetition-frequency" => ic.a_frequency.span(),
                _ => ic.k_repetition.span(),
            },
            _ => ic.tone_duration.span(),
        };
        src.invalid(span, e.to_string())
    })?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_scenarios_load() {
        for name in BUNDLED_NAMES {
            let s = Scenario::bundled(name).unwrap();
            assert_eq!(s.n_agents(), 5);
            assert_eq!(s.neighbors[0], vec![1, 4]);
        }
        assert!(Scenario::bundled("kuramoto").unwrap().icas.is_none());
        assert!(Scenario::bundled("icas").unwrap().icas.is_some());
        assert!(matches!(
            Scenario::bundled("nope"),
            Err(ScenarioError::UnknownBundled(_))
        ));
    }

    #[test]
    fn bundled_kuramoto_scenario() {
        let s = Scenario::bundled("kuramoto").unwrap();
        assert_eq!(s.bank.natural_freq(), &[1.1, 0.8, 1.0, 1.3, 1.05]);
        assert_eq!(s.bank.initial_phase(), &[0.5, 2.5, 1.5, 2.0, 4.5]);
        assert_eq!(s.protocol.kind, ProtocolKind::Kuramoto);
        // K/N = 1
        assert_eq!(s.protocol.coupling / 5.0, 1.0);
        assert_eq!(s.integrator.step, 0.01);
        assert_eq!(s.integrator.horizon, 5.0);
    }

    const MINIMAL: &str = r#"
[network]
neighbors = [[2], [1]]

[oscillators]
natural_freq = [1.0, 1.1]

[protocol]
kind = "kuramoto"
coupling = 2.0
"#;

    #[test]
    fn minimal_defaults() {
        let s = Scenario::from_toml_str(MINIMAL).unwrap();
        assert_eq!(s.bank.initial_phase(), &[0.0, 0.0]);
        assert_eq!(s.integrator, IntegratorSettings::new(0.01, 5.0));
        assert_eq!(s.output.trajectory, PathBuf::from("trajectory.csv"));
        assert_eq!(s.fit_window, None);
    }

    fn err_line(text: &str) -> (Option<usize>, String) {
        match Scenario::from_toml_str(text).unwrap_err() {
            ScenarioError::Invalid { line, message } => (Some(line), message),
            other => (None, other.to_string()),
        }
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let broken = MINIMAL.replace("coupling = 2.0", "coupling = = 2.0");
        let msg = Scenario::from_toml_str(&broken).unwrap_err().to_string();
        assert!(msg.contains("line 10"), "{msg}");
        let unknown = MINIMAL.replace("coupling = 2.0", "coupling = 2.0\ncuopling = 1.0");
        let msg = Scenario::from_toml_str(&unknown).unwrap_err().to_string();
        assert!(msg.contains("line 11") && msg.contains("cuopling"), "{msg}");
    }

    #[test]
    fn semantic_errors_carry_line_numbers() {
        let (line, msg) = err_line(&MINIMAL.replace("[[2], [1]]", "[[2], [3]]"));
        assert_eq!(line, Some(3));
        assert!(msg.contains("valid indices are 1..=2"), "{msg}");
        let (line, msg) = err_line(&MINIMAL.replace("[1.0, 1.1]", "[1.0, 1.1, 1.2]"));
        assert_eq!(line, Some(6));
        assert!(msg.contains("3 entries"), "{msg}");
        let (line, _) = err_line(&MINIMAL.replace("\"kuramoto\"", "\"kuramotto\""));
        assert_eq!(line, Some(9));
        let (line, msg) = err_line(&MINIMAL.replace("[[2], [1]]", "[[1], [1]]"));
        assert_eq!(line, Some(3));
        assert!(msg.contains("agent 1 lists itself"), "{msg}");
    }

    #[test]
    fn rejects_disconnected_network() {
        let text = MINIMAL
            .replace("[[2], [1]]", "[[2], [1], [4], [3]]")
            .replace("[1.0, 1.1]", "[1.0, 1.1, 1.0, 1.0]");
        let (line, msg) = err_line(&text);
        assert_eq!(line, Some(3));
        assert!(msg.contains("not connected"), "{msg}");
    }

    #[test]
    fn integrator_limits() {
        let text = format!("{MINIMAL}\n[integrator]\nstep = 0.05\nhorizon = 5.0\n");
        let (line, msg) = err_line(&text);
        assert_eq!(line, Some(13));
        assert!(msg.contains("ceiling"), "{msg}");
        let text = format!(
            "{MINIMAL}\n[integrator]\nstep = 0.05\nhorizon = 5.0\nallow_large_step = true\n"
        );
        assert_eq!(
            Scenario::from_toml_str(&text).unwrap().integrator.steps(),
            Ok(100)
        );
        let text = format!("{MINIMAL}\n[integrator]\nhorizon = 5.0\nfit_window = [4.0, 6.0]\n");
        assert_eq!(err_line(&text).0, Some(14));
        let text = format!("{MINIMAL}\n[integrator]\nhorizon = 5.0\nfit_window = [3.0, 5.0]\n");
        assert_eq!(
            Scenario::from_toml_str(&text).unwrap().fit_window,
            Some((3.0, 5.0))
        );
    }

    #[test]
    fn extended_options() {
        let text = MINIMAL.replace("\"kuramoto\"", "\"extended_kuramoto\"") + "freq_weight = 0.5\n";
        let s = Scenario::from_toml_str(&text).unwrap();
        assert_eq!(s.protocol.freq_weights.as_ref().unwrap().weight(0, 1), 0.5);
        let text = MINIMAL.to_string() + "freq_weight = 0.5\n";
        let (line, msg) = err_line(&text);
        assert_eq!(line, Some(11));
        assert!(msg.contains("only applies"), "{msg}");
    }

    #[test]
    fn icas_section() {
        let text = format!(
            "{MINIMAL}\n[icas]\ntones = 50\nrepetition_freq = [6.283185307179586, 6.4]\ntone_duration = 0.1\na_frequency = 0.25\n"
        );
        let s = Scenario::from_toml_str(&text).unwrap();
        let ic = s.icas.unwrap();
        assert_eq!(ic.tones, 50);
        assert_eq!(ic.transceivers[1].carrier_freq, 1.1);
        assert_eq!(ic.estimator, ToEstimator::CorrectionAware);
        let unstable = text.replace("a_frequency = 0.25", "a_frequency = 1.0");
        let (line, msg) = err_line(&unstable);
        assert_eq!(line, Some(16));
        assert!(msg.contains("unstable"), "{msg}");
    }
}
