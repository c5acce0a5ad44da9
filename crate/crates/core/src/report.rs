//! Turning trajectories into metrics, CSV tables and key = value reports.
//!
//! Floats are written with Rust's shortest round-trip formatting, so equal
//! inputs produce byte-identical files.

use std::fmt::Write as _;
use std::io::{self, Write};

use crate::analysis::{
    self, bound_alltoall, bound_arbitrary, bound_dynamic, branch_index, default_fit_window,
    detect_transient_end, fit_consensus, max_mutual_difference, order_parameter, phase_error,
    residual_gamma, AnalysisError, ConsensusLine, FrequencyMean, TransientCriterion,
};
use crate::dynamics::{ProtocolKind, Trajectory};
use crate::graph::{GraphError, SpectralData};
use crate::icas::IcasRun;
use crate::scenario::Scenario;

/// Ordered key = value pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues(pub Vec<(String, String)>);

impl KeyValues {
    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.0.push((key.to_string(), value.to_string()));
    }

    pub fn push_vec(&mut self, key: &str, values: &[f64]) {
        self.push(key, fmt_vec(values));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.0 {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Inverse of [`render`](Self::render); ignores blank and `#` lines.
    pub fn parse(text: &str) -> Self {
        KeyValues(
            text.lines()
                .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
                .filter_map(|l| l.split_once(" = "))
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .collect(),
        )
    }
}

pub fn fmt_vec(values: &[f64]) -> String {
    let parts: Vec<String> = values.iter().map(|v| v.to_string()).collect();
    format!("[{}]", parts.join(", "))
}

/// Steady-state summary of a phase-model run.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSummary {
    pub line: ConsensusLine,
    pub transient_end: Option<f64>,
    /// `γ_Lᵀω / Σγ_L`.
    pub consensus_frequency: f64,
    /// Largest `|e_i(t)|` over the fit window, and its agent.
    pub max_steady_error: f64,
    pub max_error_agent: usize,
    /// Largest wrapped pairwise difference over the fit window and its pair.
    pub max_mutual_difference: f64,
    pub mutual_pair: (usize, usize),
    /// Full turns between each agent and `φ̄` at the end.
    pub branches: Vec<i64>,
    pub bound_arbitrary: f64,
    /// Final-state residual with weights `K/N`.
    pub residual_gamma: f64,
    pub final_order_parameter: f64,
    pub final_vartheta: Option<Vec<f64>>,
}

/// Summary of a linear consensus run against its consensus reference.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSummary {
    pub final_reference: f64,
    pub final_max_error: f64,
    pub final_spread: f64,
    /// Time-dependent bound at the horizon, balanced networks only.
    pub bound_dynamic: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Summary {
    Phase(PhaseSummary),
    Linear(LinearSummary),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationReport {
    pub scenario: String,
    pub kind: ProtocolKind,
    pub n_agents: usize,
    pub step: f64,
    pub horizon: f64,
    pub samples: usize,
    pub summary: Summary,
    /// `e_i(t)` per grid point (phase error or linear consensus error).
    pub errors: Vec<Vec<f64>>,
}

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

/// Consensus reference of a linear run: `γᵀx₀/Σγ` for the static protocol,
/// `γᵀφ(t)/Σγ` for the dynamic one driven by `u = φ`.
fn linear_reference(scenario: &Scenario, spectral: &SpectralData, t: f64) -> f64 {
    let bank = &scenario.bank;
    let u: Vec<f64> = (0..bank.n_agents())
        .map(|i| match scenario.protocol.kind {
            ProtocolKind::StaticConsensus => bank.initial_phase()[i],
            _ => bank.phase_at(i, t),
        })
        .collect();
    analysis::consensus_reference(&spectral.gamma_l, &u).expect("γ of a connected network")
}

pub fn analyze(
    scenario: &Scenario,
    traj: &Trajectory,
    window: Option<(f64, f64)>,
) -> Result<SimulationReport, ReportError> {
    let spectral = scenario.network.spectral()?;
    let (summary, errors) = if scenario.protocol.kind.is_phase_model() {
        let window = window.unwrap_or_else(|| default_fit_window(traj));
        let line = fit_consensus(traj, window)?;
        let errors = phase_error(traj, &line);
        let omega = scenario.bank.natural_freq();
        let k0 = traj.index_at(window.0);

        let mut max_err = (0.0, 0);
        let mut mutual = (0.0, 0, 0);
        for (row, theta) in errors[k0..].iter().zip(&traj.theta[k0..]) {
            for (i, e) in row.iter().enumerate() {
                if e.abs() > max_err.0 {
                    max_err = (e.abs(), i);
                }
            }
            let m = max_mutual_difference(theta);
            if m.0 > mutual.0 {
                mutual = m;
            }
        }
        let last = traj.theta.last().expect("non-empty trajectory");
        let t_end = traj.t_end();
        let coupling = scenario.protocol.coupling / scenario.n_agents() as f64;
        let phase_net = match scenario.protocol.kind {
            ProtocolKind::ExtendedKuramoto => scenario
                .protocol
                .phase_weights
                .clone()
                .unwrap_or_else(|| scenario.network.unit_weights()),
            _ => scenario.network.unit_weights(),
        };
        let summary = PhaseSummary {
            line,
            transient_end: detect_transient_end(traj, TransientCriterion::default()),
            consensus_frequency: analysis::consensus_frequency(&spectral.gamma_l, omega)?,
            max_steady_error: max_err.0,
            max_error_agent: max_err.1,
            max_mutual_difference: mutual.0,
            mutual_pair: (mutual.1, mutual.2),
            branches: last
                .iter()
                .map(|&th| branch_index(th, line.at(t_end)))
                .collect(),
            bound_arbitrary: bound_arbitrary(omega, &spectral, FrequencyMean::Weighted)?.value,
            residual_gamma: residual_gamma(last, &phase_net.incidence(coupling), &spectral.gamma_l),
            final_order_parameter: order_parameter(last).r,
            final_vartheta: traj.vartheta.as_ref().and_then(|v| v.last().cloned()),
        };
        (Summary::Phase(summary), errors)
    } else {
        let errors: Vec<Vec<f64>> = traj
            .times
            .iter()
            .zip(&traj.theta)
            .map(|(&t, x)| {
                let r = linear_reference(scenario, &spectral, t);
                x.iter().map(|xi| xi - r).collect()
            })
            .collect();
        let last = errors.last().expect("non-empty trajectory");
        let x_last = traj.theta.last().expect("non-empty trajectory");
        let hi = x_last.iter().cloned().fold(f64::MIN, f64::max);
        let lo = x_last.iter().cloned().fold(f64::MAX, f64::min);
        let bound = match scenario.protocol.kind {
            ProtocolKind::DynamicConsensus if spectral.balanced => {
                let x0 = scenario.bank.initial_phase();
                let sup = analysis::balanced_projection_norm(scenario.bank.natural_freq());
                bound_dynamic(x0, x0, sup, &spectral, traj.t_end())
                    .ok()
                    .map(|b| b.value)
            }
            ProtocolKind::StaticConsensus if spectral.balanced => {
                let x0 = scenario.bank.initial_phase();
                bound_dynamic(x0, x0, 0.0, &spectral, traj.t_end())
                    .ok()
                    .map(|b| b.value)
            }
            _ => None,
        };
        let summary = LinearSummary {
            final_reference: linear_reference(scenario, &spectral, traj.t_end()),
            final_max_error: last.iter().fold(0.0, |a: f64, e| a.max(e.abs())),
            final_spread: hi - lo,
            bound_dynamic: bound,
        };
        (Summary::Linear(summary), errors)
    };
    Ok(SimulationReport {
        scenario: scenario.name.clone(),
        kind: scenario.protocol.kind,
        n_agents: scenario.n_agents(),
        step: traj.step,
        horizon: traj.t_end(),
        samples: traj.len(),
        summary,
        errors,
    })
}

impl SimulationReport {
    /// Metrics with 1-based agent indices.
    pub fn key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.push("scenario", &self.scenario);
        kv.push("protocol", self.kind);
        kv.push("agents", self.n_agents);
        kv.push("step", self.step);
        kv.push("horizon", self.horizon);
        kv.push("samples", self.samples);
        match &self.summary {
            Summary::Phase(p) => {
                kv.push("fit_window_start", p.line.window.0);
                kv.push("fit_window_end", p.line.window.1);
                kv.push(
                    "transient_end",
                    p.transient_end
                        .map_or("none".to_string(), |t| t.to_string()),
                );
                kv.push("consensus_slope", p.line.slope);
                kv.push("consensus_intercept", p.line.intercept);
                kv.push("consensus_frequency", p.consensus_frequency);
                kv.push("slope_gap", (p.line.slope - p.consensus_frequency).abs());
                kv.push("max_steady_error", p.max_steady_error);
                kv.push("max_error_agent", p.max_error_agent + 1);
                kv.push("max_mutual_difference", p.max_mutual_difference);
                kv.push(
                    "mutual_pair",
                    format!("{}-{}", p.mutual_pair.0 + 1, p.mutual_pair.1 + 1),
                );
                kv.push(
                    "branches",
                    format!(
                        "[{}]",
                        p.branches
                            .iter()
                            .map(i64::to_string)
                            .collect::<Vec<_>>()
                            .join(", ")
                    ),
                );
                kv.push("bound_arbitrary", p.bound_arbitrary);
                kv.push("residual_gamma", p.residual_gamma);
                kv.push("final_order_parameter", p.final_order_parameter);
                if let Some(v) = &p.final_vartheta {
                    kv.push_vec("final_vartheta", v);
                }
            }
            Summary::Linear(l) => {
                kv.push("final_reference", l.final_reference);
                kv.push("final_max_error", l.final_max_error);
                kv.push("final_spread", l.final_spread);
                kv.push(
                    "bound_dynamic",
                    l.bound_dynamic.map_or("n/a".to_string(), |b| b.to_string()),
                );
            }
        }
        kv
    }
}

/// Writes the trajectory table: `time`, per-agent state groups, then `r` and
/// `psi` for phase models (empty `psi` when undefined).
pub fn write_trajectory_csv<W: Write>(
    mut w: W,
    traj: &Trajectory,
    report: &SimulationReport,
) -> io::Result<()> {
    let n = traj.n_agents();
    let phase = traj.kind.is_phase_model();
    let (state, rate) = if phase {
        ("theta", "theta_dot")
    } else {
        ("x", "x_dot")
    };
    let mut header = vec!["time".to_string()];
    header.extend((1..=n).map(|i| format!("{state}_{i}")));
    if traj.vartheta.is_some() {
        header.extend((1..=n).map(|i| format!("vartheta_{i}")));
    }
    header.extend((1..=n).map(|i| format!("{rate}_{i}")));
    header.extend((1..=n).map(|i| format!("error_{i}")));
    if phase {
        header.push("r".into());
        header.push("psi".into());
    }
    writeln!(w, "{}", header.join(","))?;

    let mut row = String::new();
    for k in 0..traj.len() {
        row.clear();
        let _ = write!(row, "{}", traj.times[k]);
        let mut cells = |values: &[f64]| {
            for v in values {
                let _ = write!(row, ",{v}");
            }
        };
        cells(&traj.theta[k]);
        if let Some(v) = &traj.vartheta {
            cells(&v[k]);
        }
        cells(&traj.theta_dot[k]);
        cells(&report.errors[k]);
        if phase {
            let op = order_parameter(&traj.theta[k]);
            let _ = write!(row, ",{},", op.r);
            if let Some(psi) = op.psi {
                let _ = write!(row, "{psi}");
            }
        }
        writeln!(w, "{row}")?;
    }
    Ok(())
}

/// Spectral data and every bound that applies to the scenario.
pub fn bounds_report(scenario: &Scenario) -> Result<KeyValues, ReportError> {
    let s = scenario.network.spectral()?;
    let omega = scenario.bank.natural_freq();
    let mut kv = KeyValues::default();
    kv.push("scenario", &scenario.name);
    kv.push("agents", scenario.n_agents());
    kv.push("edges", scenario.network.edge_count());
    kv.push("balanced", s.balanced);
    kv.push_vec("gamma_l", s.gamma_l.as_slice());
    kv.push_vec(
        "eigenvalues_re",
        &s.eigenvalues.iter().map(|c| c.re).collect::<Vec<_>>(),
    );
    kv.push("lambda2", s.lambda2);
    kv.push("lambda2_modulus", s.lambda2_modulus);
    kv.push("lambda2_hat", s.lambda2_hat);
    kv.push(
        "consensus_frequency",
        analysis::consensus_frequency(&s.gamma_l, omega)?,
    );
    kv.push(
        "arithmetic_mean_frequency",
        analysis::arithmetic_mean(omega),
    );

    // the Kuramoto bounds concern the coupling-weighted network
    let gain = if scenario.protocol.kind.is_phase_model() {
        scenario.protocol.coupling / scenario.n_agents() as f64
    } else {
        1.0
    };
    let coupled = scenario.network.unit_weights().scaled(gain)?.spectral()?;
    kv.push("coupling_gain", gain);
    kv.push("coupled_lambda2", coupled.lambda2);
    kv.push(
        "bound_arbitrary",
        bound_arbitrary(omega, &coupled, FrequencyMean::Weighted)?.value,
    );
    kv.push(
        "bound_arbitrary_arithmetic",
        bound_arbitrary(omega, &coupled, FrequencyMean::Arithmetic)?.value,
    );
    kv.push(
        "bound_alltoall",
        match bound_alltoall(omega, &coupled) {
            Ok(b) => b.value.to_string(),
            Err(e) => format!("n/a ({e})"),
        },
    );
    let x0 = scenario.bank.initial_phase();
    kv.push(
        "bound_dynamic_limit",
        match bound_dynamic(
            x0,
            x0,
            analysis::balanced_projection_norm(omega),
            &s,
            f64::INFINITY,
        ) {
            Ok(b) => b.value.to_string(),
            Err(e) => format!("n/a ({e})"),
        },
    );
    Ok(kv)
}

pub fn write_icas_csv<W: Write>(mut w: W, run: &IcasRun) -> io::Result<()> {
    writeln!(
        w,
        "time,agent,step,carrier_phase,carrier_rate,rep_freq,rep_phase,max_cfo_hat,max_to_hat,mutual_cfo,mutual_to_phase"
    )?;
    for r in &run.records {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.time,
            r.agent + 1,
            r.step,
            r.carrier_phase,
            r.carrier_rate,
            r.rep_freq,
            r.rep_phase,
            r.max_cfo_hat,
            r.max_to_hat.map_or(String::new(), |v| v.to_string()),
            r.mutual_cfo,
            r.mutual_to_phase
        )?;
    }
    Ok(())
}

pub fn icas_key_values(name: &str, run: &IcasRun) -> KeyValues {
    let m = &run.metrics;
    let mut kv = KeyValues::default();
    kv.push("scenario", name);
    kv.push("horizon", m.horizon);
    kv.push("updates", m.updates);
    kv.push("final_mutual_cfo", m.final_mutual_cfo);
    kv.push("final_mutual_to_phase", m.final_mutual_to_phase);
    kv.push("final_edge_offset", m.final_edge_offset);
    kv.push("tail_mutual_cfo", m.tail_mutual_cfo);
    kv.push("tail_mutual_to_phase", m.tail_mutual_to_phase);
    kv.push("carrier_consensus", m.carrier_consensus);
    kv.push("rep_freq_consensus", m.rep_freq_consensus);
    kv
}
