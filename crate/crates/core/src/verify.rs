//! Built-in reproduction suite for the bundled five-agent scenario and the
//! property checks that back the protocol claims.

use std::f64::consts::TAU;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analysis::{
    self, balanced_projection_norm, bound_arbitrary, bound_dynamic, branch_index,
    default_fit_window, fit_consensus, max_mutual_difference, phase_error, AgreementTransform,
    FrequencyMean,
};
use crate::dynamics::{
    integrate, IntegratorSettings, OscillatorBank, ProtocolKind, ProtocolSpec, System,
};
use crate::graph::Network;
use crate::icas::{run_icas, IcasConfig, IcasGains, MeasurementNoise, ToEstimator, Transceiver};
use crate::nodac::Nodac;
use crate::scenario::Scenario;

#[derive(Debug, Clone, PartialEq)]
pub struct CriterionResult {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl CriterionResult {
    /// `PASS [3] name (12 ms): detail`.
    pub fn line(&self) -> String {
        format!(
            "{} [{}] {} ({} ms): {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.elapsed.as_millis(),
            self.detail
        )
    }
}

/// Inputs of the suite. The phase-model scenarios default to the bundled
/// five-agent network.
#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub seed: u64,
    pub kuramoto: Scenario,
    pub extended: Scenario,
    pub icas: Scenario,
}

impl VerifyOptions {
    pub fn bundled(seed: u64) -> Self {
        Self {
            seed,
            kuramoto: Scenario::bundled("kuramoto").expect("bundled scenario parses"),
            extended: Scenario::bundled("extended").expect("bundled scenario parses"),
            icas: Scenario::bundled("icas").expect("bundled scenario parses"),
        }
    }
}

pub const CRITERIA: [&str; 10] = [
    "spectral reproduction",
    "error bound",
    "standard Kuramoto run",
    "extended Kuramoto run",
    "consensus-frequency discrepancy",
    "NODAC polynomial tracking",
    "dynamic-consensus bound dominance",
    "agreement/disagreement decomposition",
    "pilot-tone synchronization",
    "small-angle equivalence",
];

type Check = Result<(bool, String), String>;

fn timed(id: u8, check: impl FnOnce() -> Check) -> CriterionResult {
    let start = Instant::now();
    let outcome = check();
    let elapsed = start.elapsed();
    let (passed, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
    CriterionResult {
        id,
        name: CRITERIA[id as usize - 1],
        passed,
        detail,
        elapsed,
    }
}

/// Adds a runtime limit to a check.
fn within(limit: Duration, mut r: CriterionResult) -> CriterionResult {
    if r.elapsed > limit {
        r.passed = false;
        r.detail
            .push_str(&format!("; runtime over {} ms", limit.as_millis()));
    }
    r
}

pub fn run_criterion(id: u8, opts: &VerifyOptions) -> Option<CriterionResult> {
    let seed = opts.seed.wrapping_mul(1000).wrapping_add(id as u64);
    Some(match id {
        1 => within(
            Duration::from_secs(1),
            timed(1, || spectral(&opts.kuramoto)),
        ),
        2 => timed(2, || bound(&opts.kuramoto)),
        3 => within(
            Duration::from_secs(5),
            timed(3, || kuramoto_run(&opts.kuramoto)),
        ),
        4 => within(
            Duration::from_secs(5),
            timed(4, || extended_run(&opts.extended)),
        ),
        5 => timed(5, || frequency_discrepancy(&opts.kuramoto)),
        6 => timed(6, || nodac_tracking(seed, 50)),
        7 => timed(7, || bound_dominance(seed, 100)),
        8 => timed(8, || decomposition(&opts.kuramoto)),
        9 => timed(9, || icas_sync(&opts.icas)),
        10 => timed(10, || small_angle(seed, 12)),
        _ => return None,
    })
}

pub fn run_all(opts: &VerifyOptions) -> Vec<CriterionResult> {
    (1..=10).filter_map(|id| run_criterion(id, opts)).collect()
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

const GAMMA_REF: [f64; 5] = [0.6527, 0.2670, 0.0890, 0.3264, 0.6231];

fn spectral(s: &Scenario) -> Check {
    let sp = s.network.spectral().map_err(err)?;
    let gamma_dev = if sp.gamma_l.len() == GAMMA_REF.len() {
        sp.gamma_l
            .iter()
            .zip(GAMMA_REF)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    } else {
        f64::INFINITY
    };
    let null = (sp.gamma_l.transpose() * &sp.laplacian).amax();
    let ok = gamma_dev < 1e-3 && (sp.lambda2 - 2.382).abs() < 1e-3 && null < 1e-10;
    Ok((
        ok,
        format!(
            "gamma_l = {:?}, max deviation {gamma_dev:.2e}, lambda2 = {:.6}, |gamma^T L| = {null:.1e}",
            sp.gamma_l.iter().map(|g| (g * 1e5).round() / 1e5).collect::<Vec<_>>(),
            sp.lambda2
        ),
    ))
}

/// Spectral data of the network the Kuramoto coupling acts on.
fn coupled_spectral(s: &Scenario) -> Result<crate::graph::SpectralData, String> {
    let gain = s.protocol.coupling / s.n_agents() as f64;
    s.network
        .unit_weights()
        .scaled(gain)
        .map_err(err)?
        .spectral()
        .map_err(err)
}

fn bound(s: &Scenario) -> Check {
    let sp = coupled_spectral(s)?;
    let b = bound_arbitrary(s.bank.natural_freq(), &sp, FrequencyMean::Weighted).map_err(err)?;
    let ok = (b.value - 0.1528).abs() < 1e-3;
    Ok((
        ok,
        format!(
            "bound = {:.6}, mean frequency = {:.6}, lambda2 = {:.6}",
            b.value,
            b.mean_frequency.unwrap_or(f64::NAN),
            b.rate
        ),
    ))
}

fn kuramoto_run(s: &Scenario) -> Check {
    let mut s = s.clone();
    s.protocol.kind = ProtocolKind::Kuramoto;
    let traj = s.integrate().map_err(err)?;
    let window = s.fit_window.unwrap_or_else(|| default_fit_window(&traj));
    let line = fit_consensus(&traj, window).map_err(err)?;
    let errors = phase_error(&traj, &line);
    let k0 = traj.index_at(window.0);
    let max_err = errors[k0..]
        .iter()
        .flatten()
        .fold(0.0, |a: f64, e| a.max(e.abs()));
    let mutual = traj.theta[k0..]
        .iter()
        .map(|th| max_mutual_difference(th))
        .fold((0.0, 0, 0), |a, m| if m.0 > a.0 { m } else { a });
    let bound = bound_arbitrary(
        s.bank.natural_freq(),
        &coupled_spectral(&s)?,
        FrequencyMean::Weighted,
    )
    .map_err(err)?
    .value;
    let t_end = traj.t_end();
    let branches: Vec<i64> = traj
        .theta
        .last()
        .expect("non-empty trajectory")
        .iter()
        .map(|&th| branch_index(th, line.at(t_end)))
        .collect();
    let checks = [
        (line.slope - 1.072).abs() < 2e-3,
        (line.intercept - 0.2281).abs() < 2e-2,
        (max_err - 0.0627).abs() < 5e-3,
        max_err <= bound,
        (mutual.0 - 0.1172).abs() < 5e-3,
        (mutual.1, mutual.2) == (1, 3),
        branches.len() == 5 && branches[4] == 1 && branches[..4].iter().all(|&b| b == 0),
    ];
    Ok((
        checks.iter().all(|&c| c),
        format!(
            "slope = {:.5}, intercept = {:.5}, max error = {max_err:.5} (bound {bound:.5}), \
             max mutual = {:.5} (agents {} & {}), branches = {branches:?}",
            line.slope,
            line.intercept,
            mutual.0,
            mutual.1 + 1,
            mutual.2 + 1
        ),
    ))
}

fn extended_run(s: &Scenario) -> Check {
    let mut s = s.clone();
    s.protocol.kind = ProtocolKind::ExtendedKuramoto;
    let traj = s.integrate().map_err(err)?;
    let window = s.fit_window.unwrap_or_else(|| default_fit_window(&traj));
    let line = fit_consensus(&traj, window).map_err(err)?;
    let errors = phase_error(&traj, &line);
    let k0 = traj.index_at(window.0);
    let max_err = errors[k0..]
        .iter()
        .flatten()
        .fold(0.0, |a: f64, e| a.max(e.abs()));
    let vartheta = traj
        .vartheta
        .as_ref()
        .and_then(|v| v.last().cloned())
        .ok_or("no frequency stage in trajectory")?;
    let freq_dev = vartheta
        .iter()
        .map(|v| (v - 1.072).abs())
        .fold(0.0, f64::max);
    let ok = freq_dev < 1e-3 && max_err < 5e-3 && (line.intercept - 0.2905).abs() < 2e-2;
    Ok((
        ok,
        format!(
            "max |vartheta - 1.072| = {freq_dev:.2e}, max error = {max_err:.2e}, intercept = {:.5}",
            line.intercept
        ),
    ))
}

fn frequency_discrepancy(s: &Scenario) -> Check {
    let mut s = s.clone();
    s.protocol.kind = ProtocolKind::Kuramoto;
    s.integrator.horizon = 20.0;
    let traj = s.integrate().map_err(err)?;
    let line = fit_consensus(&traj, default_fit_window(&traj)).map_err(err)?;
    let sp = s.network.spectral().map_err(err)?;
    let mean = analysis::consensus_frequency(&sp.gamma_l, s.bank.natural_freq()).map_err(err)?;
    let gap = (line.slope - mean).abs();
    Ok((
        gap < 1e-4,
        format!(
            "slope = {:.7}, weighted mean = {mean:.7}, gap = {gap:.2e} over 20 s",
            line.slope
        ),
    ))
}

/// Random balanced, connected network on `n ≥ 2` agents: a directed cycle
/// through a random permutation plus random symmetric edges, all with
/// weights in `[0.5, 1.5)`.
pub fn random_balanced_network(rng: &mut impl Rng, n: usize) -> Network {
    let mut w = DMatrix::zeros(n, n);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let c = rng.random_range(0.5..1.5);
    for k in 0..n {
        w[(order[(k + 1) % n], order[k])] += c;
    }
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(0.4) {
                let a = rng.random_range(0.5..1.5);
                w[(i, j)] += a;
                w[(j, i)] += a;
            }
        }
    }
    Network::from_weights(w).expect("no self loops by construction")
}

fn nodac_tracking(seed: u64, instances: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for inst in 0..instances {
        let n = rng.random_range(2..=5);
        let net = random_balanced_network(&mut rng, n);
        let max_row = (0..n)
            .map(|i| net.in_neighbors(i).iter().map(|&(_, a)| a).sum::<f64>())
            .fold(0.0, f64::max);
        let net = net.scaled(1.0 / (max_row + 1.0)).map_err(err)?;
        let degree = inst % 2;
        let nodac = Nodac::new(net, degree + 1).map_err(err)?;
        let c: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let d: Vec<f64> = (0..n)
            .map(|_| {
                if degree == 1 {
                    rng.random_range(-1.0..1.0)
                } else {
                    0.0
                }
            })
            .collect();
        let mut state = nodac.initial_state();
        for k in 0..=500 {
            let kf = k as f64;
            let u: Vec<f64> = (0..n).map(|i| c[i] + d[i] * kf).collect();
            state = nodac.step(&state, &u).map_err(err)?;
            if k == 500 {
                let mean = analysis::arithmetic_mean(&u);
                for x in state.top_stage() {
                    worst = worst.max((x - mean).abs());
                }
            }
        }
    }
    Ok((
        worst < 1e-6,
        format!("{instances} random balanced instances, worst tracking error after 500 steps = {worst:.2e}"),
    ))
}

fn bound_dominance(seed: u64, runs: usize) -> Check {
    const SLACK: f64 = 1e-9;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let settings = IntegratorSettings::new(0.01, 5.0);
    let mut min_margin = f64::INFINITY;
    let mut violations = 0;
    for _ in 0..runs {
        let n = rng.random_range(2..=5);
        let net = random_balanced_network(&mut rng, n);
        let sp = net.spectral().map_err(err)?;
        let x0: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let u0: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let rate: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bank = OscillatorBank::new(rate.clone(), x0.clone()).map_err(err)?;
        let system = System::new(&bank, &ProtocolSpec::dynamic_consensus(), &net).map_err(err)?;
        let traj = integrate(&system, &settings).map_err(err)?;
        let sup = balanced_projection_norm(&rate);
        let (u0_mean, rate_mean) = (
            analysis::arithmetic_mean(&u0),
            analysis::arithmetic_mean(&rate),
        );
        for (t, x) in traj.times.iter().zip(&traj.theta) {
            let reference = u0_mean + rate_mean * t;
            let b = bound_dynamic(&x0, &u0, sup, &sp, *t).map_err(err)?.value;
            for xi in x {
                let margin = b - (xi - reference).abs();
                min_margin = min_margin.min(margin);
                if margin < -SLACK {
                    violations += 1;
                }
            }
        }
    }
    Ok((
        violations == 0,
        format!("{runs} runs, {violations} violations, smallest margin = {min_margin:.3e}"),
    ))
}

fn decomposition(s: &Scenario) -> Check {
    let net = &s.network;
    let sp = net.spectral().map_err(err)?;
    let omega = s.bank.natural_freq().to_vec();
    let phi0 = s.bank.initial_phase().to_vec();
    let settings = IntegratorSettings::new(0.01, 5.0);
    let steps = settings.steps().map_err(err)?;
    let bank = OscillatorBank::new(omega.clone(), phi0.clone()).map_err(err)?;
    let system = System::new(&bank, &ProtocolSpec::dynamic_consensus(), net).map_err(err)?;
    let traj = integrate(&system, &settings).map_err(err)?;

    let tr = AgreementTransform::new(&sp.gamma_l);
    let t = tr.matrix();
    let orth = (t.transpose() * &t - DMatrix::identity(t.nrows(), t.ncols())).amax();

    let mut max_agr: f64 = 0.0;
    let mut direct = Vec::with_capacity(traj.len());
    for (time, x) in traj.times.iter().zip(&traj.theta) {
        let u: Vec<f64> = (0..x.len()).map(|i| bank.phase_at(i, *time)).collect();
        let reference = analysis::consensus_reference(&sp.gamma_l, &u).map_err(err)?;
        let e: Vec<f64> = x.iter().map(|xi| xi - reference).collect();
        let (agr, dis) = tr.split(&e);
        max_agr = max_agr.max(agr.abs());
        direct.push(dis);
    }
    let rate = omega.clone();
    let reduced = analysis::integrate_disagreement(
        &tr,
        &sp.laplacian,
        &direct[0],
        |_, out: &mut [f64]| out.copy_from_slice(&rate),
        settings.step,
        steps,
    );
    let dis_gap = direct
        .iter()
        .zip(&reduced)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max);
    let ok = max_agr < 1e-8 && dis_gap < 1e-6 && orth < 1e-10;
    Ok((
        ok,
        format!(
            "max |e_agr| = {max_agr:.2e}, max e_dis gap = {dis_gap:.2e}, |T^T T - I| = {orth:.2e}"
        ),
    ))
}

fn two_agent_icas() -> Result<IcasConfig, String> {
    let mut a = Transceiver::new(1.0, TAU, 0.1);
    let mut b = Transceiver::new(1.1, TAU * 1.02, 0.1);
    a.initial_repetition_phase = 0.3;
    b.initial_repetition_phase = 1.2;
    Ok(IcasConfig {
        transceivers: vec![a, b],
        network: Network::from_neighbor_lists(&[vec![1], vec![0]], 1.0).map_err(err)?,
        gains: IcasGains {
            k_carrier: 1.0,
            k_repetition: 1.0,
            a_frequency: 0.25,
            a_phase: 1.0,
        },
        estimator: ToEstimator::CorrectionAware,
        noise: MeasurementNoise::default(),
        tones: 1000,
    })
}

fn identical_icas(n: usize) -> Result<IcasConfig, String> {
    Ok(IcasConfig {
        transceivers: vec![Transceiver::new(0.7, TAU, 0.1); n],
        network: Network::all_to_all(n, 1.0).map_err(err)?,
        gains: IcasGains {
            a_frequency: 0.1,
            ..IcasGains::default()
        },
        estimator: ToEstimator::CorrectionAware,
        noise: MeasurementNoise::default(),
        tones: 100,
    })
}

fn icas_sync(s: &Scenario) -> Check {
    let mut five = s.icas.clone().ok_or("scenario has no [icas] section")?;
    five.noise = MeasurementNoise::default();
    let mut detail = Vec::new();
    let mut ok = true;
    for (label, config) in [("2 agents", two_agent_icas()?), ("5 agents", five)] {
        if config.tones > 1000 {
            return Err(format!("{label}: {} tones exceed 1000", config.tones));
        }
        let m = run_icas(&config).map_err(err)?.metrics;
        ok &= m.final_mutual_cfo < 1e-4 && m.final_mutual_to_phase < 1e-3;
        detail.push(format!(
            "{label}: cfo {:.1e} rad/s, to phase {:.1e} rad",
            m.final_mutual_cfo, m.final_mutual_to_phase
        ));
    }
    let config = identical_icas(4)?;
    let run = run_icas(&config).map_err(err)?;
    let exact = run.records.iter().all(|r| {
        r.mutual_cfo == 0.0
            && r.mutual_to_phase == 0.0
            && r.carrier_rate == 0.7
            && r.rep_freq == TAU
    });
    ok &= exact && !run.records.is_empty();
    detail.push(format!("identical clocks exact: {exact}"));
    Ok((ok, detail.join("; ")))
}

/// Kuramoto against linear dynamic consensus on all-to-all networks with
/// `K = 1`, compared over the final second of 10 s runs.
fn small_angle(seed: u64, per_size: usize) -> Check {
    const COUPLING: f64 = 1.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let settings = IntegratorSettings::new(0.01, 10.0);
    let (mut worst, mut widest): (f64, f64) = (0.0, 0.0);
    let (mut compared, mut skipped) = (0, 0);
    for n in 3..=5 {
        let gain = COUPLING / n as f64;
        let binary = Network::all_to_all(n, 1.0).map_err(err)?;
        let weighted = Network::all_to_all(n, gain).map_err(err)?;
        for _ in 0..per_size {
            let omega: Vec<f64> = (0..n)
                .map(|_| 1.0 + rng.random_range(-0.045..0.045))
                .collect();
            let phi0: Vec<f64> = (0..n).map(|_| rng.random_range(-0.05..0.05)).collect();
            let bank = OscillatorBank::new(omega, phi0).map_err(err)?;
            let kura = integrate(
                &System::new(&bank, &ProtocolSpec::kuramoto(COUPLING), &binary).map_err(err)?,
                &settings,
            )
            .map_err(err)?;
            let lin = integrate(
                &System::new(&bank, &ProtocolSpec::dynamic_consensus(), &weighted).map_err(err)?,
                &settings,
            )
            .map_err(err)?;
            let k0 = kura.index_at(kura.t_end() - 1.0);
            let steady = kura.theta[k0..]
                .iter()
                .map(|th| max_mutual_difference(th).0)
                .fold(0.0, f64::max);
            if steady >= 0.1 {
                skipped += 1;
                continue;
            }
            compared += 1;
            widest = widest.max(steady);
            for (a, b) in kura.theta[k0..].iter().zip(&lin.theta[k0..]) {
                let gap = DVector::from_column_slice(a) - DVector::from_column_slice(b);
                worst = worst.max(gap.amax());
            }
        }
    }
    Ok((
        compared > 0 && worst < 2e-4,
        format!("{compared} runs compared ({skipped} above 0.1 rad skipped), largest steady angle = {widest:.3}, max gap = {worst:.2e}"),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_networks_are_balanced_and_connected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let n = rng.random_range(2..=5);
            let net = random_balanced_network(&mut rng, n);
            assert!(net.is_balanced());
            assert!(net.is_connected());
        }
    }

    #[test]
    fn unknown_criterion() {
        assert!(run_criterion(0, &VerifyOptions::bundled(1)).is_none());
        assert!(run_criterion(11, &VerifyOptions::bundled(1)).is_none());
    }

    #[test]
    fn result_line_format() {
        let r = CriterionResult {
            id: 2,
            name: CRITERIA[1],
            passed: false,
            detail: "x".into(),
            elapsed: Duration::from_millis(3),
        };
        assert_eq!(r.line(), "FAIL [2] error bound (3 ms): x");
    }

    #[test]
    fn runtime_limit_fails_slow_checks() {
        let r = timed(1, || Ok((true, "fine".into())));
        let r = within(
            Duration::ZERO,
            CriterionResult {
                elapsed: Duration::from_millis(1),
                ..r
            },
        );
        assert!(!r.passed);
    }

    #[test]
    fn spectral_and_bound_pass_on_bundled() {
        let opts = VerifyOptions::bundled(1);
        for id in [1, 2] {
            let r = run_criterion(id, &opts).unwrap();
            assert!(r.passed, "{}", r.line());
        }
    }
}
