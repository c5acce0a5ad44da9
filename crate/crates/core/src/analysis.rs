//! Post-processing of trajectories: phase errors, consensus fits, error
//! bounds and the agreement/disagreement split of consensus errors.

use std::f64::consts::{PI, TAU};
use std::fmt;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::dynamics::Trajectory;
use crate::graph::{IncidenceData, SpectralData};
use crate::integrator::integrate_fixed;

/// Below this magnitude the collective phase is undefined.
pub const ORDER_PARAMETER_EPS: f64 = 1e-12;

/// Minimum number of samples a consensus fit accepts.
pub const MIN_FIT_SAMPLES: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error(
        "fit window [{start}, {end}] holds {samples} samples, need at least {MIN_FIT_SAMPLES}"
    )]
    WindowTooShort {
        start: f64,
        end: f64,
        samples: usize,
    },

    #[error("fit window [{start}, {end}] lies outside the trajectory [{t0}, {t1}]")]
    WindowOutOfRange {
        start: f64,
        end: f64,
        t0: f64,
        t1: f64,
    },

    #[error("collective phase undefined at t = {0} s (order parameter vanishes)")]
    UndefinedPhase(f64),

    #[error("consensus weights sum to zero")]
    ZeroGammaSum,

    #[error("{0}")]
    DimensionMismatch(String),

    #[error("bound requires a balanced network")]
    NotBalanced,

    #[error("bound requires an all-to-all network with uniform weights")]
    NotAllToAll,

    #[error("bound requires a positive rate, got {0}")]
    NonPositiveRate(f64),
}

/// Maps `x` into `[−π, π)` as `((x + π) mod 2π) − π`.
pub fn wrap_phase(x: f64) -> f64 {
    let w = (x + PI).rem_euclid(TAU) - PI;
    // rem_euclid can round up to exactly 2π for tiny negative arguments
    if w >= PI {
        w - TAU
    } else {
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrderParameter {
    pub r: f64,
    /// `None` when `r` is numerically zero.
    pub psi: Option<f64>,
}

/// Magnitude and argument of the mean unit phasor `(1/N) Σ e^{iθ_j}`.
pub fn order_parameter(theta: &[f64]) -> OrderParameter {
    let n = theta.len() as f64;
    let (s, c) = theta
        .iter()
        .fold((0.0, 0.0), |(s, c), &th| (s + th.sin(), c + th.cos()));
    let (s, c) = (s / n, c / n);
    let r = s.hypot(c);
    OrderParameter {
        r,
        psi: (r > ORDER_PARAMETER_EPS).then(|| wrap_phase(s.atan2(c))),
    }
}

pub fn order_parameter_series(traj: &Trajectory) -> Vec<OrderParameter> {
    traj.theta.iter().map(|th| order_parameter(th)).collect()
}

/// `φ̄(t) = slope·t + intercept`, fitted on `window`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsensusLine {
    pub slope: f64,
    /// Wrapped into `[−π, π)`.
    pub intercept: f64,
    pub window: (f64, f64),
}

impl ConsensusLine {
    pub fn at(&self, t: f64) -> f64 {
        self.slope * t + self.intercept
    }
}

/// Ordinary least squares `y ≈ a·t + b`; returns `(a, b)`.
pub fn fit_line(t: &[f64], y: &[f64]) -> (f64, f64) {
    let n = t.len() as f64;
    let tm = t.iter().sum::<f64>() / n;
    let ym = y.iter().sum::<f64>() / n;
    let (mut sty, mut stt) = (0.0, 0.0);
    for (&ti, &yi) in t.iter().zip(y) {
        sty += (ti - tm) * (yi - ym);
        stt += (ti - tm) * (ti - tm);
    }
    let slope = sty / stt;
    (slope, ym - slope * tm)
}

/// Continuous unwrap: successive jumps larger than π are folded by 2π.
pub fn unwrap_phases(phases: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(phases.len());
    let mut offset = 0.0;
    for (k, &p) in phases.iter().enumerate() {
        if k > 0 {
            let jump = p - phases[k - 1];
            if jump > PI {
                offset -= TAU;
            } else if jump < -PI {
                offset += TAU;
            }
        }
        out.push(p + offset);
    }
    out
}

/// Least-squares line through the unwrapped collective phase `ψ(t)` on
/// `window`.
pub fn fit_consensus(
    traj: &Trajectory,
    window: (f64, f64),
) -> Result<ConsensusLine, AnalysisError> {
    let (start, end) = window;
    let (t0, t1) = (traj.times[0], traj.t_end());
    let slack = 1e-9 * traj.step;
    // negated so NaN bounds are rejected too
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(start <= end) || start < t0 - slack || end > t1 + slack {
        return Err(AnalysisError::WindowOutOfRange { start, end, t0, t1 });
    }
    let mut times = Vec::new();
    let mut psi = Vec::new();
    for (t, th) in traj.times.iter().zip(&traj.theta) {
        if *t >= start - slack && *t <= end + slack {
            let op = order_parameter(th);
            psi.push(op.psi.ok_or(AnalysisError::UndefinedPhase(*t))?);
            times.push(*t);
        }
    }
    if times.len() < MIN_FIT_SAMPLES {
        return Err(AnalysisError::WindowTooShort {
            start,
            end,
            samples: times.len(),
        });
    }
    let (slope, intercept) = fit_line(&times, &unwrap_phases(&psi));
    Ok(ConsensusLine {
        slope,
        intercept: wrap_phase(intercept),
        window,
    })
}

/// `e_i(t) = wrap(θ_i(t) − φ̄(t))` at every grid point, indexed `[k][i]`.
pub fn phase_error(traj: &Trajectory, line: &ConsensusLine) -> Vec<Vec<f64>> {
    traj.times
        .iter()
        .zip(&traj.theta)
        .map(|(&t, th)| th.iter().map(|&x| wrap_phase(x - line.at(t))).collect())
        .collect()
}

/// Number of full turns separating `theta` from the consensus phase `reference`.
pub fn branch_index(theta: f64, reference: f64) -> i64 {
    ((theta - reference) / TAU).round() as i64
}

/// Largest wrapped pairwise difference `|wrap(θ_i − θ_j)|` and its pair `(i, j)`, `i < j`.
pub fn max_mutual_difference(theta: &[f64]) -> (f64, usize, usize) {
    let mut best = (0.0, 0, 0);
    for i in 0..theta.len() {
        for j in i + 1..theta.len() {
            let d = wrap_phase(theta[i] - theta[j]).abs();
            if d > best.0 {
                best = (d, i, j);
            }
        }
    }
    best
}

/// Settling detector parameters for [`detect_transient_end`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransientCriterion {
    pub tolerance: f64,
    pub span: f64,
}

impl Default for TransientCriterion {
    fn default() -> Self {
        Self {
            tolerance: 1e-5,
            span: 0.5,
        }
    }
}

/// First grid time after which the maximum mutual wrapped difference varies
/// by less than the tolerance over every sliding window of the given span.
/// `None` if the trajectory never settles that way.
pub fn detect_transient_end(traj: &Trajectory, criterion: TransientCriterion) -> Option<f64> {
    let spread: Vec<f64> = traj
        .theta
        .iter()
        .map(|th| max_mutual_difference(th).0)
        .collect();
    let w = (criterion.span / traj.step).round().max(1.0) as usize;
    let len = spread.len();
    if len <= w {
        return None;
    }
    let mut last_bad = None;
    for k in 0..len - w {
        let win = &spread[k..=k + w];
        let hi = win.iter().cloned().fold(f64::MIN, f64::max);
        let lo = win.iter().cloned().fold(f64::MAX, f64::min);
        if hi - lo >= criterion.tolerance {
            last_bad = Some(k);
        }
    }
    match last_bad {
        None => Some(traj.times[0]),
        Some(k) if k + 1 + w < len => Some(traj.times[k + 1]),
        Some(_) => None,
    }
}

/// Default fit window: from the detected transient end (but no earlier than
/// 60% of the horizon) to the end; the last 20% if the run never settles.
pub fn default_fit_window(traj: &Trajectory) -> (f64, f64) {
    let (t0, t1) = (traj.times[0], traj.t_end());
    let span = t1 - t0;
    match detect_transient_end(traj, TransientCriterion::default()) {
        Some(tp) => (tp.max(t0 + 0.6 * span), t1),
        None => (t0 + 0.8 * span, t1),
    }
}

/// How `ω̄` is formed inside the bounds for non-balanced graphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FrequencyMean {
    /// `γᵀω / Σγ`.
    #[default]
    Weighted,
    /// `(1/N) Σ ω`.
    Arithmetic,
}

/// Consensus frequency `γᵀω / Σ γ_i`.
pub fn consensus_frequency(gamma: &DVector<f64>, omega: &[f64]) -> Result<f64, AnalysisError> {
    check_len("omega", gamma.len(), omega.len())?;
    let sum = gamma.sum();
    if sum.abs() < 1e-300 {
        return Err(AnalysisError::ZeroGammaSum);
    }
    Ok(gamma.dot(&DVector::from_column_slice(omega)) / sum)
}

pub fn arithmetic_mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundKind {
    /// Dynamic consensus on balanced graphs, time dependent.
    Dynamic,
    /// Kuramoto, all-to-all coupling.
    AllToAll,
    /// Kuramoto, arbitrary connected graph using `γ_L`.
    Arbitrary,
    /// Kuramoto with a supplied consensus direction.
    Gamma,
}

impl BoundKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Dynamic => "dynamic",
            Self::AllToAll => "alltoall",
            Self::Arbitrary => "arbitrary",
            Self::Gamma => "gamma",
        }
    }
}

impl fmt::Display for BoundKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorBoundReport {
    pub kind: BoundKind,
    pub value: f64,
    /// The rate (λ₂ or λ̂₂) in the denominator.
    pub rate: f64,
    /// The consensus direction used, if any.
    pub gamma: Option<Vec<f64>>,
    /// `ω̄` used, if any.
    pub mean_frequency: Option<f64>,
}

/// Time-dependent bound on `|e_i(t)|` for dynamic consensus on a balanced
/// network:
/// `sqrt((e^{−λ̂₂t}‖Πx₀‖ + sup‖Πu̇‖/λ̂₂)² + ((1/√N) Σ (x₀ − u₀))²)`.
pub fn bound_dynamic(
    x0: &[f64],
    u0: &[f64],
    u_dot_sup_proj: f64,
    spectral: &SpectralData,
    t: f64,
) -> Result<ErrorBoundReport, AnalysisError> {
    let n = spectral.n_agents();
    check_len("x0", n, x0.len())?;
    check_len("u0", n, u0.len())?;
    if !spectral.balanced {
        return Err(AnalysisError::NotBalanced);
    }
    let rate = spectral.lambda2_hat;
    if rate <= 0.0 {
        return Err(AnalysisError::NonPositiveRate(rate));
    }
    let px0 = balanced_projection_norm(x0);
    let disagreement = (-rate * t).exp() * px0 + u_dot_sup_proj / rate;
    let init: f64 = x0.iter().zip(u0).map(|(x, u)| x - u).sum::<f64>() / (n as f64).sqrt();
    Ok(ErrorBoundReport {
        kind: BoundKind::Dynamic,
        value: disagreement.hypot(init),
        rate,
        gamma: None,
        mean_frequency: None,
    })
}

/// `‖(I − 11ᵀ/N) v‖`.
pub fn balanced_projection_norm(v: &[f64]) -> f64 {
    let m = arithmetic_mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>().sqrt()
}

/// Steady bound for all-to-all coupling: `‖ω − 1ω̄‖ / λ̂₂`, `ω̄` the plain mean.
pub fn bound_alltoall(
    omega: &[f64],
    spectral: &SpectralData,
) -> Result<ErrorBoundReport, AnalysisError> {
    let n = spectral.n_agents();
    check_len("omega", n, omega.len())?;
    let l = &spectral.laplacian;
    let off = l[(0, 1.min(n - 1))];
    for i in 0..n {
        for j in 0..n {
            if i != j && ((l[(i, j)] - off).abs() > 1e-12 || l[(i, j)] >= 0.0) {
                return Err(AnalysisError::NotAllToAll);
            }
        }
    }
    let rate = spectral.lambda2_hat;
    if rate <= 0.0 {
        return Err(AnalysisError::NonPositiveRate(rate));
    }
    let mean = arithmetic_mean(omega);
    Ok(ErrorBoundReport {
        kind: BoundKind::AllToAll,
        value: balanced_projection_norm(omega) / rate,
        rate,
        gamma: None,
        mean_frequency: Some(mean),
    })
}

/// Steady bound for arbitrary connected graphs:
/// `‖(I − γ_Lγ_Lᵀ)(ω − 1ω̄)‖ / λ₂`.
pub fn bound_arbitrary(
    omega: &[f64],
    spectral: &SpectralData,
    mean: FrequencyMean,
) -> Result<ErrorBoundReport, AnalysisError> {
    let mut report = projected_bound(omega, &spectral.gamma_l, spectral.lambda2, mean)?;
    report.kind = BoundKind::Arbitrary;
    Ok(report)
}

/// Same as [`bound_arbitrary`] with a caller-supplied unit vector `γ`.
pub fn bound_gamma(
    omega: &[f64],
    gamma: &DVector<f64>,
    lambda2: f64,
) -> Result<ErrorBoundReport, AnalysisError> {
    projected_bound(omega, gamma, lambda2, FrequencyMean::Weighted)
}

fn projected_bound(
    omega: &[f64],
    gamma: &DVector<f64>,
    rate: f64,
    mean: FrequencyMean,
) -> Result<ErrorBoundReport, AnalysisError> {
    check_len("omega", gamma.len(), omega.len())?;
    if rate <= 0.0 {
        return Err(AnalysisError::NonPositiveRate(rate));
    }
    let w_bar = match mean {
        FrequencyMean::Weighted => consensus_frequency(gamma, omega)?,
        FrequencyMean::Arithmetic => arithmetic_mean(omega),
    };
    let dev = DVector::from_iterator(omega.len(), omega.iter().map(|w| w - w_bar));
    let projected = &dev - gamma * gamma.dot(&dev);
    Ok(ErrorBoundReport {
        kind: BoundKind::Gamma,
        value: projected.norm() / rate,
        rate,
        gamma: Some(gamma.iter().copied().collect()),
        mean_frequency: Some(w_bar),
    })
}

/// `|γᵀ B̃ W sin(Bᵀθ)|`; vanishes when the coupling forces balance along `γ`.
pub fn residual_gamma(theta: &[f64], incidence: &IncidenceData, gamma: &DVector<f64>) -> f64 {
    let th = DVector::from_column_slice(theta);
    let s = (incidence.incidence.transpose() * th).map(f64::sin);
    let forces = &incidence.incoming * (&incidence.edge_weights * s);
    gamma.dot(&forces).abs()
}

/// Orthogonal `T = [γ R]` with `R` completing the unit vector `γ`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgreementTransform {
    pub gamma: DVector<f64>,
    pub r: DMatrix<f64>,
}

impl AgreementTransform {
    /// Gram–Schmidt over the standard basis, skipping the index of `γ`'s
    /// largest entry.
    pub fn new(gamma: &DVector<f64>) -> Self {
        let n = gamma.len();
        let gamma = gamma / gamma.norm();
        let skip = gamma.iamax();
        let mut basis: Vec<DVector<f64>> = vec![gamma.clone()];
        for idx in (0..n).filter(|&i| i != skip) {
            let mut v = DVector::zeros(n);
            v[idx] = 1.0;
            // two passes keep the basis orthogonal to machine precision
            for _ in 0..2 {
                for b in &basis {
                    let c = b.dot(&v);
                    v -= b * c;
                }
            }
            v /= v.norm();
            basis.push(v);
        }
        let r = DMatrix::from_columns(&basis[1..]);
        Self { gamma, r }
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        let mut t = DMatrix::zeros(self.gamma.len(), self.gamma.len());
        t.set_column(0, &self.gamma);
        t.columns_mut(1, self.r.ncols()).copy_from(&self.r);
        t
    }

    /// `(γᵀe, Rᵀe)`.
    pub fn split(&self, e: &[f64]) -> (f64, Vec<f64>) {
        let e = DVector::from_column_slice(e);
        let dis = self.r.transpose() * &e;
        (self.gamma.dot(&e), dis.iter().copied().collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionReport {
    pub transform: DMatrix<f64>,
    pub e_agr: Vec<f64>,
    pub e_dis: Vec<Vec<f64>>,
}

/// Splits every error sample into its component along `γ_L` and the rest.
pub fn decompose_error(errors: &[Vec<f64>], spectral: &SpectralData) -> DecompositionReport {
    let tr = AgreementTransform::new(&spectral.gamma_l);
    let (e_agr, e_dis) = errors.iter().map(|e| tr.split(e)).unzip();
    DecompositionReport {
        transform: tr.matrix(),
        e_agr,
        e_dis,
    }
}

/// Consensus reference `ū = γᵀu / Σγ`.
pub fn consensus_reference(gamma: &DVector<f64>, u: &[f64]) -> Result<f64, AnalysisError> {
    consensus_frequency(gamma, u)
}

/// Integrates `ė_dis = −RᵀLR e_dis + Rᵀ(u̇ − 1ū̇)` with RK4, `ū̇ = γᵀu̇/Σγ`;
/// returns `e_dis` on the grid `k·h`, `k = 0..=steps`.
pub fn integrate_disagreement<U>(
    transform: &AgreementTransform,
    laplacian: &DMatrix<f64>,
    e_dis0: &[f64],
    u_dot: U,
    step: f64,
    steps: usize,
) -> Vec<Vec<f64>>
where
    U: Fn(f64, &mut [f64]),
{
    let n = transform.gamma.len();
    let r = &transform.r;
    let rt = r.transpose();
    let reduced = -(&rt * laplacian * r);
    let gamma_sum = transform.gamma.sum();
    let mut ud = vec![0.0; n];
    let mut out = Vec::with_capacity(steps + 1);
    integrate_fixed(
        |t, e, de| {
            u_dot(t, &mut ud);
            let u = DVector::from_column_slice(&ud);
            let mean_rate = transform.gamma.dot(&u) / gamma_sum;
            let drive = &rt * u.add_scalar(-mean_rate);
            let d = &reduced * DVector::from_column_slice(e) + drive;
            de.copy_from_slice(d.as_slice());
        },
        0.0,
        e_dis0,
        step,
        steps,
        |_, _, e, _| out.push(e.to_vec()),
    )
    .expect("linear system with finite input stays finite");
    out
}

fn check_len(what: &str, expected: usize, got: usize) -> Result<(), AnalysisError> {
    if expected == got {
        Ok(())
    } else {
        Err(AnalysisError::DimensionMismatch(format!(
            "{what} has length {got}, expected {expected}"
        )))
    }
}
