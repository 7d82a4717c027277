//! Empirical measurements of the solver's structural guarantees.
//!
//! Everything here is post-processing over recorded trajectories: policy
//! improvement (value monotonicity in tau), value contraction between two
//! initializations, Wasserstein-2 decay of coupled ensembles, distance of the
//! final ensemble to the Gibbs density, sign conditions on coupled-gap inner
//! products, and the curvature condition yielding the contraction rate kappa.

use crate::model::{gibbs_density, trapezoid, ControlProblem, ModelError};
use crate::policy::{ParticleEnsemble, PolicyError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("empty input series")]
    EmptyInput,
    #[error("initial gap {gap:.3e} is too small to resolve a contraction rate")]
    DegenerateGap { gap: f64 },
    #[error("kappa equals beta; the two-rate bound formula is degenerate")]
    KappaEqualsBeta,
    #[error("condition/mode mismatch: {0}")]
    ModeMismatch(String),
    #[error("coupled trajectories have mismatched shapes: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Exact Wasserstein-2 distance between equal-weight empirical measures on
/// the line: RMS difference of order statistics. Unequal sizes are reduced to
/// the smaller count by quantile subsampling of both sorted samples.
pub fn wasserstein2_1d(samples_a: &[f64], samples_b: &[f64]) -> Result<f64, DiagnosticsError> {
    if samples_a.is_empty() || samples_b.is_empty() {
        return Err(DiagnosticsError::EmptyInput);
    }
    let mut a = samples_a.to_vec();
    let mut b = samples_b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let ms = if a.len() == b.len() {
        a.iter()
            .zip(&b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / a.len() as f64
    } else {
        let n = a.len().min(b.len());
        let pick = |s: &[f64], i: usize| {
            let idx = ((i as f64 + 0.5) / n as f64 * s.len() as f64).floor() as usize;
            s[idx.min(s.len() - 1)]
        };
        (0..n)
            .map(|i| {
                let d = pick(&a, i) - pick(&b, i);
                d * d
            })
            .sum::<f64>()
            / n as f64
    };
    Ok(ms.sqrt())
}

/// Largest decrease of the value between consecutive samples, across probe
/// states. Passes when the worst dip stays at or below `tolerance`.
pub fn monotonicity_check(
    series: &[(f64, Vec<f64>)],
    tolerance: f64,
) -> Result<(bool, f64), DiagnosticsError> {
    if series.len() < 2 {
        return Err(DiagnosticsError::EmptyInput);
    }
    let mut worst = 0.0f64;
    for pair in series.windows(2) {
        let (_, ref prev) = pair[0];
        let (_, ref next) = pair[1];
        if prev.len() != next.len() {
            return Err(DiagnosticsError::ShapeMismatch(
                "probe counts differ between snapshots".into(),
            ));
        }
        for (a, b) in prev.iter().zip(next) {
            worst = worst.max(a - b);
        }
    }
    let worst = worst.max(0.0);
    Ok((worst <= tolerance, worst))
}

#[derive(Debug, Clone)]
pub struct ContractionReport {
    pub taus: Vec<f64>,
    /// RMS gap over probe states per snapshot.
    pub gaps: Vec<f64>,
    pub initial_gap: f64,
    /// Least-squares slope of ln(gap) vs tau where the gap is resolvable;
    /// `None` when the gap vanishes identically.
    pub fitted_rate: Option<f64>,
    /// Whether gap(tau) <= e^{-beta tau} gap(0) (1 + 1e-3) at every sample.
    pub bound_satisfied: bool,
}

/// Compares two value trajectories sampled at the same instants: the RMS gap
/// must contract at least at the discount rate.
pub fn contraction_check(
    taus: &[f64],
    values_a: &[Vec<f64>],
    values_b: &[Vec<f64>],
    beta: f64,
) -> Result<ContractionReport, DiagnosticsError> {
    if taus.is_empty() || taus.len() != values_a.len() || taus.len() != values_b.len() {
        return Err(DiagnosticsError::EmptyInput);
    }
    let mut gaps = Vec::with_capacity(taus.len());
    for (va, vb) in values_a.iter().zip(values_b) {
        if va.len() != vb.len() || va.is_empty() {
            return Err(DiagnosticsError::ShapeMismatch(
                "probe counts differ between the two runs".into(),
            ));
        }
        let ms = va
            .iter()
            .zip(vb)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / va.len() as f64;
        gaps.push(ms.sqrt());
    }
    let initial_gap = gaps[0];
    if initial_gap == 0.0 {
        // Identical initializations: the bound holds trivially and no rate
        // can be fitted.
        let bound_satisfied = gaps.iter().all(|&g| g == 0.0);
        return Ok(ContractionReport {
            taus: taus.to_vec(),
            gaps,
            initial_gap,
            fitted_rate: None,
            bound_satisfied,
        });
    }
    if initial_gap < 1e-6 {
        return Err(DiagnosticsError::DegenerateGap { gap: initial_gap });
    }
    let pts: Vec<(f64, f64)> = taus
        .iter()
        .zip(&gaps)
        .filter(|(_, &g)| g >= 1e-10)
        .map(|(&t, &g)| (t, g.ln()))
        .collect();
    let fitted_rate = linear_slope(&pts);
    let bound_satisfied = taus
        .iter()
        .zip(&gaps)
        .all(|(&t, &g)| g <= (-beta * (t - taus[0])).exp() * initial_gap * (1.0 + 1e-3));
    Ok(ContractionReport {
        taus: taus.to_vec(),
        gaps,
        initial_gap,
        fitted_rate,
        bound_satisfied,
    })
}

/// Least-squares slope of ln(series) against tau over strictly positive
/// entries; `None` with fewer than two usable points.
pub fn log_linear_rate(taus: &[f64], series: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = taus
        .iter()
        .zip(series)
        .filter(|(_, &s)| s > 0.0)
        .map(|(&t, &s)| (t, s.ln()))
        .collect();
    linear_slope(&pts)
}

fn linear_slope(pts: &[(f64, f64)]) -> Option<f64> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let tbar = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let ybar = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0f64, 0.0f64);
    for (t, y) in pts {
        sxx += (t - tbar) * (t - tbar);
        sxy += (t - tbar) * (y - ybar);
    }
    if sxx == 0.0 {
        None
    } else {
        Some(sxy / sxx)
    }
}

/// Wasserstein-2 distance between the ensemble and inverse-CDF samples of the
/// Gibbs density of (p, S), with the CDF accumulated by trapezoid quadrature
/// on `u_grid`.
pub fn gibbs_distance(
    ens: &ParticleEnsemble,
    prob: &ControlProblem,
    p: f64,
    s: f64,
    u_grid: &[f64],
    n_target_samples: usize,
) -> Result<f64, DiagnosticsError> {
    let target = gibbs_inverse_cdf_samples(prob, ens.state_x, p, s, u_grid, n_target_samples)?;
    wasserstein2_1d(&ens.particles, &target)
}

/// Deterministic equal-weight sample of the Gibbs density at quantiles
/// (i + 1/2) / n, by linear interpolation of the cumulative trapezoid CDF.
pub fn gibbs_inverse_cdf_samples(
    prob: &ControlProblem,
    x: f64,
    p: f64,
    s: f64,
    u_grid: &[f64],
    n: usize,
) -> Result<Vec<f64>, DiagnosticsError> {
    if n == 0 || u_grid.len() < 2 {
        return Err(DiagnosticsError::EmptyInput);
    }
    let density = gibbs_density(prob, x, p, s, u_grid)?;
    let mut cdf = Vec::with_capacity(u_grid.len());
    cdf.push(0.0f64);
    let mut acc = 0.0;
    for i in 1..u_grid.len() {
        acc += 0.5 * (density[i] + density[i - 1]) * (u_grid[i] - u_grid[i - 1]);
        cdf.push(acc);
    }
    let total = *cdf.last().unwrap();
    let mut out = Vec::with_capacity(n);
    let mut seg = 0usize;
    for i in 0..n {
        let q = (i as f64 + 0.5) / n as f64 * total;
        while seg + 1 < cdf.len() - 1 && cdf[seg + 1] < q {
            seg += 1;
        }
        let span = cdf[seg + 1] - cdf[seg];
        let w = if span > 0.0 { (q - cdf[seg]) / span } else { 0.0 };
        out.push(u_grid[seg] + w * (u_grid[seg + 1] - u_grid[seg]));
    }
    Ok(out)
}

/// Everything the coupled-gap sign conditions consume, recorded per snapshot
/// on a shared grid: the value, the full dynamics bracket (average Hamiltonian
/// plus entropy bonus in relaxed mode), and the same bracket without the
/// entropy term.
#[derive(Debug, Clone)]
pub struct CoupledTrajectory {
    pub nodes: Vec<f64>,
    pub taus: Vec<f64>,
    pub v: Vec<Vec<f64>>,
    pub bracket_full: Vec<Vec<f64>>,
    pub bracket_h: Vec<Vec<f64>>,
}

/// The six sign conditions: I-III pair the entropy-bearing bracket gap with
/// the value gap and its first/second spatial derivatives; IV-VI do the same
/// with the plain Hamiltonian bracket.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditionKind {
    Mc1,
    Mc2,
    Mc3,
    Mc4,
    Mc5,
    Mc6,
}

impl ConditionKind {
    fn needs_entropy(self) -> bool {
        matches!(self, ConditionKind::Mc1 | ConditionKind::Mc2 | ConditionKind::Mc3)
    }

    /// 0: pair with the value gap, 1: with its x-derivative, 2: with its
    /// second x-derivative.
    fn derivative_order(self) -> usize {
        match self {
            ConditionKind::Mc1 | ConditionKind::Mc4 => 0,
            ConditionKind::Mc2 | ConditionKind::Mc5 => 1,
            ConditionKind::Mc3 | ConditionKind::Mc6 => 2,
        }
    }
}

/// Per-snapshot inner product (grid mean) of the coupled bracket gap against
/// the matching derivative of the value gap; returns the largest positive
/// excursion and the full series. The underlying assumption requires the
/// quantity to stay non-positive.
pub fn mc_condition_check(
    run_a: &CoupledTrajectory,
    run_b: &CoupledTrajectory,
    which: ConditionKind,
    lambda: f64,
) -> Result<(f64, Vec<(f64, f64)>), DiagnosticsError> {
    if which.needs_entropy() && lambda == 0.0 {
        return Err(DiagnosticsError::ModeMismatch(format!(
            "{which:?} involves the entropy term but the temperature is zero"
        )));
    }
    if run_a.nodes != run_b.nodes || run_a.taus != run_b.taus {
        return Err(DiagnosticsError::ShapeMismatch(
            "coupled runs must share grid nodes and snapshot instants".into(),
        ));
    }
    if run_a.taus.is_empty() || run_a.nodes.len() < 5 {
        return Err(DiagnosticsError::EmptyInput);
    }
    fn brackets(run: &CoupledTrajectory, entropy: bool) -> &[Vec<f64>] {
        if entropy {
            &run.bracket_full
        } else {
            &run.bracket_h
        }
    }
    let entropy = which.needs_entropy();
    let h = run_a.nodes[1] - run_a.nodes[0];
    let mut series = Vec::with_capacity(run_a.taus.len());
    let mut max_pos = 0.0f64;
    for (k, &tau) in run_a.taus.iter().enumerate() {
        let db: Vec<f64> = brackets(run_a, entropy)[k]
            .iter()
            .zip(&brackets(run_b, entropy)[k])
            .map(|(a, b)| a - b)
            .collect();
        let dv: Vec<f64> = run_a.v[k]
            .iter()
            .zip(&run_b.v[k])
            .map(|(a, b)| a - b)
            .collect();
        let (lhs, rhs) = match which.derivative_order() {
            0 => (db.clone(), dv.clone()),
            1 => (stencil_dx(&db, h), stencil_dx(&dv, h)),
            _ => (stencil_dxx(&db, h), stencil_dxx(&dv, h)),
        };
        let inner = lhs
            .iter()
            .zip(&rhs)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / lhs.len() as f64;
        max_pos = max_pos.max(inner);
        series.push((tau, inner));
    }
    Ok((max_pos.max(0.0), series))
}

fn stencil_dx(v: &[f64], h: f64) -> Vec<f64> {
    let n = v.len();
    let mut out = vec![0.0; n];
    for j in 1..n - 1 {
        out[j] = (v[j + 1] - v[j - 1]) / (2.0 * h);
    }
    out[0] = (-3.0 * v[0] + 4.0 * v[1] - v[2]) / (2.0 * h);
    out[n - 1] = (3.0 * v[n - 1] - 4.0 * v[n - 2] + v[n - 3]) / (2.0 * h);
    out
}

fn stencil_dxx(v: &[f64], h: f64) -> Vec<f64> {
    let n = v.len();
    let h2 = h * h;
    let mut out = vec![0.0; n];
    for j in 1..n - 1 {
        out[j] = (v[j + 1] - 2.0 * v[j] + v[j - 1]) / h2;
    }
    out[0] = (2.0 * v[0] - 5.0 * v[1] + 4.0 * v[2] - v[3]) / h2;
    out[n - 1] = (2.0 * v[n - 1] - 5.0 * v[n - 2] + 4.0 * v[n - 3] - v[n - 4]) / h2;
    out
}

/// Contraction rate from the curvature condition at state `x`: the negative
/// of the worst (largest) value over the control grid of
/// `f_uu + L b_uu + L^2 |sigma_uu| + L sigma_u^2 + 2 eps_bar`.
/// Linear-quadratic problems take the analytic path: all curvature terms
/// vanish except `f_uu = -N`, giving `N - 2 eps_bar` exactly.
pub fn eigen_condition_kappa(
    prob: &ControlProblem,
    l_bound: f64,
    eps_bar: f64,
    x: f64,
    u_grid: &[f64],
) -> f64 {
    if let Some(lq) = prob.lq {
        return -(-lq.n + 2.0 * eps_bar);
    }
    let mut worst = f64::NEG_INFINITY;
    for &u in u_grid {
        let h = 1e-4 * (1.0 + u.abs());
        let second = |g: &crate::model::StateControlFn| {
            (g(x, u + h) - g(x, u - h)) / (2.0 * h)
        };
        let f_uu = second(&prob.payoff_grad_u);
        let b_uu = second(&prob.drift_grad_u);
        let s_uu = second(&prob.diffusion_grad_u);
        let s_u = (prob.diffusion_grad_u)(x, u);
        let term = f_uu
            + l_bound * b_uu
            + l_bound * l_bound * s_uu.abs()
            + l_bound * s_u * s_u
            + 2.0 * eps_bar;
        worst = worst.max(term);
    }
    -worst
}

/// The constant entering the two-rate coupled-gap bound, assembled from the
/// initial derivative gaps.
pub fn c0_constant(eps_lower: f64, l_bound: f64, dvx0_sq: f64, dvxx0_sq: f64) -> f64 {
    (1.0 / eps_lower) * l_bound * (dvx0_sq + l_bound * dvxx0_sq)
}

#[derive(Debug, Clone)]
pub struct W2BoundReport {
    pub satisfied: bool,
    /// Per snapshot: bound minus measured squared gap (negative = violation
    /// beyond the Monte Carlo allowance).
    pub margins: Vec<(f64, f64)>,
}

/// Checks the measured squared coupled gap against
/// `e^{-2 kappa tau} gap0 + (e^{-2 beta tau} - e^{-2 kappa tau}) / (2(kappa - beta)) * C0`,
/// allowing three standard errors of slack per sample.
pub fn w2_bound_check(
    taus: &[f64],
    gap_sq: &[f64],
    gap_sq_se: &[f64],
    kappa: f64,
    beta: f64,
    c0: f64,
) -> Result<W2BoundReport, DiagnosticsError> {
    if (kappa - beta).abs() < 1e-12 {
        return Err(DiagnosticsError::KappaEqualsBeta);
    }
    if taus.is_empty() || taus.len() != gap_sq.len() || taus.len() != gap_sq_se.len() {
        return Err(DiagnosticsError::EmptyInput);
    }
    let gap0 = gap_sq[0];
    let t0 = taus[0];
    let mut satisfied = true;
    let mut margins = Vec::with_capacity(taus.len());
    for i in 0..taus.len() {
        let t = taus[i] - t0;
        let ek = (-2.0 * kappa * t).exp();
        let eb = (-2.0 * beta * t).exp();
        let bound = ek * gap0 + (eb - ek) / (2.0 * (kappa - beta)) * c0;
        let margin = bound + 3.0 * gap_sq_se[i] - gap_sq[i];
        if margin < 0.0 {
            satisfied = false;
        }
        margins.push((taus[i], margin));
    }
    Ok(W2BoundReport { satisfied, margins })
}

/// One summary line of a diagnostics run: a metric, its formatted value, and
/// an optional pass verdict with the tolerance it was judged against.
#[derive(Debug, Clone)]
pub struct SummaryItem {
    pub name: String,
    pub value: String,
    pub pass: Option<bool>,
    pub tolerance: Option<String>,
}

impl SummaryItem {
    pub fn info(name: impl Into<String>, value: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            value: value.into(),
            pass: None,
            tolerance: None,
        }
    }

    pub fn check(
        name: impl Into<String>,
        value: impl Into<String>,
        pass: bool,
        tolerance: impl Into<String>,
    ) -> Self {
        Self {
            name: name.into(),
            value: value.into(),
            pass: Some(pass),
            tolerance: Some(tolerance.into()),
        }
    }
}

/// Time-series metrics plus summary verdicts, ready for CSV/text export.
#[derive(Debug, Clone, Default)]
pub struct DiagnosticsReport {
    /// (tau, metric name, value) triples.
    pub series: Vec<(f64, String, f64)>,
    pub summary: Vec<SummaryItem>,
}

impl DiagnosticsReport {
    pub fn push_series(&mut self, tau: f64, metric: impl Into<String>, value: f64) {
        self.series.push((tau, metric.into(), value));
    }

    pub fn all_passed(&self) -> bool {
        self.summary.iter().all(|s| s.pass.unwrap_or(true))
    }
}

/// Cumulative-trapezoid total mass helper shared by tests; re-exported here
/// to keep quadrature conventions in one place.
pub fn total_mass(u_grid: &[f64], density: &[f64]) -> f64 {
    trapezoid(u_grid, density)
}
