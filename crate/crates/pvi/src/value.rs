//! Value-function representations and their evolution along the iteration
//! clock.
//!
//! Two backends share the same explicit-Euler clock as the policy layer. The
//! grid backend stores node values on a uniform one-dimensional grid and
//! recomputes first/second derivatives by finite differences every step, so
//! value and derivatives can never drift apart. The quadratic backend evolves
//! the three coefficients of `v(x) = a2 x^2 / 2 + a1 x + a0` directly and is
//! exact (up to Monte Carlo noise in the ensemble moments) for
//! linear-quadratic problems.
//!
//! Steps are Jacobi-style: all right-hand sides are evaluated against the
//! pre-step field, then applied at once.

use crate::lq_oracle::{coeff_rhs, LqError};
use crate::model::{
    hamiltonian, log_partition, maximize_hamiltonian, relaxed_coefficients, ControlProblem,
    LQProblem, ModelError,
};
use crate::policy::{
    empirical_moments, estimate_entropy, DensityEstimator, ParticleEnsemble, PolicyError,
};
use crate::seed::{stream, NS_ROLLOUT};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ValueError {
    #[error("grid needs at least 5 nodes, got {have}")]
    TooFewNodes { have: usize },
    #[error("grid nodes must be strictly increasing with uniform spacing")]
    NonUniformSpacing,
    #[error("grid has {nodes} nodes but {values} values")]
    LengthMismatch { nodes: usize, values: usize },
    #[error("grid has {nodes} nodes but {supplied} per-node policies")]
    SizeMismatch { nodes: usize, supplied: usize },
    #[error("at node {node} (x = {x}): {source}")]
    AtNode {
        node: usize,
        x: f64,
        source: PolicyError,
    },
    #[error("rollout needs at least {need} paths, got {have}")]
    TooFewPaths { have: usize, need: usize },
    #[error(
        "rollout horizon too short: discounted tail bound {bound:.3e} exceeds tolerance {tol:.3e}"
    )]
    HorizonTooShort { bound: f64, tol: f64 },
    #[error("quadratic fit needs at least 3 distinct abscissae")]
    SingularFit,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Lq(#[from] LqError),
}

/// Node values of `v` on a uniform, strictly increasing grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridValueField {
    nodes: Vec<f64>,
    values: Vec<f64>,
    pub tau: f64,
}

impl GridValueField {
    pub fn new(nodes: Vec<f64>, values: Vec<f64>) -> Result<Self, ValueError> {
        if nodes.len() < 5 {
            return Err(ValueError::TooFewNodes { have: nodes.len() });
        }
        if nodes.len() != values.len() {
            return Err(ValueError::LengthMismatch {
                nodes: nodes.len(),
                values: values.len(),
            });
        }
        let h = nodes[1] - nodes[0];
        if !h.is_finite() || h <= 0.0 {
            return Err(ValueError::NonUniformSpacing);
        }
        for w in nodes.windows(2) {
            let d = w[1] - w[0];
            if !d.is_finite() || d <= 0.0 || (d - h).abs() > 1e-12 * h {
                return Err(ValueError::NonUniformSpacing);
            }
        }
        Ok(Self {
            nodes,
            values,
            tau: 0.0,
        })
    }

    /// Uniform grid on `[x_min, x_max]` with values from `f`.
    pub fn from_fn(
        x_min: f64,
        x_max: f64,
        count: usize,
        f: impl Fn(f64) -> f64,
    ) -> Result<Self, ValueError> {
        let nodes: Vec<f64> = (0..count)
            .map(|i| x_min + (x_max - x_min) * i as f64 / (count.max(2) - 1) as f64)
            .collect();
        let values = nodes.iter().map(|&x| f(x)).collect();
        Self::new(nodes, values)
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn spacing(&self) -> f64 {
        self.nodes[1] - self.nodes[0]
    }

    /// First and second derivatives at every node: central second-order
    /// stencils inside, one-sided second-order stencils at the two boundary
    /// nodes. Exact on quadratics.
    pub fn derivatives(&self) -> (Vec<f64>, Vec<f64>) {
        let v = &self.values;
        let n = v.len();
        let h = self.spacing();
        let h2 = h * h;
        let mut vx = vec![0.0; n];
        let mut vxx = vec![0.0; n];
        for j in 1..n - 1 {
            vx[j] = (v[j + 1] - v[j - 1]) / (2.0 * h);
            vxx[j] = (v[j + 1] - 2.0 * v[j] + v[j - 1]) / h2;
        }
        vx[0] = (-3.0 * v[0] + 4.0 * v[1] - v[2]) / (2.0 * h);
        vxx[0] = (2.0 * v[0] - 5.0 * v[1] + 4.0 * v[2] - v[3]) / h2;
        vx[n - 1] = (3.0 * v[n - 1] - 4.0 * v[n - 2] + v[n - 3]) / (2.0 * h);
        vxx[n - 1] = (2.0 * v[n - 1] - 5.0 * v[n - 2] + 4.0 * v[n - 3] - v[n - 4]) / h2;
        (vx, vxx)
    }
}

/// Coefficients of `v(x) = a2 x^2 / 2 + a1 x + a0`, so that `v_x = a2 x + a1`
/// and `v_xx = a2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraticValueField {
    pub a0: f64,
    pub a1: f64,
    pub a2: f64,
    pub tau: f64,
}

impl QuadraticValueField {
    pub fn new(a0: f64, a1: f64, a2: f64) -> Self {
        Self {
            a0,
            a1,
            a2,
            tau: 0.0,
        }
    }

    pub fn value_at(&self, x: f64) -> f64 {
        0.5 * self.a2 * x * x + self.a1 * x + self.a0
    }

    pub fn vx_at(&self, x: f64) -> f64 {
        self.a2 * x + self.a1
    }

    pub fn vxx_at(&self) -> f64 {
        self.a2
    }
}

/// Relaxed value dynamics at one state: ensemble average of the Hamiltonian
/// plus the entropy bonus, less the discount drag.
pub fn relaxed_value_rhs(
    x: f64,
    ens: &ParticleEnsemble,
    p: f64,
    s: f64,
    v: f64,
    prob: &ControlProblem,
    estimator: DensityEstimator,
) -> Result<f64, ValueError> {
    if ens.is_empty() {
        return Err(ValueError::Policy(PolicyError::TooFewParticles {
            have: 0,
            need: 1,
        }));
    }
    let mean_h = ens
        .particles
        .iter()
        .map(|&u| hamiltonian(prob, x, u, p, s))
        .sum::<f64>()
        / ens.len() as f64;
    let lambda = prob.temperature;
    let entropy_bonus = if lambda > 0.0 {
        lambda * estimate_entropy(ens, estimator)?
    } else {
        0.0
    };
    Ok(mean_h + entropy_bonus - prob.discount * v)
}

/// Classical value dynamics at one state and control.
pub fn classical_value_rhs(
    x: f64,
    u: f64,
    p: f64,
    s: f64,
    v: f64,
    prob: &ControlProblem,
) -> f64 {
    -prob.discount * v + hamiltonian(prob, x, u, p, s)
}

/// One Euler step of the quadratic backend. The ensemble supplies the control
/// mean and variance at `x = 0`; `i2` is the companion integral carrying the
/// slope of the control mean in `x`, advanced by the caller alongside.
pub fn step_quadratic(
    field: &QuadraticValueField,
    lq: &LQProblem,
    ens: &ParticleEnsemble,
    i2: f64,
    dtau: f64,
) -> Result<QuadraticValueField, ValueError> {
    let m = empirical_moments(ens)?;
    let (da0, da1, da2) = coeff_rhs(lq, field.a0, field.a1, field.a2, i2, m.mean, m.var)?;
    Ok(QuadraticValueField {
        a0: field.a0 + dtau * da0,
        a1: field.a1 + dtau * da1,
        a2: field.a2 + dtau * da2,
        tau: field.tau + dtau,
    })
}

/// Per-node policies for the grid backend: one ensemble per node (relaxed) or
/// one deterministic control per node (classical).
pub enum NodePolicies<'a> {
    Relaxed(&'a [ParticleEnsemble]),
    Classical(&'a [f64]),
}

impl NodePolicies<'_> {
    fn len(&self) -> usize {
        match self {
            NodePolicies::Relaxed(e) => e.len(),
            NodePolicies::Classical(c) => c.len(),
        }
    }
}

/// Right-hand side of the value dynamics at every node, evaluated against the
/// current field (derivatives included).
pub fn grid_rhs(
    field: &GridValueField,
    policies: &NodePolicies,
    prob: &ControlProblem,
    estimator: DensityEstimator,
) -> Result<Vec<f64>, ValueError> {
    let n = field.nodes.len();
    if policies.len() != n {
        return Err(ValueError::SizeMismatch {
            nodes: n,
            supplied: policies.len(),
        });
    }
    let (vx, vxx) = field.derivatives();
    let mut rhs = Vec::with_capacity(n);
    for j in 0..n {
        let x = field.nodes[j];
        let r = match policies {
            NodePolicies::Relaxed(ens) => {
                relaxed_value_rhs(x, &ens[j], vx[j], vxx[j], field.values[j], prob, estimator)
                    .map_err(|e| match e {
                        ValueError::Policy(source) => ValueError::AtNode { node: j, x, source },
                        other => other,
                    })?
            }
            NodePolicies::Classical(controls) => {
                classical_value_rhs(x, controls[j], vx[j], vxx[j], field.values[j], prob)
            }
        };
        rhs.push(r);
    }
    Ok(rhs)
}

/// One Jacobi-style Euler step of the grid backend:
/// `v_out[j] = v_in[j] + dtau * rhs[j]` with all right-hand sides computed
/// against the pre-step field.
pub fn step_grid(
    field: &GridValueField,
    policies: &NodePolicies,
    prob: &ControlProblem,
    estimator: DensityEstimator,
    dtau: f64,
) -> Result<GridValueField, ValueError> {
    let rhs = grid_rhs(field, policies, prob, estimator)?;
    let values = field
        .values
        .iter()
        .zip(&rhs)
        .map(|(v, r)| v + dtau * r)
        .collect();
    Ok(GridValueField {
        nodes: field.nodes.clone(),
        values,
        tau: field.tau + dtau,
    })
}

/// A frozen policy for Monte Carlo evaluation of the discounted payoff.
pub enum RolloutPolicy<'a> {
    /// State-independent relaxed policy represented by control particles;
    /// drift/diffusion/payoff are averaged over the particles.
    RelaxedParticles(&'a [f64]),
    /// Deterministic feedback control.
    Control(&'a (dyn Fn(f64) -> f64 + Sync)),
}

const ROLLOUT_TABLE_NODES: usize = 2001;

/// Aggregated drift, squared diffusion and running payoff of the frozen
/// policy, tabulated on a confinement-padded interval and linearly
/// interpolated; lookups outside the table clamp to the edge.
struct AggregateTable {
    lo: f64,
    step: f64,
    b: Vec<f64>,
    s2: Vec<f64>,
    f: Vec<f64>,
}

impl AggregateTable {
    fn build(
        prob: &ControlProblem,
        policy: &RolloutPolicy,
        lo: f64,
        hi: f64,
    ) -> Result<Self, ValueError> {
        let step = (hi - lo) / (ROLLOUT_TABLE_NODES - 1) as f64;
        let mut b = Vec::with_capacity(ROLLOUT_TABLE_NODES);
        let mut s2 = Vec::with_capacity(ROLLOUT_TABLE_NODES);
        let mut f = Vec::with_capacity(ROLLOUT_TABLE_NODES);
        for i in 0..ROLLOUT_TABLE_NODES {
            let x = lo + step * i as f64;
            let (bx, s2x, fx) = match policy {
                RolloutPolicy::RelaxedParticles(particles) => {
                    relaxed_coefficients(prob, x, particles)?
                }
                RolloutPolicy::Control(u_of_x) => {
                    let u = u_of_x(x);
                    let sig = (prob.diffusion)(x, u);
                    ((prob.drift)(x, u), sig * sig, (prob.payoff)(x, u))
                }
            };
            b.push(bx);
            s2.push(s2x);
            f.push(fx);
        }
        Ok(Self { lo, step, b, s2, f })
    }

    fn eval(&self, x: f64) -> (f64, f64, f64) {
        let t = ((x - self.lo) / self.step).clamp(0.0, (self.b.len() - 1) as f64);
        let i = (t.floor() as usize).min(self.b.len() - 2);
        let w = t - i as f64;
        (
            self.b[i] + w * (self.b[i + 1] - self.b[i]),
            self.s2[i] + w * (self.s2[i + 1] - self.s2[i]),
            self.f[i] + w * (self.f[i + 1] - self.f[i]),
        )
    }
}

/// Discounted-payoff estimates of the frozen policy started at each state in
/// `x0s`: Euler-Maruyama paths of the aggregated state dynamics, left-endpoint
/// quadrature in time, antithetic path pairs. Returns (estimate, standard
/// error) per start state, each from its own seeded stream so results do not
/// depend on evaluation order.
#[allow(clippy::too_many_arguments)]
pub fn rollout_values(
    prob: &ControlProblem,
    policy: &RolloutPolicy,
    estimator: DensityEstimator,
    x0s: &[f64],
    horizon: f64,
    n_paths: usize,
    dt: f64,
    truncation_tol: f64,
    master_seed: u64,
    stream_index_base: u64,
) -> Result<Vec<(f64, f64)>, ValueError> {
    if n_paths < 100 {
        return Err(ValueError::TooFewPaths {
            have: n_paths,
            need: 100,
        });
    }
    let lambda = prob.temperature;
    let entropy_bonus = match policy {
        RolloutPolicy::RelaxedParticles(particles) if lambda > 0.0 => {
            let carrier = ParticleEnsemble::new(0.0, particles.to_vec(), 0, 0);
            lambda * estimate_entropy(&carrier, estimator)?
        }
        _ => 0.0,
    };

    let lo0 = x0s.iter().copied().fold(f64::INFINITY, f64::min);
    let hi0 = x0s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sig_probe = 0.0f64;
    for &x in x0s {
        let s2 = match policy {
            RolloutPolicy::RelaxedParticles(particles) => {
                relaxed_coefficients(prob, x, particles)?.1
            }
            RolloutPolicy::Control(u_of_x) => {
                let sig = (prob.diffusion)(x, u_of_x(x));
                sig * sig
            }
        };
        sig_probe = sig_probe.max(s2.sqrt());
    }
    let pad = 6.0 * (1.0 + sig_probe) + (hi0 - lo0) + 1.0;
    let table = AggregateTable::build(prob, policy, lo0 - pad, hi0 + pad)?;

    let sup_integrand = table
        .f
        .iter()
        .map(|f| (f + entropy_bonus).abs())
        .fold(0.0f64, f64::max);
    let beta = prob.discount;
    let tail_bound = (-beta * horizon).exp() * sup_integrand / beta;
    if tail_bound > truncation_tol {
        return Err(ValueError::HorizonTooShort {
            bound: tail_bound,
            tol: truncation_tol,
        });
    }

    let pairs = n_paths / 2;
    let steps = (horizon / dt).round() as usize;
    let disc_factor = (-beta * dt).exp();
    let sqrt_dt = dt.sqrt();
    let mut out = Vec::with_capacity(x0s.len());
    for (idx, &x0) in x0s.iter().enumerate() {
        let mut rng = stream(master_seed, NS_ROLLOUT + stream_index_base + idx as u64);
        let mut pair_vals = Vec::with_capacity(pairs);
        for _ in 0..pairs {
            let (mut xp, mut xm) = (x0, x0);
            let (mut vp, mut vm) = (0.0f64, 0.0f64);
            let mut disc = 1.0f64;
            for _ in 0..steps {
                let xi: f64 = rng.sample(StandardNormal);
                let (bp, s2p, fp) = table.eval(xp);
                let (bm, s2m, fm) = table.eval(xm);
                vp += disc * (fp + entropy_bonus) * dt;
                vm += disc * (fm + entropy_bonus) * dt;
                xp += bp * dt + s2p.sqrt() * sqrt_dt * xi;
                xm += bm * dt - s2m.sqrt() * sqrt_dt * xi;
                disc *= disc_factor;
            }
            pair_vals.push(0.5 * (vp + vm));
        }
        let mean = pair_vals.iter().sum::<f64>() / pairs as f64;
        let var = pair_vals
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / (pairs as f64 - 1.0);
        out.push((mean, (var / pairs as f64).sqrt()));
    }
    Ok(out)
}

/// Single-state convenience wrapper around [`rollout_values`].
#[allow(clippy::too_many_arguments)]
pub fn rollout_value(
    prob: &ControlProblem,
    policy: &RolloutPolicy,
    estimator: DensityEstimator,
    x0: f64,
    horizon: f64,
    n_paths: usize,
    dt: f64,
    truncation_tol: f64,
    master_seed: u64,
    stream_index_base: u64,
) -> Result<(f64, f64), ValueError> {
    Ok(rollout_values(
        prob,
        policy,
        estimator,
        &[x0],
        horizon,
        n_paths,
        dt,
        truncation_tol,
        master_seed,
        stream_index_base,
    )?[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HjbMode {
    Relaxed,
    Classical,
}

/// Optimality defect per node: `-beta v + lambda ln Z` (relaxed, log-partition
/// by quadrature) or `-beta v + max_u H` (classical, grid scan refined by
/// golden-section search). Zero exactly at the optimal value function.
pub fn hjb_residual(
    field: &GridValueField,
    prob: &ControlProblem,
    u_grid: &[f64],
    mode: HjbMode,
) -> Result<Vec<f64>, ValueError> {
    let (vx, vxx) = field.derivatives();
    let beta = prob.discount;
    let mut out = Vec::with_capacity(field.nodes.len());
    for j in 0..field.nodes.len() {
        let x = field.nodes[j];
        let top = match mode {
            HjbMode::Relaxed => log_partition(prob, x, vx[j], vxx[j], u_grid)?,
            HjbMode::Classical => maximize_hamiltonian(prob, x, vx[j], vxx[j], u_grid, 40).1,
        };
        out.push(-beta * field.values[j] + top);
    }
    Ok(out)
}

/// Least-squares fit `y ~ c2 x^2 + c1 x + c0`; returns `(c0, c1, c2,
/// max_abs_residual)`. Abscissae are centered internally for conditioning.
pub fn quadratic_fit(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64, f64), ValueError> {
    if xs.len() < 3 || xs.len() != ys.len() {
        return Err(ValueError::SingularFit);
    }
    let n = xs.len() as f64;
    let xbar = xs.iter().sum::<f64>() / n;
    let t: Vec<f64> = xs.iter().map(|x| x - xbar).collect();
    let (mut s1, mut s2, mut s3, mut s4) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let (mut r0, mut r1, mut r2) = (0.0f64, 0.0f64, 0.0f64);
    for (ti, yi) in t.iter().zip(ys) {
        let t2 = ti * ti;
        s1 += ti;
        s2 += t2;
        s3 += t2 * ti;
        s4 += t2 * t2;
        r0 += yi;
        r1 += yi * ti;
        r2 += yi * t2;
    }
    // Normal equations for (d0, d1, d2) in centered coordinates.
    let m = [[n, s1, s2], [s1, s2, s3], [s2, s3, s4]];
    let rhs = [r0, r1, r2];
    let det = det3(&m);
    let scale = n * s2 * s4;
    if det.abs() <= 1e-12 * scale.max(1.0) {
        return Err(ValueError::SingularFit);
    }
    let d0 = det3(&replace_col(&m, 0, &rhs)) / det;
    let d1 = det3(&replace_col(&m, 1, &rhs)) / det;
    let d2 = det3(&replace_col(&m, 2, &rhs)) / det;
    // Uncenter: y = d2 (x - xbar)^2 + d1 (x - xbar) + d0.
    let c2 = d2;
    let c1 = d1 - 2.0 * d2 * xbar;
    let c0 = d0 - d1 * xbar + d2 * xbar * xbar;
    let resid = xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| (y - (c2 * x * x + c1 * x + c0)).abs())
        .fold(0.0f64, f64::max);
    Ok((c0, c1, c2, resid))
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn replace_col(m: &[[f64; 3]; 3], col: usize, rhs: &[f64; 3]) -> [[f64; 3]; 3] {
    let mut out = *m;
    for row in 0..3 {
        out[row][col] = rhs[row];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_fit_recovers_exact_coefficients() {
        let xs: Vec<f64> = (0..7).map(|i| -3.0 + i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x * x - 0.5 * x + 3.0).collect();
        let (c0, c1, c2, resid) = quadratic_fit(&xs, &ys).unwrap();
        assert!((c0 - 3.0).abs() < 1e-10);
        assert!((c1 + 0.5).abs() < 1e-10);
        assert!((c2 - 2.0).abs() < 1e-10);
        assert!(resid < 1e-10);
    }

    #[test]
    fn quadratic_fit_rejects_degenerate_inputs() {
        assert!(quadratic_fit(&[0.0, 1.0], &[0.0, 1.0]).is_err());
        assert!(quadratic_fit(&[1.0, 1.0, 1.0], &[0.0, 0.0, 0.0]).is_err());
    }
}
