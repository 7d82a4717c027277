//! Problem data and the Hamiltonian.
//!
//! A control problem is specified by drift `b(x,u)`, diffusion `sigma(x,u)`,
//! running payoff `f(x,u)`, their control gradients, a discount rate and a
//! temperature. Everything downstream consumes the problem only through the
//! Hamiltonian `H(x,u,p,S) = f + b p + sigma^2 S / 2` and its control
//! gradient, where `(p,S)` stand for the value derivatives `(v_x, v_xx)`.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("temperature must be positive for relaxed-control densities")]
    TemperatureZero,
    #[error("density mass is not normalizable on the control domain (mass = {mass})")]
    NonNormalizable { mass: f64 },
    #[error("ensemble is empty")]
    EmptyEnsemble,
    #[error("invalid linear-quadratic parameters: {0}")]
    InvalidParameters(String),
}

/// Linear-quadratic problem data: drift `A x + B u`, diffusion `C x`, payoff
/// `-(M x^2 / 2 + N u^2 / 2 + P x + Q u)`, discount `beta`, temperature `lambda`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LQProblem {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub m: f64,
    pub n: f64,
    pub p: f64,
    pub q: f64,
    pub beta: f64,
    pub lambda: f64,
}

impl LQProblem {
    /// Checks the structural requirements used throughout: `M >= 0`, `N > 0`,
    /// `A < 0`, and `beta - 2A - C^2 > 0` (finiteness of the initial value
    /// coefficients for any frozen Gaussian policy).
    pub fn validate(&self) -> Result<(), ModelError> {
        if !self.m.is_finite() || self.m < 0.0 {
            return Err(ModelError::InvalidParameters(format!("M = {} < 0", self.m)));
        }
        if !self.n.is_finite() || self.n <= 0.0 {
            return Err(ModelError::InvalidParameters(format!("N = {} <= 0", self.n)));
        }
        if !self.a.is_finite() || self.a >= 0.0 {
            return Err(ModelError::InvalidParameters(format!("A = {} >= 0", self.a)));
        }
        if !self.beta.is_finite() || self.beta <= 0.0 {
            return Err(ModelError::InvalidParameters(format!(
                "beta = {} <= 0",
                self.beta
            )));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(ModelError::InvalidParameters(format!(
                "lambda = {} < 0",
                self.lambda
            )));
        }
        let gap = self.beta - 2.0 * self.a - self.c * self.c;
        if !gap.is_finite() || gap <= 0.0 {
            return Err(ModelError::InvalidParameters(format!(
                "beta - 2A - C^2 = {gap} <= 0"
            )));
        }
        Ok(())
    }
}

pub type StateControlFn = Box<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// A one-dimensional stochastic control problem. Gradients are user-supplied
/// (analytic whenever available) because the Langevin drift evaluates them in
/// the innermost loop; [`ControlProblem::validate_gradients`] offers an
/// optional finite-difference consistency pass at construction time.
pub struct ControlProblem {
    pub drift: StateControlFn,
    pub diffusion: StateControlFn,
    pub payoff: StateControlFn,
    pub drift_grad_u: StateControlFn,
    pub diffusion_grad_u: StateControlFn,
    pub payoff_grad_u: StateControlFn,
    /// Discount rate beta > 0.
    pub discount: f64,
    /// Temperature lambda >= 0; zero selects classical (deterministic) control.
    pub temperature: f64,
    /// Control quadrature domain for densities, argmax scans and restarts.
    pub u_domain: (f64, f64),
    pub state_dim: usize,
    pub control_dim: usize,
    /// Set when the problem was built from [`LQProblem`]; enables closed-form
    /// code paths (Gaussian entropy/score, analytic control curvatures).
    pub lq: Option<LQProblem>,
}

impl ControlProblem {
    /// Compares each supplied gradient against central differences of its
    /// base function at the given points; returns the worst absolute
    /// discrepancy scaled by `max(1, |gradient|)`.
    pub fn validate_gradients(&self, points: &[(f64, f64)]) -> f64 {
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for &(x, u) in points {
            let pairs = [
                (&self.payoff, &self.payoff_grad_u),
                (&self.drift, &self.drift_grad_u),
                (&self.diffusion, &self.diffusion_grad_u),
            ];
            for (f, g) in pairs {
                let fd = (f(x, u + h) - f(x, u - h)) / (2.0 * h);
                let an = g(x, u);
                worst = worst.max((fd - an).abs() / an.abs().max(1.0));
            }
        }
        worst
    }
}

/// Instantiates the generic problem interface from linear-quadratic data.
pub fn lq_to_general(lq: LQProblem) -> ControlProblem {
    let LQProblem {
        a, b, c, m, n, p, q, ..
    } = lq;
    ControlProblem {
        drift: Box::new(move |x, u| a * x + b * u),
        diffusion: Box::new(move |x, _u| c * x),
        payoff: Box::new(move |x, u| -(0.5 * m * x * x + 0.5 * n * u * u + p * x + q * u)),
        drift_grad_u: Box::new(move |_x, _u| b),
        diffusion_grad_u: Box::new(|_x, _u| 0.0),
        payoff_grad_u: Box::new(move |_x, u| -(n * u + q)),
        discount: lq.beta,
        temperature: lq.lambda,
        u_domain: (-10.0, 10.0),
        state_dim: 1,
        control_dim: 1,
        lq: Some(lq),
    }
}

/// `H(x,u,p,S) = f(x,u) + b(x,u) p + sigma(x,u)^2 S / 2`.
pub fn hamiltonian(prob: &ControlProblem, x: f64, u: f64, p: f64, s: f64) -> f64 {
    let sig = (prob.diffusion)(x, u);
    (prob.payoff)(x, u) + (prob.drift)(x, u) * p + 0.5 * sig * sig * s
}

/// `dH/du = f_u + b_u p + sigma sigma_u S`.
pub fn grad_u_hamiltonian(prob: &ControlProblem, x: f64, u: f64, p: f64, s: f64) -> f64 {
    (prob.payoff_grad_u)(x, u)
        + (prob.drift_grad_u)(x, u) * p
        + (prob.diffusion)(x, u) * (prob.diffusion_grad_u)(x, u) * s
}

/// Trapezoid quadrature over a strictly increasing abscissa.
pub fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 1..xs.len() {
        acc += 0.5 * (xs[i] - xs[i - 1]) * (ys[i] + ys[i - 1]);
    }
    acc
}

/// Density proportional to `exp(H(x,.,p,S)/lambda)` on `u_grid`, normalized so
/// its trapezoid integral is one. The maximum of `H/lambda` is subtracted
/// before exponentiation.
pub fn gibbs_density(
    prob: &ControlProblem,
    x: f64,
    p: f64,
    s: f64,
    u_grid: &[f64],
) -> Result<Vec<f64>, ModelError> {
    let lambda = prob.temperature;
    if lambda <= 0.0 {
        return Err(ModelError::TemperatureZero);
    }
    let h: Vec<f64> = u_grid
        .iter()
        .map(|&u| hamiltonian(prob, x, u, p, s))
        .collect();
    let top = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = h.iter().map(|&v| ((v - top) / lambda).exp()).collect();
    let mass = trapezoid(u_grid, &w);
    if !mass.is_finite() || mass <= 0.0 {
        return Err(ModelError::NonNormalizable { mass });
    }
    for v in &mut w {
        *v /= mass;
    }
    Ok(w)
}

/// `lambda * ln integral exp(H/lambda) du` by max-shifted trapezoid quadrature
/// (the soft maximum of `H` over the control domain).
pub fn log_partition(
    prob: &ControlProblem,
    x: f64,
    p: f64,
    s: f64,
    u_grid: &[f64],
) -> Result<f64, ModelError> {
    let lambda = prob.temperature;
    if lambda <= 0.0 {
        return Err(ModelError::TemperatureZero);
    }
    let h: Vec<f64> = u_grid
        .iter()
        .map(|&u| hamiltonian(prob, x, u, p, s))
        .collect();
    let top = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = h.iter().map(|&v| ((v - top) / lambda).exp()).collect();
    let mass = trapezoid(u_grid, &w);
    if !mass.is_finite() || mass <= 0.0 {
        return Err(ModelError::NonNormalizable { mass });
    }
    Ok(top + lambda * mass.ln())
}

/// Particle-averaged relaxed coefficients `(b_bar, sigma2_bar, f_bar)` at `x`.
pub fn relaxed_coefficients(
    prob: &ControlProblem,
    x: f64,
    particles: &[f64],
) -> Result<(f64, f64, f64), ModelError> {
    if particles.is_empty() {
        return Err(ModelError::EmptyEnsemble);
    }
    let (mut bs, mut ss, mut fs) = (0.0, 0.0, 0.0);
    for &u in particles {
        let sig = (prob.diffusion)(x, u);
        bs += (prob.drift)(x, u);
        ss += sig * sig;
        fs += (prob.payoff)(x, u);
    }
    let inv = 1.0 / particles.len() as f64;
    Ok((bs * inv, ss * inv, fs * inv))
}

/// Maximizes `H(x,.,p,S)` by a full grid scan refined with golden-section
/// iterations on the bracket around the best node. Returns `(u_star, h_star)`.
pub fn maximize_hamiltonian(
    prob: &ControlProblem,
    x: f64,
    p: f64,
    s: f64,
    u_grid: &[f64],
    golden_iters: usize,
) -> (f64, f64) {
    debug_assert!(u_grid.len() >= 2);
    let eval = |u: f64| hamiltonian(prob, x, u, p, s);
    let mut best = 0;
    let mut best_h = f64::NEG_INFINITY;
    for (i, &u) in u_grid.iter().enumerate() {
        let h = eval(u);
        if h > best_h {
            best_h = h;
            best = i;
        }
    }
    let mut lo = u_grid[best.saturating_sub(1)];
    let mut hi = u_grid[(best + 1).min(u_grid.len() - 1)];
    // Golden-section search for the maximum on [lo, hi].
    let inv_phi = 0.618_033_988_749_894_9_f64;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let (mut f1, mut f2) = (eval(x1), eval(x2));
    for _ in 0..golden_iters {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = eval(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = eval(x1);
        }
    }
    let mid = 0.5 * (lo + hi);
    let fm = eval(mid);
    let mut u_star = u_grid[best];
    let mut h_star = best_h;
    for (u, h) in [(x1, f1), (x2, f2), (mid, fm)] {
        if h > h_star {
            u_star = u;
            h_star = h;
        }
    }
    (u_star, h_star)
}

/// Uniform grid helper (`count >= 2`, inclusive endpoints).
pub fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    debug_assert!(count >= 2);
    let step = (hi - lo) / (count - 1) as f64;
    (0..count).map(|i| lo + step * i as f64).collect()
}
