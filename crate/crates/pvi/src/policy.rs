//! Particle representation of per-state control distributions.
//!
//! Each grid state carries an ensemble of control particles evolved by an
//! Euler-Maruyama discretization of overdamped Langevin dynamics in the
//! control variable: the drift is the control gradient of the Hamiltonian at
//! frozen value derivatives, the noise scale is sqrt(2 lambda). At lambda = 0
//! the same step degenerates to deterministic gradient ascent and consumes no
//! randomness, so zero-temperature runs are seed-independent.
//!
//! Ensemble statistics (moments, differential entropy, score) support two
//! estimators: exact Gaussian moment matching for problems known to preserve
//! Gaussian ensembles, and a binned Gaussian-kernel density estimate with
//! Silverman bandwidth for everything else.

use crate::model::{grad_u_hamiltonian, hamiltonian, maximize_hamiltonian, ControlProblem};
use crate::seed::{stream, NS_ENSEMBLE};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Default particle-magnitude guard; exceeding it aborts the run with
/// [`PolicyError::NumericalBlowup`].
pub const DEFAULT_BLOWUP_GUARD: f64 = 1e8;

const KDE_GRID: usize = 4096;
const KDE_KERNEL_RADIUS: f64 = 6.0;

#[derive(Debug, Error)]
pub enum PolicyError {
    /// A particle left the guarded region: the Hamiltonian is not confining
    /// in the control, or the step size is too large for its curvature.
    #[error("particle magnitude {max_abs:.3e} exceeded the blowup guard {guard:.3e}")]
    NumericalBlowup { max_abs: f64, guard: f64 },
    #[error("need at least {need} particles for this estimate, have {have}")]
    TooFewParticles { have: usize, need: usize },
    #[error("ensemble spread is degenerate (all particles effectively equal)")]
    DegenerateSpread,
    #[error("coupled ensembles differ in size: {left} vs {right}")]
    SizeMismatch { left: usize, right: usize },
}

/// How densities, entropies and scores are estimated from particles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DensityEstimator {
    /// Gaussian moment matching; exact when the dynamics preserve
    /// Gaussianity of the control law, as in the linear-quadratic setting.
    GaussianMoments,
    /// Binned Gaussian-kernel density estimate with Silverman bandwidth.
    Kde,
}

/// Sample moments of an ensemble. `var` uses the unbiased (n-1) denominator;
/// skewness and excess kurtosis use the biased central moments, and are
/// zeroed (with `degenerate_spread` set) when the spread vanishes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub mean: f64,
    pub var: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    pub degenerate_spread: bool,
}

/// Control particles attached to one grid state, with a private random
/// stream derived from (master seed, state index) so that results do not
/// depend on the order in which distinct states are advanced.
#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    pub state_x: f64,
    pub particles: Vec<f64>,
    pub tau: f64,
    rng: ChaCha8Rng,
}

impl ParticleEnsemble {
    pub fn new(state_x: f64, particles: Vec<f64>, master_seed: u64, state_index: u64) -> Self {
        Self {
            state_x,
            particles,
            tau: 0.0,
            rng: stream(master_seed, NS_ENSEMBLE + state_index),
        }
    }

    /// Ensemble initialized with `count` Gaussian draws from its own stream.
    pub fn from_gaussian(
        state_x: f64,
        count: usize,
        mean: f64,
        sd: f64,
        master_seed: u64,
        state_index: u64,
    ) -> Self {
        let mut ens = Self::new(state_x, Vec::with_capacity(count), master_seed, state_index);
        for _ in 0..count {
            let xi: f64 = ens.rng.sample(StandardNormal);
            ens.particles.push(mean + sd * xi);
        }
        ens
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    /// One Euler-Maruyama step at frozen value derivatives (p, S). Noise is
    /// drawn from the ensemble stream in particle order; at temperature zero
    /// no randomness is consumed.
    pub fn langevin_step(
        &mut self,
        p: f64,
        s: f64,
        prob: &ControlProblem,
        dtau: f64,
        guard: f64,
    ) -> Result<(), PolicyError> {
        let amp = (2.0 * prob.temperature * dtau).sqrt();
        let x = self.state_x;
        let mut max_abs = 0.0f64;
        let Self {
            particles, rng, ..
        } = self;
        for u in particles.iter_mut() {
            let mut next = *u + grad_u_hamiltonian(prob, x, *u, p, s) * dtau;
            if amp > 0.0 {
                let xi: f64 = rng.sample(StandardNormal);
                next += amp * xi;
            }
            *u = next;
            max_abs = max_abs.max(next.abs());
        }
        if !max_abs.is_finite() || max_abs > guard {
            return Err(PolicyError::NumericalBlowup { max_abs, guard });
        }
        self.tau += dtau;
        Ok(())
    }
}

/// Pure gradient-ascent step for a single deterministic control; the
/// zero-temperature counterpart of [`ParticleEnsemble::langevin_step`].
#[allow(clippy::too_many_arguments)]
pub fn deterministic_step(
    state_x: f64,
    u: f64,
    p: f64,
    s: f64,
    prob: &ControlProblem,
    dtau: f64,
    guard: f64,
) -> Result<f64, PolicyError> {
    let next = u + grad_u_hamiltonian(prob, state_x, u, p, s) * dtau;
    if !next.is_finite() || next.abs() > guard {
        return Err(PolicyError::NumericalBlowup {
            max_abs: next.abs(),
            guard,
        });
    }
    Ok(next)
}

/// Standard sample moments; requires at least four particles so that the
/// kurtosis is defined.
pub fn empirical_moments(ens: &ParticleEnsemble) -> Result<Moments, PolicyError> {
    let n = ens.particles.len();
    if n < 4 {
        return Err(PolicyError::TooFewParticles { have: n, need: 4 });
    }
    let nf = n as f64;
    let mean = ens.particles.iter().sum::<f64>() / nf;
    let (mut m2, mut m3, mut m4) = (0.0f64, 0.0f64, 0.0f64);
    for &u in &ens.particles {
        let d = u - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    let var = m2 / (nf - 1.0);
    if !var.is_finite() || var <= 0.0 {
        return Ok(Moments {
            mean,
            var: 0.0,
            skewness: 0.0,
            excess_kurtosis: 0.0,
            degenerate_spread: true,
        });
    }
    let m2c = m2 / nf;
    Ok(Moments {
        mean,
        var,
        skewness: (m3 / nf) / m2c.powf(1.5),
        excess_kurtosis: (m4 / nf) / (m2c * m2c) - 3.0,
        degenerate_spread: false,
    })
}

/// Differential entropy of the ensemble under the chosen estimator.
pub fn estimate_entropy(
    ens: &ParticleEnsemble,
    estimator: DensityEstimator,
) -> Result<f64, PolicyError> {
    require_particles(ens, 50)?;
    match estimator {
        DensityEstimator::GaussianMoments => {
            let m = empirical_moments(ens)?;
            if m.degenerate_spread {
                return Err(PolicyError::DegenerateSpread);
            }
            crate::lq_oracle::gaussian_entropy(m.var).map_err(|_| PolicyError::DegenerateSpread)
        }
        DensityEstimator::Kde => Ok(BinnedKde::fit(&ens.particles)?.entropy()),
    }
}

/// Mean squared Langevin stationarity defect: the ensemble average of
/// (grad_u H - lambda * score)^2. Zero in law exactly at the Gibbs density
/// of (p, S); at lambda = 0 it reduces to the mean squared gradient.
pub fn stationarity_residual(
    ens: &ParticleEnsemble,
    p: f64,
    s: f64,
    prob: &ControlProblem,
    estimator: DensityEstimator,
) -> Result<f64, PolicyError> {
    require_particles(ens, 50)?;
    let x = ens.state_x;
    let lambda = prob.temperature;
    let grads: Vec<f64> = ens
        .particles
        .iter()
        .map(|&u| grad_u_hamiltonian(prob, x, u, p, s))
        .collect();
    let nf = ens.particles.len() as f64;
    if lambda == 0.0 {
        return Ok(grads.iter().map(|g| g * g).sum::<f64>() / nf);
    }
    let residual = match estimator {
        DensityEstimator::GaussianMoments => {
            let m = empirical_moments(ens)?;
            if m.degenerate_spread {
                return Err(PolicyError::DegenerateSpread);
            }
            ens.particles
                .iter()
                .zip(&grads)
                .map(|(&u, &g)| {
                    let score = -(u - m.mean) / m.var;
                    let d = g - lambda * score;
                    d * d
                })
                .sum::<f64>()
                / nf
        }
        DensityEstimator::Kde => {
            let kde = BinnedKde::fit(&ens.particles)?;
            ens.particles
                .iter()
                .zip(&grads)
                .map(|(&u, &g)| {
                    let d = g - lambda * kde.score(u);
                    d * d
                })
                .sum::<f64>()
                / nf
        }
    };
    Ok(residual)
}

/// Advance two ensembles with identical Gaussian draws per particle index,
/// taken from the first ensemble's stream. Used to measure contraction
/// between coupled runs without noise-induced spread.
#[allow(clippy::too_many_arguments)]
pub fn synchronous_couple_step(
    ens_a: &mut ParticleEnsemble,
    ens_b: &mut ParticleEnsemble,
    p_a: f64,
    s_a: f64,
    p_b: f64,
    s_b: f64,
    prob: &ControlProblem,
    dtau: f64,
    guard: f64,
) -> Result<(), PolicyError> {
    if ens_a.particles.len() != ens_b.particles.len() {
        return Err(PolicyError::SizeMismatch {
            left: ens_a.particles.len(),
            right: ens_b.particles.len(),
        });
    }
    let amp = (2.0 * prob.temperature * dtau).sqrt();
    let (xa, xb) = (ens_a.state_x, ens_b.state_x);
    let mut max_abs = 0.0f64;
    for i in 0..ens_a.particles.len() {
        let noise = if amp > 0.0 {
            let xi: f64 = ens_a.rng.sample(StandardNormal);
            amp * xi
        } else {
            0.0
        };
        let ua = ens_a.particles[i];
        let ub = ens_b.particles[i];
        let na = ua + grad_u_hamiltonian(prob, xa, ua, p_a, s_a) * dtau + noise;
        let nb = ub + grad_u_hamiltonian(prob, xb, ub, p_b, s_b) * dtau + noise;
        ens_a.particles[i] = na;
        ens_b.particles[i] = nb;
        max_abs = max_abs.max(na.abs()).max(nb.abs());
    }
    if !max_abs.is_finite() || max_abs > guard {
        return Err(PolicyError::NumericalBlowup { max_abs, guard });
    }
    ens_a.tau += dtau;
    ens_b.tau += dtau;
    Ok(())
}

/// Argmax test with restart: scan the Hamiltonian over `u_grid` (refined by
/// golden-section search) and move to the maximizer only if it beats the
/// current control by more than `tol_restart`.
pub fn sequential_restart(
    state_x: f64,
    u_star: f64,
    p: f64,
    s: f64,
    prob: &ControlProblem,
    u_grid: &[f64],
    tol_restart: f64,
) -> (f64, bool) {
    let h_star = hamiltonian(prob, state_x, u_star, p, s);
    let (u_new, h_new) = maximize_hamiltonian(prob, state_x, p, s, u_grid, 20);
    if h_new > h_star + tol_restart {
        (u_new, true)
    } else {
        (u_star, false)
    }
}

fn require_particles(ens: &ParticleEnsemble, need: usize) -> Result<(), PolicyError> {
    if ens.particles.len() < need {
        return Err(PolicyError::TooFewParticles {
            have: ens.particles.len(),
            need,
        });
    }
    Ok(())
}

/// Gaussian-kernel density estimate accumulated on a uniform grid spanning
/// the sample range; kernels are truncated at six bandwidths. Entropy uses
/// resubstitution at the occupied grid nodes.
struct BinnedKde {
    lo: f64,
    spacing: f64,
    counts: Vec<f64>,
    bw: f64,
    n: f64,
}

fn silverman_bandwidth(samples: &[f64]) -> Option<f64> {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|u| (u - mean) * (u - mean)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let spread = if iqr > 0.0 {
        sd.min(iqr / 1.349)
    } else {
        sd
    };
    let bw = 0.9 * spread * n.powf(-0.2);
    if bw > 0.0 && bw.is_finite() {
        Some(bw)
    } else {
        None
    }
}

fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let idx = p * (sorted.len() - 1) as f64;
    let lo = idx.floor() as usize;
    let hi = idx.ceil() as usize;
    let frac = idx - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

impl BinnedKde {
    fn fit(samples: &[f64]) -> Result<Self, PolicyError> {
        let bw = silverman_bandwidth(samples).ok_or(PolicyError::DegenerateSpread)?;
        let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !hi.is_finite() || !lo.is_finite() || hi <= lo {
            return Err(PolicyError::DegenerateSpread);
        }
        let spacing = (hi - lo) / (KDE_GRID - 1) as f64;
        let mut counts = vec![0.0f64; KDE_GRID];
        for &u in samples {
            let idx = ((u - lo) / spacing).round() as usize;
            counts[idx.min(KDE_GRID - 1)] += 1.0;
        }
        Ok(Self {
            lo,
            spacing,
            counts,
            bw,
            n: samples.len() as f64,
        })
    }

    fn node(&self, i: usize) -> f64 {
        self.lo + self.spacing * i as f64
    }

    fn density_at_node(&self, i: usize) -> f64 {
        let radius = (KDE_KERNEL_RADIUS * self.bw / self.spacing).ceil() as usize;
        let j0 = i.saturating_sub(radius);
        let j1 = (i + radius).min(KDE_GRID - 1);
        let inv_bw = 1.0 / self.bw;
        let xi = self.node(i);
        let mut acc = 0.0;
        for j in j0..=j1 {
            let c = self.counts[j];
            if c > 0.0 {
                let t = (xi - self.node(j)) * inv_bw;
                acc += c * (-0.5 * t * t).exp();
            }
        }
        acc / (self.n * self.bw * (2.0 * std::f64::consts::PI).sqrt())
    }

    fn entropy(&self) -> f64 {
        let mut h = 0.0;
        for i in 0..KDE_GRID {
            let c = self.counts[i];
            if c > 0.0 {
                h -= c / self.n * self.density_at_node(i).ln();
            }
        }
        h
    }

    /// Derivative of the log-density at an arbitrary point.
    fn score(&self, u: f64) -> f64 {
        let radius = KDE_KERNEL_RADIUS * self.bw;
        let j0 = ((u - radius - self.lo) / self.spacing).floor().max(0.0) as usize;
        let j1 = ((u + radius - self.lo) / self.spacing).ceil().max(0.0) as usize;
        let j1 = j1.min(KDE_GRID - 1);
        if j0 > j1 {
            return 0.0;
        }
        let inv_bw2 = 1.0 / (self.bw * self.bw);
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for j in j0..=j1 {
            let c = self.counts[j];
            if c > 0.0 {
                let d = u - self.node(j);
                let w = c * (-0.5 * d * d * inv_bw2).exp();
                den += w;
                num -= w * d * inv_bw2;
            }
        }
        if den > 0.0 {
            num / den
        } else {
            0.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silverman_bandwidth_matches_hand_value() {
        // 101 equally spaced points on [0,1]: sd ~ 0.2930, IQR = 0.5,
        // min(sd, 0.5/1.349 = 0.3707) = sd, bw = 0.9 * sd * 101^(-1/5).
        let xs: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
        let bw = silverman_bandwidth(&xs).unwrap();
        let n = 101.0f64;
        let var = xs.iter().map(|x| (x - 0.5) * (x - 0.5)).sum::<f64>() / (n - 1.0);
        let want = 0.9 * var.sqrt() * n.powf(-0.2);
        assert!((bw - want).abs() < 1e-12);
    }

    #[test]
    fn quantiles_interpolate_linearly() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(quantile_sorted(&xs, 0.5), 1.5);
        assert_eq!(quantile_sorted(&xs, 0.25), 0.75);
        assert_eq!(quantile_sorted(&xs, 1.0), 3.0);
    }

    #[test]
    fn binning_is_degenerate_for_constant_samples() {
        assert!(matches!(
            BinnedKde::fit(&[2.0; 64]),
            Err(PolicyError::DegenerateSpread)
        ));
    }
}
