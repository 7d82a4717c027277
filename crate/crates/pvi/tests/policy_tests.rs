//! Particle dynamics against exact discrete recursions and estimator laws.
//!
//! The frozen-field tests exploit that the linear-quadratic gradient drift
//! makes the ensemble mean and variance obey exact one-step recursions in
//! expectation, so agreement can be demanded within explicit standard-error
//! bands rather than loose qualitative tolerances.

use pvi::lq_oracle::gaussian_entropy;
use pvi::model::{lq_to_general, ControlProblem, LQProblem};
use pvi::policy::{
    deterministic_step, empirical_moments, estimate_entropy, sequential_restart,
    stationarity_residual, synchronous_couple_step, DensityEstimator, ParticleEnsemble,
    PolicyError, DEFAULT_BLOWUP_GUARD,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn lq_default() -> LQProblem {
    LQProblem {
        a: -1.0,
        b: 1.0,
        c: 0.0,
        m: 1.0,
        n: 1.0,
        p: 1.0,
        q: 0.0,
        beta: 1.0,
        lambda: 0.25,
    }
}

fn lq_problem(lambda: f64) -> ControlProblem {
    let mut lq = lq_default();
    lq.lambda = lambda;
    lq_to_general(lq)
}

fn double_well_problem() -> ControlProblem {
    ControlProblem {
        drift: Box::new(|x, _u| -x),
        diffusion: Box::new(|_x, _u| 0.5),
        payoff: Box::new(|_x, u| -(u * u - 1.0) * (u * u - 1.0) + 0.3 * u),
        drift_grad_u: Box::new(|_x, _u| 0.0),
        diffusion_grad_u: Box::new(|_x, _u| 0.0),
        payoff_grad_u: Box::new(|_x, u| -4.0 * u * (u * u - 1.0) + 0.3),
        discount: 1.0,
        temperature: 0.0,
        u_domain: (-3.0, 3.0),
        state_dim: 1,
        control_dim: 1,
        lq: None,
    }
}

fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    (0..count)
        .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
        .collect()
}

#[test]
fn zero_temperature_steps_are_seed_independent() {
    let prob = lq_problem(0.0);
    let run = |seed: u64| {
        let mut ens = ParticleEnsemble::new(0.2, vec![2.0, -1.5, 0.3, 4.0], seed, 0);
        for _ in 0..100 {
            ens.langevin_step(0.4, -0.3, &prob, 1e-3, DEFAULT_BLOWUP_GUARD)
                .unwrap();
        }
        ens.particles
    };
    assert_eq!(run(1), run(999_999));
    // The zero-temperature ensemble step equals per-particle gradient ascent.
    let mut u = 2.0;
    for _ in 0..100 {
        u = deterministic_step(0.2, u, 0.4, -0.3, &prob, 1e-3, DEFAULT_BLOWUP_GUARD).unwrap();
    }
    assert_eq!(run(1)[0], u);
}

#[test]
fn frozen_field_moments_follow_discrete_ou_recursions() {
    // grad_u H = -(N u + Q) + B p, so with N = 1, Q = 0, B = 1 the ensemble
    // mean and variance follow m <- m(1 - dtau) + p dtau and
    // v <- v(1 - dtau)^2 + 2 lambda dtau exactly in expectation.
    let prob = lq_problem(0.25);
    let (p, s) = (0.3, -0.3);
    let particles = 20_000;
    let dtau = 1e-3;
    let mut ens = ParticleEnsemble::from_gaussian(0.4, particles, 2.0, 0.5, 77, 0);
    let m0 = empirical_moments(&ens).unwrap();
    let (mut m, mut v) = (m0.mean, m0.var);
    for _ in 0..200 {
        ens.langevin_step(p, s, &prob, dtau, DEFAULT_BLOWUP_GUARD)
            .unwrap();
        m = m * (1.0 - dtau) + p * dtau;
        v = v * (1.0 - dtau) * (1.0 - dtau) + 2.0 * 0.25 * dtau;
    }
    let mk = empirical_moments(&ens).unwrap();
    let se_mean = (v / particles as f64).sqrt();
    let se_var = v * (2.0 / (particles as f64 - 1.0)).sqrt();
    assert!(
        (mk.mean - m).abs() <= 3.0 * se_mean,
        "mean {} vs {} (3se {})",
        mk.mean,
        m,
        3.0 * se_mean
    );
    assert!(
        (mk.var - v).abs() <= 3.0 * se_var,
        "var {} vs {} (3se {})",
        mk.var,
        v,
        3.0 * se_var
    );
}

#[test]
fn frozen_field_variance_matches_continuous_ou_law() {
    // Sampled at tau in {0.5, 1, 2, 5}: e^{-2Ntau} var0 + lambda(1-e^{-2Ntau})/N,
    // within 3 SE plus a small Euler-bias allowance.
    let prob = lq_problem(0.25);
    let particles = 20_000;
    let dtau = 1e-3;
    let mut ens = ParticleEnsemble::from_gaussian(0.0, particles, 0.0, 2.0, 13, 0);
    let var0 = empirical_moments(&ens).unwrap().var;
    let mut checks = 0;
    for step in 1..=5000usize {
        ens.langevin_step(0.0, 0.0, &prob, dtau, DEFAULT_BLOWUP_GUARD)
            .unwrap();
        let tau = step as f64 * dtau;
        if [0.5, 1.0, 2.0, 5.0].iter().any(|t| (tau - t).abs() < 1e-9) {
            let decay = (-2.0 * tau).exp();
            let want = decay * var0 + 0.25 * (1.0 - decay);
            let got = empirical_moments(&ens).unwrap().var;
            let tol = 3.0 * want * (2.0 / (particles as f64 - 1.0)).sqrt() + 0.01;
            assert!((got - want).abs() <= tol, "tau {tau}: {got} vs {want}");
            checks += 1;
        }
    }
    assert_eq!(checks, 4);
}

#[test]
fn deterministic_step_fixed_point_and_geometric_convergence() {
    let prob = lq_problem(0.0);
    let p = 0.55;
    // grad vanishes at u* = B p - Q = p; the step is exactly stationary.
    let u_star = p;
    assert_eq!(
        deterministic_step(0.0, u_star, p, 0.0, &prob, 1e-3, DEFAULT_BLOWUP_GUARD).unwrap(),
        u_star
    );
    let mut u = 5.0;
    let mut prev_grad = f64::INFINITY;
    for _ in 0..50_000 {
        u = deterministic_step(0.0, u, p, 0.0, &prob, 1e-3, DEFAULT_BLOWUP_GUARD).unwrap();
        let grad = (u_star - u).abs();
        assert!(grad <= prev_grad + 1e-15);
        prev_grad = grad;
    }
    assert!((u - u_star).abs() <= 1e-8, "u {} vs {}", u, u_star);
}

#[test]
fn empirical_moments_hand_values_and_guards() {
    let ens = ParticleEnsemble::new(0.0, vec![-1.0, 1.0, -1.0, 1.0], 1, 0);
    let m = empirical_moments(&ens).unwrap();
    assert_eq!(m.mean, 0.0);
    assert!((m.var - 4.0 / 3.0).abs() < 1e-15);
    assert_eq!(m.skewness, 0.0);
    assert!((m.excess_kurtosis - (-2.0)).abs() < 1e-15);
    assert!(!m.degenerate_spread);

    let small = ParticleEnsemble::new(0.0, vec![-1.0, 1.0, 0.0], 1, 0);
    assert!(matches!(
        empirical_moments(&small),
        Err(PolicyError::TooFewParticles { have: 3, need: 4 })
    ));

    let flat = ParticleEnsemble::new(0.0, vec![2.5; 16], 1, 0);
    let m = empirical_moments(&flat).unwrap();
    assert!(m.degenerate_spread);
    assert_eq!((m.mean, m.var, m.skewness, m.excess_kurtosis), (2.5, 0.0, 0.0, 0.0));
}

#[test]
fn empirical_moments_of_gaussian_sample_are_within_asymptotic_bands() {
    let n = 100_000;
    let ens = ParticleEnsemble::from_gaussian(0.0, n, 0.0, 1.0, 2024, 0);
    let m = empirical_moments(&ens).unwrap();
    let nf = n as f64;
    assert!(m.skewness.abs() <= 3.0 * (6.0 / nf).sqrt(), "skew {}", m.skewness);
    assert!(
        m.excess_kurtosis.abs() <= 3.0 * (24.0 / nf).sqrt(),
        "kurt {}",
        m.excess_kurtosis
    );
}

#[test]
fn entropy_gaussian_moment_path_matches_closed_form() {
    let ens = ParticleEnsemble::from_gaussian(0.0, 200, 0.3, 0.8, 5, 0);
    let var = empirical_moments(&ens).unwrap().var;
    let h = estimate_entropy(&ens, DensityEstimator::GaussianMoments).unwrap();
    assert_eq!(h, gaussian_entropy(var).unwrap());
}

#[test]
fn entropy_kde_matches_known_distributions() {
    // Uniform(0,1): differential entropy 0. The boundary bias of a kernel
    // estimate is a couple of hundredths; the tolerance covers it.
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let uniform: Vec<f64> = (0..100_000).map(|_| rng.gen::<f64>()).collect();
    let ens = ParticleEnsemble::new(0.0, uniform, 1, 0);
    let h = estimate_entropy(&ens, DensityEstimator::Kde).unwrap();
    assert!(h.abs() <= 0.03, "uniform entropy {h}");

    let normal = ParticleEnsemble::from_gaussian(0.0, 100_000, 0.0, 1.0, 7, 0);
    let h1 = estimate_entropy(&normal, DensityEstimator::Kde).unwrap();
    assert!((h1 - 1.4189385332046727).abs() <= 0.02, "normal entropy {h1}");

    // Scaling law: doubling the sample shifts entropy by ln 2.
    let doubled = ParticleEnsemble::new(
        0.0,
        normal.particles.iter().map(|u| 2.0 * u).collect(),
        1,
        0,
    );
    let h2 = estimate_entropy(&doubled, DensityEstimator::Kde).unwrap();
    assert!((h2 - h1 - 2.0f64.ln()).abs() <= 0.03, "scaling {}", h2 - h1);
}

#[test]
fn entropy_guards() {
    let few = ParticleEnsemble::from_gaussian(0.0, 49, 0.0, 1.0, 1, 0);
    assert!(matches!(
        estimate_entropy(&few, DensityEstimator::Kde),
        Err(PolicyError::TooFewParticles { need: 50, .. })
    ));
    let flat = ParticleEnsemble::new(0.0, vec![1.0; 64], 1, 0);
    for est in [DensityEstimator::GaussianMoments, DensityEstimator::Kde] {
        assert!(matches!(
            estimate_entropy(&flat, est),
            Err(PolicyError::DegenerateSpread)
        ));
    }
}

#[test]
fn stationarity_residual_is_statistically_zero_at_gibbs() {
    // Ensemble drawn from the exact Gibbs law N((Bp-Q)/N, lambda/N). The
    // moment-matched residual has mean 3 lambda N / P and standard deviation
    // sqrt(10) lambda N / P, so mean + 3 sd bounds it.
    let prob = lq_problem(0.25);
    let p = 0.7;
    let particles = 20_000;
    let ens = ParticleEnsemble::from_gaussian(0.0, particles, p, 0.5, 31, 0);
    let r = stationarity_residual(&ens, p, 0.0, &prob, DensityEstimator::GaussianMoments).unwrap();
    let bound = (3.0 + 3.0 * 10.0f64.sqrt()) * 0.25 / particles as f64;
    assert!(r <= bound, "residual {r} vs bound {bound}");
}

#[test]
fn stationarity_residual_zero_temperature_is_mean_squared_gradient() {
    let prob = lq_problem(0.0);
    let ens = ParticleEnsemble::from_gaussian(0.3, 50, 1.0, 0.5, 17, 0);
    let r = stationarity_residual(&ens, 0.2, 0.1, &prob, DensityEstimator::Kde).unwrap();
    let want = ens
        .particles
        .iter()
        .map(|&u| {
            let g = -u + 0.2;
            g * g
        })
        .sum::<f64>()
        / 50.0;
    assert_eq!(r, want);
}

#[test]
fn stationarity_residual_relaxes_under_langevin_flow() {
    let prob = lq_problem(0.25);
    let mut ens = ParticleEnsemble::from_gaussian(0.0, 2_000, 5.0, 0.5, 3, 0);
    let r0 = stationarity_residual(&ens, 0.0, 0.0, &prob, DensityEstimator::GaussianMoments)
        .unwrap();
    for _ in 0..20_000 {
        ens.langevin_step(0.0, 0.0, &prob, 1e-3, DEFAULT_BLOWUP_GUARD)
            .unwrap();
    }
    let r1 = stationarity_residual(&ens, 0.0, 0.0, &prob, DensityEstimator::GaussianMoments)
        .unwrap();
    assert!(r1 <= 0.05 * r0, "residual {r1} vs initial {r0}");
}

#[test]
fn kde_score_recovers_gaussian_score() {
    // With lambda = 1 and grad_u H = -u, an exact N(0,1) sample makes the
    // residual equal the mean squared error of the kernel score against -u.
    // A sign or scale defect in the score would push this to order 4.
    let mut lq = lq_default();
    lq.lambda = 1.0;
    let prob = lq_to_general(lq);
    let ens = ParticleEnsemble::from_gaussian(0.0, 20_000, 0.0, 1.0, 11, 0);
    let r = stationarity_residual(&ens, 0.0, 0.0, &prob, DensityEstimator::Kde).unwrap();
    assert!(r <= 0.1, "kde score mse {r}");
}

#[test]
fn synchronous_coupling_identical_inputs_stay_bitwise_equal() {
    let prob = lq_problem(0.25);
    let mut a = ParticleEnsemble::from_gaussian(0.1, 200, 0.0, 1.0, 9, 0);
    let mut b = a.clone();
    for _ in 0..200 {
        synchronous_couple_step(
            &mut a,
            &mut b,
            0.4,
            -0.2,
            0.4,
            -0.2,
            &prob,
            1e-3,
            DEFAULT_BLOWUP_GUARD,
        )
        .unwrap();
    }
    assert_eq!(a.particles, b.particles);
}

#[test]
fn synchronous_coupling_gap_contracts_geometrically() {
    // Same (p, S), initial per-particle gap 2: the noise cancels and each
    // gap obeys the deterministic recursion gap <- gap (1 - N dtau).
    let prob = lq_problem(0.25);
    let dtau = 1e-3;
    let mut a = ParticleEnsemble::from_gaussian(0.0, 500, 1.0, 0.7, 5, 0);
    let mut b = a.clone();
    for u in &mut b.particles {
        *u += 2.0;
    }
    let mut prev_ms_gap = f64::INFINITY;
    for _ in 0..1000 {
        synchronous_couple_step(
            &mut a,
            &mut b,
            0.4,
            -0.2,
            0.4,
            -0.2,
            &prob,
            dtau,
            DEFAULT_BLOWUP_GUARD,
        )
        .unwrap();
        let ms_gap = a
            .particles
            .iter()
            .zip(&b.particles)
            .map(|(ua, ub)| (ua - ub) * (ua - ub))
            .sum::<f64>()
            / 500.0;
        assert!(ms_gap <= prev_ms_gap + 1e-15);
        prev_ms_gap = ms_gap;
    }
    let want = 2.0 * (1.0 - dtau).powi(1000);
    for (ua, ub) in a.particles.iter().zip(&b.particles) {
        assert!(((ub - ua) - want).abs() <= 1e-9, "gap {} vs {}", ub - ua, want);
    }
}

#[test]
fn synchronous_coupling_rejects_size_mismatch() {
    let prob = lq_problem(0.25);
    let mut a = ParticleEnsemble::new(0.0, vec![0.0; 10], 1, 0);
    let mut b = ParticleEnsemble::new(0.0, vec![0.0; 11], 1, 1);
    assert!(matches!(
        synchronous_couple_step(
            &mut a,
            &mut b,
            0.0,
            0.0,
            0.0,
            0.0,
            &prob,
            1e-3,
            DEFAULT_BLOWUP_GUARD
        ),
        Err(PolicyError::SizeMismatch { left: 10, right: 11 })
    ));
}

#[test]
fn sequential_restart_keeps_a_true_maximizer() {
    let prob = lq_problem(0.25);
    let p = 0.55;
    let grid = linspace(-3.0, 3.0, 601);
    let (u, restarted) = sequential_restart(0.0, p, p, 0.0, &prob, &grid, 1e-6);
    assert_eq!((u, restarted), (p, false));
}

#[test]
fn sequential_restart_escapes_the_lower_well() {
    // Payoff -(u^2-1)^2 + 0.3u has a local peak near -0.96 and the global
    // peak near +1.04; starting at the lower peak must trigger a restart.
    let prob = double_well_problem();
    let grid = linspace(-3.0, 3.0, 601);
    let u_star = -0.96;
    let (u_new, restarted) = sequential_restart(0.5, u_star, 0.0, 0.0, &prob, &grid, 1e-6);
    assert!(restarted);
    assert!(u_new > 0.9 && u_new < 1.1, "u_new {u_new}");
    let h = |u: f64| -(u * u - 1.0) * (u * u - 1.0) + 0.3 * u;
    assert!(h(u_new) > h(u_star) + 0.5);
}

#[test]
fn blowup_guard_fires_for_nonconfining_hamiltonian() {
    let prob = ControlProblem {
        drift: Box::new(|_x, _u| 0.0),
        diffusion: Box::new(|_x, _u| 1.0),
        payoff: Box::new(|_x, u| u * u * u * u),
        drift_grad_u: Box::new(|_x, _u| 0.0),
        diffusion_grad_u: Box::new(|_x, _u| 0.0),
        payoff_grad_u: Box::new(|_x, u| 4.0 * u * u * u),
        discount: 1.0,
        temperature: 0.0,
        u_domain: (-10.0, 10.0),
        state_dim: 1,
        control_dim: 1,
        lq: None,
    };
    let mut ens = ParticleEnsemble::new(0.0, vec![50.0], 1, 0);
    assert!(matches!(
        ens.langevin_step(0.0, 0.0, &prob, 0.1, 1e3),
        Err(PolicyError::NumericalBlowup { .. })
    ));
    assert!(deterministic_step(0.0, 50.0, 0.0, 0.0, &prob, 0.1, 1e3).is_err());
}
