//! Closed-form linear-quadratic analytics against independent references.
//!
//! The initial-coefficient values are frozen from a discounted-moment
//! derivation and confirmed by the Monte Carlo rollout fit in the value-layer
//! tests. The quotient-certificate dynamics are checked against a two-run gap
//! reference built from the plain coefficient ODEs, which never forms the
//! quotients and so exercises independent arithmetic.

use pvi::lq_oracle::{
    coeff_rhs, gaussian_entropy, initial_coeffs, initial_mean_sensitivity, integrate_oracle,
    lq_ode_rhs, ou_moments, stationary_coeffs, yz_certificate, LQState, LqError, OdeScheme,
};
use pvi::model::LQProblem;

#[allow(clippy::too_many_arguments)]
fn lq(a: f64, b: f64, c: f64, m: f64, n: f64, p: f64, q: f64, beta: f64, lambda: f64) -> LQProblem {
    LQProblem {
        a,
        b,
        c,
        m,
        n,
        p,
        q,
        beta,
        lambda,
    }
}

fn lq_default() -> LQProblem {
    lq(-1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 0.25)
}

#[test]
fn initial_coeffs_match_frozen_hand_derivation() {
    // A=-1, B=1, C=0.5, M=1, N=1, P=0.5, Q=0.5, beta=1, mean 0.3:
    // beta - 2A - C^2 = 2.75, beta - A = 2, so a2 = -1/2.75 and
    // a1 = -0.3/(2.75*2) - 0.5/2. Values confirmed by the rollout fit test.
    let q = lq(-1.0, 1.0, 0.5, 1.0, 1.0, 0.5, 0.5, 1.0, 0.25);
    let (a1, a2) = initial_coeffs(&q, 0.3).unwrap();
    assert!((a2 - (-0.36363636363636365)).abs() < 1e-14);
    assert!((a1 - (-0.30454545454545456)).abs() < 1e-14);
}

#[test]
fn initial_coeffs_zero_cost_and_mean_independent_cases() {
    let q = lq(-1.0, 1.0, 0.5, 0.0, 1.0, 0.0, 0.2, 1.0, 0.25);
    assert_eq!(initial_coeffs(&q, 0.7).unwrap(), (0.0, 0.0));
    // With mean zero the linear coefficient reduces to -P/(beta - A).
    let q = lq(-1.0, 1.0, 0.0, 1.0, 1.0, 0.8, 0.0, 1.0, 0.25);
    let (a1, _) = initial_coeffs(&q, 0.0).unwrap();
    assert!((a1 - (-0.4)).abs() < 1e-14);
    // A nonzero mean contributes -B M mu0 / ((beta - 2A)(beta - A)) even at
    // C = 0: the diffusion never enters the cross-moment channel.
    let (a1, _) = initial_coeffs(&q, 0.6).unwrap();
    assert!((a1 - (-0.6 / 6.0 - 0.4)).abs() < 1e-14);
    let slope = initial_mean_sensitivity(&q).unwrap();
    assert!((slope - (-1.0 / 6.0)).abs() < 1e-15);
}

#[test]
#[allow(clippy::excessive_precision)]
fn stationary_coeffs_match_frozen_values_and_fixed_point_algebra() {
    let st = stationary_coeffs(&lq_default()).unwrap();
    // a2* = -2/(3 + sqrt(13)), a1* = 1/(-2 + a2*), frozen to full precision.
    assert!((st.a2_star - (-0.30277563773199462)).abs() < 1e-15);
    assert!((st.a1_star - (-0.43425854591066487)).abs() < 1e-15);
    assert!((st.i2_star - st.a2_star).abs() < 1e-15);
    // Independent check: the limits are a fixed point of the dynamics.
    let q = lq_default();
    let s = LQState {
        a0: 0.0,
        a1: st.a1_star,
        a2: st.a2_star,
        i1: st.a1_star / q.n,
        i2: st.i2_star,
        mu: (q.b * st.a1_star - q.q) / q.n,
        var: q.lambda / q.n,
        tau: 60.0,
    };
    let d = lq_ode_rhs(&s, &q, 0.4).unwrap();
    for v in [d.da1, d.da2, d.di1, d.di2, d.dmu, d.dvar] {
        assert!(v.abs() <= 1e-10, "residual {v}");
    }
}

#[test]
fn stationary_coeffs_degenerate_cases() {
    // M = 0: uncontrolled cost, curvature limit 0.
    let st = stationary_coeffs(&lq(-1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.25)).unwrap();
    assert_eq!(st.a2_star, 0.0);
    // B = 0: the square root collapses and a2* equals the initial value.
    let q = lq(-1.0, 0.0, 0.5, 2.0, 1.0, 0.0, 0.0, 1.0, 0.25);
    let st = stationary_coeffs(&q).unwrap();
    let (_, a2_0) = initial_coeffs(&q, 0.0).unwrap();
    assert!((st.a2_star - a2_0).abs() < 1e-12);
    assert!(stationary_coeffs(&lq(-1.0, 1.0, 2.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.25)).is_err());
}

#[test]
fn ou_moments_match_hand_values() {
    let (m, v) = ou_moments(1.0, 0.5, 0.3, 2.0, 0.7, 0.0);
    assert_eq!((m, v), (0.3, 2.0));
    let (m, v) = ou_moments(1.0, 0.5, 0.3, 2.0, 0.7, 1e6);
    assert!((m - 0.7).abs() < 1e-12 && (v - 0.5).abs() < 1e-12);
    // tau = ln 2: var = 0.25 * 2 + 0.5 * 0.75.
    let (_, v) = ou_moments(1.0, 0.5, 0.0, 2.0, 0.0, std::f64::consts::LN_2);
    assert!((v - 0.875).abs() < 1e-12);
}

#[test]
fn gaussian_entropy_matches_hand_values_and_scaling() {
    let v0 = 1.0 / (2.0 * std::f64::consts::PI * std::f64::consts::E);
    assert!(gaussian_entropy(v0).unwrap().abs() < 1e-14);
    assert!((gaussian_entropy(1.0).unwrap() - 1.4189385332046727).abs() < 1e-14);
    for &v in &[0.3, 1.0, 7.5] {
        let diff = gaussian_entropy(4.0 * v).unwrap() - gaussian_entropy(v).unwrap();
        assert!((diff - 2.0_f64.ln()).abs() < 1e-12);
    }
    assert!(matches!(
        gaussian_entropy(0.0),
        Err(LqError::NonPositiveVariance(_))
    ));
}

#[test]
fn integration_reaches_stationary_limits_monotonically() {
    let q = lq_default();
    let st = stationary_coeffs(&q).unwrap();
    let traj = integrate_oracle(&q, 0.0, 1.0, 0.0, 50.0, 1e-3, OdeScheme::Euler, 100).unwrap();
    let first = traj.first().unwrap();
    assert_eq!((first.i1, first.i2, first.tau), (0.0, 0.0, 0.0));
    let last = traj.last().unwrap();
    assert!((last.a2 - st.a2_star).abs() <= 1e-4 * st.a2_star.abs());
    assert!((last.a1 - st.a1_star).abs() <= 1e-4 * st.a1_star.abs());
    // |a2 - a2*| never increases along the trajectory.
    let mut prev = f64::INFINITY;
    for s in &traj {
        let d = (s.a2 - st.a2_star).abs();
        assert!(d <= prev + 1e-15, "overshoot at tau {}", s.tau);
        prev = d;
    }
    // Euler-integrated variance tracks the closed form within 10 dtau.
    for s in &traj {
        let (_, v) = ou_moments(q.n, q.lambda, 0.0, 1.0, 0.0, s.tau);
        assert!((s.var - v).abs() <= 10.0 * 1e-3, "var drift at tau {}", s.tau);
    }
}

#[test]
fn entropy_of_relaxing_variance_increases_with_temperature() {
    // var0 below the stationary level lambda/N: larger lambda gives a larger
    // variance at every tau, hence larger entropy.
    let mut prev = f64::NEG_INFINITY;
    for &lambda in &[0.1, 0.2, 0.4, 0.8] {
        let (_, v) = ou_moments(1.0, lambda, 0.0, 0.05, 0.0, 0.7);
        let h = gaussian_entropy(v).unwrap();
        assert!(h > prev);
        prev = h;
    }
}

#[test]
fn zero_control_coupling_freezes_curvature() {
    let q = lq(-1.0, 0.0, 0.5, 2.0, 1.0, 0.3, 0.0, 1.0, 0.25);
    let (_, a2_0) = initial_coeffs(&q, 0.0).unwrap();
    let mut s = LQState {
        a0: 0.0,
        a1: -0.1,
        a2: a2_0,
        i1: 0.0,
        i2: 0.0,
        mu: 0.0,
        var: 1.0,
        tau: 0.0,
    };
    for _ in 0..100 {
        let d = lq_ode_rhs(&s, &q, 0.0).unwrap();
        assert!(d.da2.abs() <= 1e-12);
        s.a2 += 1e-3 * d.da2;
        s.i2 += 1e-3 * d.di2;
        s.i1 += 1e-3 * d.di1;
        s.a1 += 1e-3 * d.da1;
        s.tau += 1e-3;
    }
    assert!((s.a2 - a2_0).abs() <= 1e-10);
}

#[test]
fn rk4_agrees_with_fine_euler() {
    let q = lq_default();
    let fine = integrate_oracle(&q, 0.2, 1.0, 0.0, 5.0, 1e-5, OdeScheme::Euler, 100_000).unwrap();
    let rk = integrate_oracle(&q, 0.2, 1.0, 0.0, 5.0, 1e-2, OdeScheme::Rk4, 1_000).unwrap();
    let (fe, re) = (fine.last().unwrap(), rk.last().unwrap());
    assert!((fe.a1 - re.a1).abs() < 1e-6);
    assert!((fe.a2 - re.a2).abs() < 1e-6);
    assert!((fe.a0 - re.a0).abs() < 1e-6);
}

#[test]
fn coeff_rhs_is_shared_arithmetic_for_the_oracle() {
    // The full rhs must assemble its value-coefficient components through
    // coeff_rhs with the closed-form mean, bit for bit.
    let q = lq_default();
    let s = LQState {
        a0: -0.2,
        a1: -0.4,
        a2: -0.3,
        i1: -0.35,
        i2: -0.28,
        mu: -0.41,
        var: 0.3,
        tau: 0.8,
    };
    let mu0 = 0.15;
    let decay = (-q.n * s.tau).exp();
    let g = decay * mu0 - (1.0 - decay) * q.q / q.n + q.b * s.i1;
    let (da0, da1, da2) = coeff_rhs(&q, s.a0, s.a1, s.a2, s.i2, g, s.var).unwrap();
    let d = lq_ode_rhs(&s, &q, mu0).unwrap();
    assert_eq!((d.da0, d.da1, d.da2), (da0, da1, da2));
}

/// Two-run gap reference for the quotient certificate: integrate the plain
/// coefficient ODEs for a pair of initial means, and form the gap ratios
/// directly. This never touches the quotient dynamics.
fn two_run_gap_reference(
    q: &LQProblem,
    mu0_a: f64,
    mu0_b: f64,
    tau_max: f64,
    dtau: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mk = |mu0: f64| {
        let (a1, a2) = initial_coeffs(q, mu0).unwrap();
        LQState {
            a0: 0.0,
            a1,
            a2,
            i1: 0.0,
            i2: 0.0,
            mu: mu0,
            var: q.lambda / q.n,
            tau: 0.0,
        }
    };
    let (mut sa, mut sb) = (mk(mu0_a), mk(mu0_b));
    let steps = (tau_max / dtau).round() as usize;
    let (mut taus, mut ys, mut zs) = (vec![], vec![], vec![]);
    let mu_gap = mu0_a - mu0_b;
    for k in 0..=steps {
        let tau = k as f64 * dtau;
        let da1 = sa.a1 - sb.a1;
        taus.push(tau);
        ys.push((sa.i1 - sb.i1) / da1);
        zs.push((-q.n * tau).exp() * mu_gap / da1);
        if k == steps {
            break;
        }
        for (s, mu0) in [(&mut sa, mu0_a), (&mut sb, mu0_b)] {
            let d = lq_ode_rhs(s, q, mu0).unwrap();
            s.a1 += dtau * d.da1;
            s.a2 += dtau * d.da2;
            s.i1 += dtau * d.di1;
            s.i2 += dtau * d.di2;
            s.tau += dtau;
        }
    }
    (taus, ys, zs)
}

#[test]
fn certificate_quotients_track_two_run_gap_reference() {
    // Pole-free regime: N = 10, A = -2. The mean-offset pairing uses the
    // initial-coefficient slope so that both runs start on the consistent curve.
    let q = lq(-2.0, 1.0, 0.5, 1.0, 10.0, 0.0, 0.0, 1.0, 0.25);
    let slope = initial_mean_sensitivity(&q).unwrap();
    let (mu0_a, mu0_b) = (1.0, -1.0);
    let mu_gap = mu0_a - mu0_b;
    let a1_gap0 = slope * mu_gap;
    let dtau = 1e-4;
    let cert = yz_certificate(&q, mu_gap, a1_gap0, 6.0, dtau).unwrap();
    assert!((cert.z[0] - (-14.25)).abs() < 1e-12);
    assert_eq!(cert.y[0], 0.0);
    // Slope-consistent pairings start the gap coefficient exactly at +beta.
    assert!((cert.coefficient[0] - q.beta).abs() < 1e-9);
    let (_, y_ref, z_ref) = two_run_gap_reference(&q, mu0_a, mu0_b, 6.0, dtau);
    assert_eq!(cert.y.len(), y_ref.len());
    let mut worst_y = 0.0f64;
    let mut worst_z = 0.0f64;
    for i in 0..y_ref.len() {
        worst_y = worst_y.max((cert.y[i] - y_ref[i]).abs());
        worst_z = worst_z.max((cert.z[i] - z_ref[i]).abs());
    }
    // A sign flip on the quadratic Z term moves worst_z to order 1; the
    // correct dynamics track the reference at discretization error.
    assert!(worst_y <= 1e-4, "worst Y deviation {worst_y}");
    assert!(worst_z <= 5e-3, "worst Z deviation {worst_z}");
    // Long-horizon limits: Y to its closed form, Z to zero.
    let st = stationary_coeffs(&q).unwrap();
    let y_limit = 1.0 / (q.n + q.a - q.beta + q.b * q.b * st.a2_star / q.n);
    assert!((cert.y.last().unwrap() - y_limit).abs() <= 1e-5);
    assert!(cert.z.last().unwrap().abs() <= 1e-8);
}

#[test]
fn certificate_is_negative_on_the_stiff_regime_window() {
    // Large N, |A|, M: the a1-offset pairing keeps the coefficient strictly
    // negative on the window where the quotients are defined.
    let q = lq(-10.0, 1.0, 0.5, 1e4, 10.0, 0.0, 0.0, 1.0, 0.25);
    let cert = yz_certificate(&q, 0.0, 1.0, 0.1, 1e-5).unwrap();
    assert_eq!(cert.coefficient[0], q.a);
    for (tau, c) in cert.taus.iter().zip(&cert.coefficient) {
        assert!(*c <= -9.0, "coefficient {c} at tau {tau}");
    }
    // Mean-offset pairings on the same problem still start at +beta: the
    // identity B a2(0) Z(0) = beta - A holds for every parameter choice.
    let slope = initial_mean_sensitivity(&q).unwrap();
    let cert = yz_certificate(&q, 2.0, 2.0 * slope, 0.01, 1e-5).unwrap();
    assert!((cert.coefficient[0] - q.beta).abs() < 1e-9);
}

#[test]
fn certificate_rejects_degenerate_inputs() {
    let q = lq_default();
    assert!(yz_certificate(&q, 1.0, 0.0, 1.0, 1e-3).is_err());
    let b0 = lq(-1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.25);
    assert!(yz_certificate(&b0, 1.0, 1.0, 1.0, 1e-3).is_err());
    let m0 = lq(-1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.25);
    assert!(yz_certificate(&m0, 1.0, 1.0, 1.0, 1e-3).is_err());
}
