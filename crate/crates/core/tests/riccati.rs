use mfcontrol::grid::{PolicyField, SpaceTimeGrid};
use mfcontrol::problems::{CuckerSmale, CuckerSmaleParams};
use mfcontrol::riccati::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Closed form of `a' = a^2/(2g) + 2K a - 2`, `a(T) = 2`, through the
/// roots of the quadratic right-hand side.
fn closed_form(k: f64, g: f64, horizon: f64, t: f64) -> f64 {
    let disc = (4.0 * g * g * k * k + 4.0 * g).sqrt();
    let (r1, r2) = (-2.0 * g * k + disc, -2.0 * g * k - disc);
    let ratio = (2.0 - r1) / (2.0 - r2) * ((r1 - r2) * (t - horizon) / (2.0 * g)).exp();
    (r1 - ratio * r2) / (1.0 - ratio)
}

/// Plain RK4 in reversed time `s = T - t`, independent of the library.
fn reversed_rk4(k: f64, g: f64, horizon: f64, h: f64) -> f64 {
    let f = |a: f64| -(a * a / (2.0 * g) + 2.0 * k * a - 2.0);
    let n = (horizon / h).round() as usize;
    let h = horizon / n as f64;
    let mut a = 2.0;
    for _ in 0..n {
        let k1 = f(a);
        let k2 = f(a + 0.5 * h * k1);
        let k3 = f(a + 0.5 * h * k2);
        let k4 = f(a + h * k3);
        a += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    a
}

#[test]
fn terminal_condition_is_exact() {
    for (k, g, t) in [(1.0, 0.1, 1.0), (0.5, 0.3, 2.0), (0.0, 1.0, 0.5)] {
        let s = solve_cs_riccati(k, g, t, 1e-4).unwrap();
        assert_eq!(*s.values.last().unwrap(), 2.0);
        assert_eq!(s.value(t).unwrap(), 2.0);
    }
}

#[test]
fn residual_below_tolerance_at_default_step() {
    for (k, g) in [(1.0, 0.1), (0.5, 0.2), (0.0, 0.5)] {
        let s = solve_cs_riccati(k, g, 1.0, DEFAULT_DT_ODE).unwrap();
        assert!(s.max_residual() <= 1e-6, "K={k} g={g}: {}", s.max_residual());
    }
}

#[test]
fn stiffer_parameters_need_a_finer_step() {
    // a''' near T grows like (a_T / g)^2 a'(T); the central-difference check
    // needs dt^2 a''' / 6 below the tolerance
    let coarse = solve_cs_riccati(2.0, 0.05, 1.0, DEFAULT_DT_ODE).unwrap();
    let fine = solve_cs_riccati(2.0, 0.05, 1.0, 1e-6).unwrap();
    assert!(fine.max_residual() <= 1e-6, "{}", fine.max_residual());
    assert!(fine.max_residual() < coarse.max_residual() / 50.0);
    assert!((fine.values[0] - closed_form(2.0, 0.05, 1.0, 0.0)).abs() < 1e-9);
}

#[test]
fn initial_value_matches_refined_integration() {
    let s = solve_cs_riccati(1.0, 0.1, 1.0, DEFAULT_DT_ODE).unwrap();
    let oracle = reversed_rk4(1.0, 0.1, 1.0, 2.5e-6);
    assert!((s.values[0] - oracle).abs() <= 1e-8, "{} vs {oracle}", s.values[0]);
    assert!((s.values[0] - closed_form(1.0, 0.1, 1.0, 0.0)).abs() <= 1e-8);
}

#[test]
fn whole_trajectory_matches_closed_form() {
    let s = solve_cs_riccati(1.0, 0.1, 1.0, 1e-4).unwrap();
    for (t, a) in s.times().zip(&s.values).step_by(97) {
        assert!((a - closed_form(1.0, 0.1, 1.0, t)).abs() < 1e-8, "t={t}");
    }
}

#[test]
fn long_horizon_approaches_the_stable_root() {
    let s = solve_cs_riccati(1.0, 0.1, 30.0, 1e-3).unwrap();
    let root = (-2.0 + 44f64.sqrt()) / 10.0;
    assert!((root - 0.46332).abs() < 1e-5);
    assert!((s.values[0] - root).abs() < 1e-10);
    assert!((2.0 * root + 5.0 * root * root - 2.0).abs() < 1e-12);
}

#[test]
fn invalid_arguments_are_rejected() {
    assert!(solve_cs_riccati(1.0, 0.1, 1.0, 2e-3).is_err());
    assert!(solve_cs_riccati(1.0, 0.0, 1.0, 1e-4).is_err());
    assert!(solve_cs_riccati(1.0, 0.1, -1.0, 1e-4).is_err());
}

#[test]
fn terminal_value_lies_in_the_basin_of_the_stable_root() {
    // a(T) = 2 sits above the negative root for any gamma1 > 0, so the
    // backward flow stays bounded and monotone toward the positive root
    for (k, g) in [(-5.0, 0.01), (0.0, 0.1), (3.0, 2.0)] {
        let s = solve_cs_riccati(k, g, 3.0, 1e-4).unwrap();
        let r1 = -2.0 * g * k + (4.0 * g * g * k * k + 4.0 * g).sqrt();
        let up = 2.0 > r1;
        for w in s.values.windows(2) {
            assert!(if up { w[0] <= w[1] } else { w[0] >= w[1] });
        }
    }
}

#[test]
fn feedback_examples() {
    let s = solve_cs_riccati(1.0, 0.1, 1.0, 1e-4).unwrap();
    let mean = vec![1.5; 26];
    assert_eq!(cs_lq_feedback(&s, &mean, 1.0, 0.3, 2.5).unwrap(), -10.0);
    for t in [0.0, 0.37, 0.9] {
        assert_eq!(cs_lq_feedback(&s, &mean, t, 7.0, 1.5).unwrap(), 0.0);
        assert!(cs_lq_feedback(&s, &mean, t, 0.0, 1.6).unwrap() < 0.0);
        assert!(cs_lq_feedback(&s, &mean, t, 0.0, 1.4).unwrap() > 0.0);
        // independent of x
        assert_eq!(
            cs_lq_feedback(&s, &mean, t, -3.0, 1.9).unwrap(),
            cs_lq_feedback(&s, &mean, t, 3.0, 1.9).unwrap()
        );
    }
    assert!(cs_lq_feedback(&s, &mean, -0.1, 0.0, 1.0).is_err());
    assert!(cs_lq_feedback(&s, &mean, 1.1, 0.0, 1.0).is_err());
}

#[test]
fn closed_loop_mean_velocity_is_conserved() {
    // the LQ feedback and the symmetric kernel both average to zero
    let p = CuckerSmale::new(CuckerSmaleParams::default()).unwrap();
    let s = solve_cs_riccati(1.0, 0.1, 1.0, 1e-4).unwrap();
    let mv = lq_mean_velocity(&p, &s, 20_000, 50, 3).unwrap();
    assert_eq!(mv.len(), 51);
    for m in &mv {
        assert!((m - 1.5).abs() < 0.01, "{m}");
    }
}

#[test]
fn csv_export_has_header_and_rows() {
    let s = solve_cs_riccati(1.0, 0.1, 1.0, 1e-3).unwrap();
    let mut buf = Vec::new();
    s.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "t,a");
    assert_eq!(lines.len(), s.values.len() + 1);
    let last: Vec<f64> = lines.last().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(last, vec![1.0, 2.0]);
}

fn field_from(g: &SpaceTimeGrid, f: impl Fn(usize, usize, &[f64]) -> f64) -> PolicyField {
    let mut pol = PolicyField::zeros(g.clone(), 1);
    for j in 0..=g.time_steps() {
        for k in 0..g.node_count() {
            pol.field_mut().at_mut(j, k)[0] = f(j, k, &g.node_point(k));
        }
    }
    pol
}

#[test]
fn affine_fit_recovers_exact_affine_policies() {
    let g = SpaceTimeGrid::new(1.0, 4, vec![0.0, -1.0], vec![2.0, 3.0], vec![9, 11]).unwrap();
    let pol = field_from(&g, |j, _, x| -0.5 * j as f64 * x[1] + 0.25 + 0.1 * j as f64);
    let fits = affine_fit_check(&pol, 1, None).unwrap();
    for (j, f) in fits.iter().enumerate() {
        assert!((f.slope + 0.5 * j as f64).abs() < 1e-12);
        assert!((f.intercept - 0.25 - 0.1 * j as f64).abs() < 1e-12);
        assert!(f.residual < 1e-12);
    }
}

#[test]
fn constant_policy_has_zero_slope() {
    let g = SpaceTimeGrid::new(1.0, 2, vec![0.0, 0.0], vec![1.0, 1.0], vec![5, 5]).unwrap();
    let fits = affine_fit_check(&field_from(&g, |_, _, _| 3.0), 0, None).unwrap();
    for f in fits {
        assert!(f.slope.abs() < 1e-12 && (f.intercept - 3.0).abs() < 1e-12 && f.residual < 1e-12);
    }
    let zero = affine_fit_check(&field_from(&g, |_, _, _| 0.0), 0, None).unwrap();
    assert!(zero.iter().all(|f| f.residual == 0.0));
}

#[test]
fn pure_noise_residual_is_near_one() {
    let g = SpaceTimeGrid::new(1.0, 3, vec![0.0, 0.0], vec![1.0, 1.0], vec![41, 41]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let noise: Vec<f64> = (0..4 * g.node_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = g.node_count();
    let pol = field_from(&g, |j, k, _| noise[j * n + k]);
    for f in affine_fit_check(&pol, 0, None).unwrap() {
        assert!((f.residual - 1.0).abs() < 0.05, "{}", f.residual);
    }
}

#[test]
fn fit_region_restricts_nodes() {
    let g = SpaceTimeGrid::new(1.0, 1, vec![0.0, 0.0], vec![4.0, 4.0], vec![9, 9]).unwrap();
    // affine inside [1,3]^2, garbage outside
    let pol = field_from(&g, |_, _, x| {
        if (1.0..=3.0).contains(&x[0]) && (1.0..=3.0).contains(&x[1]) { 2.0 * x[1] - 1.0 } else { 100.0 }
    });
    let lo = [1.0, 1.0];
    let hi = [3.0, 3.0];
    let fits = affine_fit_check(&pol, 1, Some((&lo, &hi))).unwrap();
    assert!((fits[0].slope - 2.0).abs() < 1e-12 && fits[0].residual < 1e-12);
    assert!(affine_fit_check(&pol, 1, None).unwrap()[0].residual > 0.1);
    assert!(affine_fit_check(&pol, 2, None).is_err());
}
