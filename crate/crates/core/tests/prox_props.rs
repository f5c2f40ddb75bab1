use mfcontrol::prox::ProxSpec;
use proptest::prelude::*;

fn objective(spec: &ProxSpec, tau: f64, a: f64, z: f64) -> f64 {
    0.5 * (z - a).powi(2) + tau * spec.penalty(&[z])
}

fn spec_strategy() -> impl Strategy<Value = ProxSpec> {
    prop_oneof![
        Just(ProxSpec::None),
        (0.0..3.0f64).prop_map(|w| ProxSpec::L1 { weight: w }),
        (-2.0..1.0f64, 0.0..2.0f64).prop_map(|(lo, w)| ProxSpec::Box { lo: vec![lo], hi: vec![lo + w] }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn grid_search_minimum_is_the_prox(spec in spec_strategy(), tau in 0.01..2.0f64, a in -4.0..4.0f64) {
        let z = spec.prox(tau, &[a])[0];
        let kappa = match &spec { ProxSpec::L1 { weight } => *weight, _ => 0.0 };
        let r = 5.0 * tau * kappa + 1.0;
        let (lo, hi) = match &spec {
            // the indicator is infinite off the box; search only inside it
            ProxSpec::Box { lo, hi } => ((a - r).max(lo[0]), (a + r).min(hi[0])),
            _ => (a - r, a + r),
        };
        let steps = ((hi - lo) / 1e-4).ceil() as usize;
        let mut best = (f64::INFINITY, lo);
        for i in 0..=steps {
            let y = (lo + i as f64 * 1e-4).min(hi);
            let v = objective(&spec, tau, a, y);
            if v < best.0 {
                best = (v, y);
            }
        }
        prop_assert!((best.1 - z).abs() <= 1e-4, "grid argmin {} vs prox {}", best.1, z);
        prop_assert!(objective(&spec, tau, a, z) <= best.0 + 1e-12);
    }

    #[test]
    fn prox_is_nonexpansive(spec in spec_strategy(), tau in 0.01..2.0f64, a in -4.0..4.0f64, b in -4.0..4.0f64) {
        let pa = spec.prox(tau, &[a])[0];
        let pb = spec.prox(tau, &[b])[0];
        prop_assert!((pa - pb).abs() <= (a - b).abs() + 1e-15);
    }

    #[test]
    fn soft_threshold_is_continuous_at_the_threshold(w in 0.01..3.0f64, tau in 0.01..2.0f64, sign in prop::bool::ANY) {
        let spec = ProxSpec::L1 { weight: w };
        let s = if sign { 1.0 } else { -1.0 };
        let th = w * tau;
        let above = spec.prox(tau, &[s * (th + 1e-12)])[0];
        let below = spec.prox(tau, &[s * (th - 1e-12)])[0];
        prop_assert!((above - below).abs() <= 2e-12);
        prop_assert_eq!(spec.prox(tau, &[s * th])[0], 0.0);
    }
}

#[test]
fn documented_values() {
    let l1 = ProxSpec::l1(1.0).unwrap();
    assert!((l1.prox(1.0 / 6.0, &[1.0])[0] - 5.0 / 6.0).abs() < 1e-15);
    assert_eq!(l1.prox(1.0 / 6.0, &[0.1])[0], 0.0);
    let b = ProxSpec::boxed(vec![-1.0], vec![1.0]).unwrap();
    assert_eq!(b.prox(0.3, &[3.0])[0], 1.0);
    assert_eq!(ProxSpec::None.prox(0.3, &[std::f64::consts::PI])[0], std::f64::consts::PI);
}
