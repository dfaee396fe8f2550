use exval::heterogeneity::{cochran_q, cochran_q_raw, pearson_test, wsf_statistic, wsf_test};
use exval::{EffectEstimate, Outcome, SiteKey};
use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

fn estimates(tau: &[f64], se: &[f64]) -> Vec<EffectEstimate> {
    tau.iter()
        .zip(se)
        .enumerate()
        .map(|(i, (&t, &s))| EffectEstimate {
            site: SiteKey::new(format!("S{i:03}"), 1990),
            outcome: Outcome::MoreKids,
            tau: t,
            se: s,
            n: None,
            covariate_set: String::new(),
        })
        .collect()
}

#[test]
fn two_effect_hand_example() {
    let q = cochran_q(&estimates(&[0.0, 0.2], &[0.1, 0.1])).unwrap();
    assert!((q.weighted_mean - 0.1).abs() < 1e-15);
    assert!((q.q - 2.0).abs() < 1e-12);
    assert_eq!(q.df, 1);
}

#[test]
fn identical_effects_have_zero_q() {
    let q = cochran_q(&estimates(&[0.05; 3], &[0.01; 3])).unwrap();
    assert_eq!(q.q, 0.0);
    assert_eq!(q.p_value, 1.0);
}

/// Unweighted Shapiro–Francia W′ from its textbook definition.
fn shapiro_francia(x: &[f64]) -> f64 {
    let n = x.len();
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let norm = Normal::new(0.0, 1.0).unwrap();
    let m: Vec<f64> = (1..=n)
        .map(|i| norm.inverse_cdf((i as f64 - 0.375) / (n as f64 + 0.25)))
        .collect();
    let mbar = m.iter().sum::<f64>() / n as f64;
    let xbar = s.iter().sum::<f64>() / n as f64;
    let sxy: f64 = s.iter().zip(&m).map(|(a, b)| (a - xbar) * (b - mbar)).sum();
    let sxx: f64 = s.iter().map(|a| (a - xbar).powi(2)).sum();
    let syy: f64 = m.iter().map(|b| (b - mbar).powi(2)).sum();
    sxy * sxy / (sxx * syy)
}

#[test]
fn wsf_reproducible_given_seed() {
    let tau: Vec<f64> = (0..30).map(|i| ((i * 37) % 11) as f64 * 0.01).collect();
    let e = estimates(&tau, &vec![0.02; 30]);
    let a = wsf_test(&e, 500, 9).unwrap();
    let b = wsf_test(&e, 500, 9).unwrap();
    assert_eq!(a.p_value.to_bits(), b.p_value.to_bits());
    assert!((0.0..=1.0).contains(&a.p_value));
}

#[test]
fn correlation_of_unrelated_effects_is_small() {
    let n = 200;
    let mut hits = 0;
    let worlds = 200;
    for w in 0..worlds {
        let mut rng = exval::rng::stream_rng(5, w);
        use rand_distr::{Distribution, StandardNormal};
        let tau: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let c = pearson_test(&v, &tau).unwrap();
        hits += usize::from(c.r.abs() < 0.2);
    }
    assert!(hits as f64 / worlds as f64 >= 0.95, "{hits}/{worlds}");
}

fn effects() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (5usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(-1.0f64..1.0, n),
            prop::collection::vec(0.01f64..0.5, n),
        )
    })
}

proptest! {
    #[test]
    fn q_invariant_to_order_and_joint_scale((tau, se) in effects(), k in 0.01f64..100.0, rot in 0usize..40) {
        let (q, _) = cochran_q_raw(&tau, &se).unwrap();
        let r = rot % tau.len();
        let mut t2 = tau.clone();
        let mut s2 = se.clone();
        t2.rotate_left(r);
        s2.rotate_left(r);
        t2.reverse();
        s2.reverse();
        let (q_perm, _) = cochran_q_raw(&t2, &s2).unwrap();
        let ts: Vec<f64> = tau.iter().map(|v| v * k).collect();
        let ss: Vec<f64> = se.iter().map(|v| v * k).collect();
        let (q_scaled, _) = cochran_q_raw(&ts, &ss).unwrap();
        prop_assert!(q >= 0.0);
        prop_assert!((q - q_perm).abs() <= 1e-9 * q.max(1.0));
        prop_assert!((q - q_scaled).abs() <= 1e-9 * q.max(1.0));
    }

    #[test]
    fn wsf_invariant_to_positive_affine_maps((tau, se) in effects(), a in 0.01f64..50.0, b in -5.0f64..5.0) {
        let w: Vec<f64> = se.iter().map(|s| 1.0 / (s * s)).collect();
        let s0 = wsf_statistic(&tau, &w);
        let moved: Vec<f64> = tau.iter().map(|t| a * t + b).collect();
        let s1 = wsf_statistic(&moved, &w);
        prop_assert!((s0 - s1).abs() <= 1e-9);
        prop_assert!(s0 > 0.0 && s0 <= 1.0 + 1e-12);
    }

    #[test]
    fn wsf_with_equal_weights_is_shapiro_francia((tau, _) in effects()) {
        let w = vec![1.0; tau.len()];
        prop_assert!((wsf_statistic(&tau, &w) - shapiro_francia(&tau)).abs() <= 1e-10);
    }
}
