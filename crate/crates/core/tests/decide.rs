use exval::decide::{decide, prediction_interval, Decision, DecideOptions, Verdict};
use exval::synth::{generate, DgpConfig};
use exval::{CovariateSet, Outcome};
use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};

#[test]
fn decide_is_deterministic() {
    let (eb, _) = generate(&DgpConfig::macro_driven(10, 800, 0.02, 8)).unwrap();
    let opts = DecideOptions {
        covariate_set: CovariateSet::Macro,
        bootstrap_reps: 20,
        seed: 3,
        ..DecideOptions::default()
    };
    let target = eb.sites()[4].key.clone();
    let a = decide(&eb, Outcome::MoreKids, &target, 0.05, &opts).unwrap();
    let b = decide(&eb, Outcome::MoreKids, &target, 0.05, &opts).unwrap();
    assert_eq!(a.decision, b.decision);
    assert!(!a.reference_sites.contains(&target));
}

proptest! {
    #[test]
    fn interval_matches_t_formula(
        point in -1.0f64..1.0,
        sz in 0.0f64..0.01,
        s1 in 0.0f64..0.01,
        alpha in 0.01f64..0.5,
        df in 1.0f64..200.0,
        c in -1.5f64..1.5,
    ) {
        let iv = prediction_interval(point, sz, s1, alpha, df).unwrap();
        let q = StudentsT::new(0.0, 1.0, df).unwrap().inverse_cdf(1.0 - alpha / 2.0);
        prop_assert!(iv.lower <= iv.point && iv.point <= iv.upper);
        prop_assert!((iv.width() - 2.0 * q * (sz + s1).sqrt()).abs() <= 1e-9);
        let d = Decision::new(c, iv.clone());
        prop_assert_eq!(d.verdict == Verdict::Experiment, iv.lower <= c && c <= iv.upper);
    }
}
