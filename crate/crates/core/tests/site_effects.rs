use exval::ols::CovarianceKind;
use exval::site_effects::{estimate_all, estimate_site_effect, estimate_site_effect_with, SiteEffectOptions};
use exval::synth::{generate, DgpConfig, OutcomeKind};
use exval::{Outcome, SiteData};
use proptest::prelude::*;

fn continuous_site(seed: u64, records: usize) -> SiteData {
    let cfg = DgpConfig {
        n_sites: 2,
        records_per_site: records,
        outcome_kind: OutcomeKind::Continuous,
        outcome_noise_sd: 0.3,
        seed,
        ..DgpConfig::default()
    };
    generate(&cfg).unwrap().0.sites()[0].clone()
}

#[test]
fn recovers_known_site_effect() {
    let cfg = DgpConfig {
        n_sites: 3,
        records_per_site: 20_000,
        seed: 3,
        ..DgpConfig::macro_driven(3, 20_000, 0.01, 3)
    };
    let (eb, oracle) = generate(&cfg).unwrap();
    for s in eb.sites() {
        let est = estimate_site_effect(s, Outcome::MoreKids).unwrap();
        let truth = oracle.truth(&s.key).unwrap().tau;
        assert!((est.tau - truth).abs() <= 3.0 * est.se, "{}: {} vs {truth} (se {})", s.key, est.tau, est.se);
    }
}

#[test]
fn robust_and_classical_agree_under_homoskedasticity() {
    let site = continuous_site(4, 10_000);
    let hc1 = estimate_site_effect(&site, Outcome::MoreKids).unwrap();
    let classical = estimate_site_effect_with(
        &site,
        Outcome::MoreKids,
        &SiteEffectOptions {
            covariance: CovarianceKind::Classical,
            ..SiteEffectOptions::default()
        },
    )
    .unwrap()
    .estimate;
    assert_eq!(hc1.tau, classical.tau);
    assert!((hc1.se / classical.se - 1.0).abs() < 0.10);
}

#[test]
fn one_estimate_per_site_and_reruns_identical() {
    let (eb, _) = generate(&DgpConfig {
        n_sites: 3,
        records_per_site: 800,
        ..DgpConfig::default()
    })
    .unwrap();
    let a = estimate_all(&eb, Outcome::MoreKids);
    let b = estimate_all(&eb, Outcome::MoreKids);
    assert_eq!(a.estimates.len(), 3);
    assert!(a.skipped.is_empty());
    assert_eq!(a.estimates, b.estimates);
}

#[test]
fn missing_outcome_goes_to_skip_list() {
    let (eb, _) = generate(&DgpConfig {
        n_sites: 3,
        records_per_site: 800,
        ..DgpConfig::default()
    })
    .unwrap();
    let mut sites = eb.sites().to_vec();
    for r in &mut sites[1].records {
        r.outcome_econ_active = None;
    }
    let eb = exval::EvidenceBase::new(sites, None).unwrap();
    let all = estimate_all(&eb, Outcome::EconActive);
    assert_eq!(all.estimates.len(), 2);
    assert_eq!(all.skipped.len(), 1);
    assert_eq!(all.skipped[0].site, eb.sites()[1].key);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn constant_outcome_shift_leaves_effect_unchanged(c in -50.0f64..50.0, seed in 0u64..1000) {
        let site = continuous_site(seed, 400);
        let base = estimate_site_effect(&site, Outcome::MoreKids).unwrap();
        let mut moved = site.clone();
        for r in &mut moved.records {
            r.continuous_outcome = r.continuous_outcome.map(|y| y + c);
        }
        let shifted = estimate_site_effect(&moved, Outcome::MoreKids).unwrap();
        prop_assert!((base.tau - shifted.tau).abs() <= 1e-9 * (1.0 + c.abs()));
        prop_assert!((base.se - shifted.se).abs() <= 1e-9 * (1.0 + c.abs()));
    }

    #[test]
    fn record_order_does_not_change_bits(seed in 0u64..1000, rot in 1usize..399) {
        let site = continuous_site(seed, 400);
        let base = estimate_site_effect(&site, Outcome::MoreKids).unwrap();
        let mut moved = site.clone();
        moved.records.rotate_left(rot);
        moved.records.reverse();
        let again = estimate_site_effect(&moved, Outcome::MoreKids).unwrap();
        prop_assert_eq!(base.tau.to_bits(), again.tau.to_bits());
        prop_assert_eq!(base.se.to_bits(), again.se.to_bits());
    }
}
