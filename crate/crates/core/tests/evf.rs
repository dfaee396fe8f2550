use exval::evf::{build_dyads_with_estimates, dyadic_meat, local_linear_evf, DiffVar, DyadOptions, EvfOptions};
use exval::site_effects::estimate_all;
use exval::synth::{generate, DgpConfig};
use exval::{EvidenceBase, Outcome};
use proptest::prelude::*;

fn world() -> EvidenceBase {
    generate(&DgpConfig::macro_driven(7, 600, 0.01, 4)).unwrap().0
}

#[test]
fn swapping_reference_and_target_negates_antisymmetric_diffs() {
    let eb = world();
    let est = estimate_all(&eb, Outcome::MoreKids).estimates;
    let set = build_dyads_with_estimates(&eb, Outcome::MoreKids, &est, &DyadOptions::default()).unwrap();
    assert_eq!(set.len(), 7 * 6);
    for d in &set.dyads {
        assert_ne!(d.reference, d.target);
        let back = set
            .dyads
            .iter()
            .find(|e| e.reference == d.target && e.target == d.reference)
            .unwrap();
        for (k, v) in set.vars.iter().enumerate() {
            if v.is_antisymmetric() {
                assert_eq!(d.diffs[k], -back.diffs[k], "{v:?}");
            } else {
                assert_eq!(d.diffs[k], back.diffs[k], "{v:?}");
            }
        }
    }
}

#[test]
fn dyads_do_not_depend_on_input_site_order() {
    let eb = world();
    let est = estimate_all(&eb, Outcome::MoreKids).estimates;
    let mut sites = eb.sites().to_vec();
    sites.reverse();
    let shuffled = EvidenceBase::new(sites, None).unwrap();
    let opts = DyadOptions::default();
    let a = build_dyads_with_estimates(&eb, Outcome::MoreKids, &est, &opts).unwrap();
    let b = build_dyads_with_estimates(&shuffled, Outcome::MoreKids, &est, &opts).unwrap();
    assert_eq!(a, b);
}

#[test]
fn band_contains_fitted_curve() {
    let eb = world();
    let est = estimate_all(&eb, Outcome::MoreKids).estimates;
    let set = build_dyads_with_estimates(&eb, Outcome::MoreKids, &est, &DyadOptions::default()).unwrap();
    let curve = local_linear_evf(&set, DiffVar::EducOwn, &EvfOptions::default()).unwrap();
    for i in 0..curve.grid.len() {
        if curve.fitted[i].is_finite() {
            assert!(curve.lower[i] <= curve.fitted[i] && curve.fitted[i] <= curve.upper[i]);
        }
    }
}

proptest! {
    #[test]
    fn dyadic_meat_dominates_hc_meat_for_nonnegative_scores(
        scores in prop::collection::vec(0.0f64..2.0, 2..30),
        seed in any::<u64>(),
    ) {
        let n_sites = 6;
        let pairs: Vec<(usize, usize)> = (0..scores.len())
            .map(|i| {
                let a = (seed.rotate_left(i as u32) as usize + i) % n_sites;
                let b = (a + 1 + i % (n_sites - 1)) % n_sites;
                (a, b)
            })
            .collect();
        let s: Vec<Vec<f64>> = scores.iter().map(|&v| vec![v]).collect();
        let meat = dyadic_meat(&s, &pairs, n_sites);
        let hc: f64 = scores.iter().map(|v| v * v).sum();
        prop_assert!(meat[(0, 0)] >= hc - 1e-12);
    }
}
