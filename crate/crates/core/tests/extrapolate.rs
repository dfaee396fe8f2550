use exval::extrapolate::{extrapolate_effect, MomentCache, SurfaceOptions};
use exval::synth::{generate, DgpConfig};
use exval::{CovariateSet, EvidenceBase, Outcome, SeriesSchema};
use proptest::prelude::*;

fn world(n: usize, records: usize, seed: u64) -> EvidenceBase {
    generate(&DgpConfig::macro_driven(n, records, 0.01, seed)).unwrap().0
}

fn loo_effect(eb: &EvidenceBase, set: CovariateSet, target: usize) -> (f64, Vec<usize>, Vec<usize>) {
    let opts = SurfaceOptions {
        subsample_cap: None,
        ..SurfaceOptions::default()
    };
    let cache = MomentCache::for_set(eb, Outcome::MoreKids, &SeriesSchema::default(), set, &opts).unwrap();
    let refs: Vec<usize> = (0..eb.len()).filter(|&i| i != target).collect();
    let surf = cache.fit(&refs).unwrap();
    for arm in [&surf.treated, &surf.control] {
        assert!(arm.coefficients.iter().all(|c| c.is_finite()));
        assert!(arm.rss <= arm.tss * (1.0 + 1e-12));
    }
    let value = extrapolate_effect(&cache.spec, &surf, &eb.sites()[target]).unwrap().value;
    (value, surf.treated.selected.clone(), surf.control.selected.clone())
}

#[test]
fn none_set_is_pooled_difference_in_means() {
    let eb = world(6, 700, 2);
    let (value, _, _) = loo_effect(&eb, CovariateSet::None, 0);
    let (mut sum, mut n) = ([0.0; 2], [0usize; 2]);
    for s in &eb.sites()[1..] {
        for r in &s.records {
            let arm = usize::from(r.treated);
            sum[arm] += r.outcome(Outcome::MoreKids).unwrap();
            n[arm] += 1;
        }
    }
    let direct = sum[1] / n[1] as f64 - sum[0] / n[0] as f64;
    assert!((value - direct).abs() < 1e-12, "{value} vs {direct}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn covariate_rescaling_leaves_selection_and_effect(scale in 0.05f64..20.0, which in 0usize..2) {
        let eb = world(8, 600, 5);
        let (base, sel_t, sel_c) = loo_effect(&eb, CovariateSet::Macro, 3);
        let sites = eb
            .sites()
            .iter()
            .cloned()
            .map(|mut s| {
                match which {
                    0 => s.macro_.log_gdp_pc = s.macro_.log_gdp_pc.map(|v| v * scale),
                    _ => s.macro_.lfp_women = s.macro_.lfp_women.map(|v| v * scale.min(1.0)),
                }
                s
            })
            .collect();
        let moved = EvidenceBase::new(sites, None).unwrap();
        let (value, sel_t2, sel_c2) = loo_effect(&moved, CovariateSet::Macro, 3);
        prop_assert_eq!(sel_t, sel_t2);
        prop_assert_eq!(sel_c, sel_c2);
        prop_assert!((base - value).abs() <= 1e-6, "{} vs {}", base, value);
    }
}
