use exval::cumulative::{run_cumulative_with_estimates, CumulativeOptions, Method};
use exval::site_effects::estimate_all;
use exval::synth::{generate, DgpConfig};
use exval::Outcome;

#[test]
fn pooled_method_is_inverse_variance_mean_of_earlier_sites() {
    let (eb, _) = generate(&DgpConfig::macro_driven(24, 600, 0.01, 6)).unwrap();
    let est = estimate_all(&eb, Outcome::MoreKids).estimates;
    let res = run_cumulative_with_estimates(&eb, Outcome::MoreKids, &est, &CumulativeOptions::default()).unwrap();
    let pooled: Vec<_> = res.runs.iter().filter(|r| r.method == Method::Pooled).collect();
    assert!(!pooled.is_empty());
    for r in pooled {
        let pool: Vec<_> = est.iter().filter(|e| e.site.year < r.year).collect();
        let w: f64 = pool.iter().map(|e| 1.0 / (e.se * e.se)).sum();
        let mean = pool.iter().map(|e| e.tau / (e.se * e.se)).sum::<f64>() / w;
        assert_eq!(r.pool_size, pool.len());
        assert!((r.predicted - mean).abs() < 1e-12);
    }
}

#[test]
fn runs_use_only_earlier_references() {
    let (eb, _) = generate(&DgpConfig::macro_driven(24, 600, 0.01, 6)).unwrap();
    let est = estimate_all(&eb, Outcome::MoreKids).estimates;
    let res = run_cumulative_with_estimates(&eb, Outcome::MoreKids, &est, &CumulativeOptions::default()).unwrap();
    for r in &res.runs {
        assert_eq!(r.year, r.target.year);
        assert_eq!(r.error, r.predicted - r.actual);
        if let Some(reference) = &r.reference {
            assert!(reference.year < r.year);
        }
        if r.method == Method::NearestGeoXcountry {
            assert_ne!(r.reference.as_ref().unwrap().country, r.target.country);
        }
    }
}
