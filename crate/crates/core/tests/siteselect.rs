use exval::evf::DiffVar;
use exval::site_effects::estimate_all;
use exval::siteselect::{composite_percentile, mahalanobis_rank, mean_mahalanobis, percentiles, MACRO_VARS};
use exval::synth::{generate, DgpConfig};
use exval::{EvidenceBase, Outcome};
use proptest::prelude::*;

fn points() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (3usize..5).prop_flat_map(|k| prop::collection::vec(prop::collection::vec(-5.0f64..5.0, k), (k + 4)..30))
}

fn rescale_gdp(eb: &EvidenceBase, a: f64, b: f64) -> EvidenceBase {
    let sites = eb
        .sites()
        .iter()
        .cloned()
        .map(|mut s| {
            s.macro_.log_gdp_pc = s.macro_.log_gdp_pc.map(|v| a * v + b);
            s
        })
        .collect();
    EvidenceBase::new(sites, None).unwrap()
}

#[test]
fn rank_invariant_to_affine_gdp_change() {
    let (eb, _) = generate(&DgpConfig::macro_driven(15, 200, 0.01, 2)).unwrap();
    let a = mahalanobis_rank(&eb, &MACRO_VARS, false).unwrap();
    let b = mahalanobis_rank(&rescale_gdp(&eb, 7.5, -3.0), &MACRO_VARS, false).unwrap();
    for (x, y) in a.rows.iter().zip(&b.rows) {
        assert!((x.mean_distance - y.mean_distance).abs() <= 1e-8);
    }
}

#[test]
fn composite_weights_rescale_inversely() {
    let (eb, _) = generate(&DgpConfig::macro_driven(30, 1500, 0.01, 2)).unwrap();
    let est = estimate_all(&eb, Outcome::MoreKids).estimates;
    let vars = [DiffVar::LogGdp, DiffVar::Lfp];
    let a = composite_percentile(&eb, Outcome::MoreKids, &est, &vars).unwrap();
    let b = composite_percentile(&rescale_gdp(&eb, 4.0, 0.0), Outcome::MoreKids, &est, &vars).unwrap();
    assert!((a.weights[0] / 4.0 - b.weights[0]).abs() <= 1e-8 * a.weights[0].abs().max(1.0));
    for (x, y) in a.rows.iter().zip(&b.rows) {
        assert_eq!(x.percentile, y.percentile);
    }
}

proptest! {
    #[test]
    fn mean_distance_is_affine_invariant(pts in points(), seed in any::<u64>()) {
        let k = pts[0].len();
        let mut rng = exval::rng::stream_rng(seed, 0);
        use rand::Rng;
        let a: Vec<Vec<f64>> = (0..k)
            .map(|i| (0..k).map(|j| if i == j { 3.0 + rng.random::<f64>() } else { rng.random::<f64>() - 0.5 }).collect())
            .collect();
        let b: Vec<f64> = (0..k).map(|_| 20.0 * rng.random::<f64>()).collect();
        let moved: Vec<Vec<f64>> = pts
            .iter()
            .map(|x| (0..k).map(|i| b[i] + (0..k).map(|j| a[i][j] * x[j]).sum::<f64>()).collect())
            .collect();
        if let (Ok((d0, _)), Ok((d1, _))) = (mean_mahalanobis(&pts, false), mean_mahalanobis(&moved, false)) {
            for (x, y) in d0.iter().zip(&d1) {
                prop_assert!((x - y).abs() <= 1e-8 * x.max(1.0));
            }
        }
    }

    #[test]
    fn percentiles_form_a_permutation(x in prop::collection::vec(-10.0f64..10.0, 1..50)) {
        let n = x.len();
        let mut p: Vec<usize> = percentiles(&x).into_iter().map(|v| (v * n as f64).round() as usize).collect();
        p.sort_unstable();
        prop_assert_eq!(p, (1..=n).collect::<Vec<_>>());
    }
}
