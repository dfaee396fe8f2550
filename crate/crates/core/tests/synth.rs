use exval::synth::{generate, DgpConfig};

#[test]
fn same_seed_same_world() {
    let cfg = DgpConfig::macro_driven(6, 500, 0.02, 12);
    let (a, oa) = generate(&cfg).unwrap();
    let (b, ob) = generate(&cfg).unwrap();
    assert_eq!(a.sites(), b.sites());
    assert_eq!(oa, ob);
    let (c, _) = generate(&DgpConfig { seed: 13, ..cfg }).unwrap();
    assert_ne!(a.sites(), c.sites());
}

#[test]
fn treated_share_near_one_half() {
    let (eb, _) = generate(&DgpConfig::macro_driven(20, 2000, 0.01, 1)).unwrap();
    for s in eb.sites() {
        let n = s.records.len() as f64;
        let t = s.records.iter().filter(|r| r.treated).count() as f64;
        assert!((t / n - 0.5).abs() <= 3.0 * (0.25 / n).sqrt(), "{}: {}", s.key, t / n);
        assert!(s.records.iter().all(|r| r.validate().is_ok()));
    }
}

#[test]
fn invalid_configs_rejected() {
    assert!(generate(&DgpConfig { n_sites: 1, ..DgpConfig::default() }).is_err());
    assert!(generate(&DgpConfig { intrinsic_sd: -1.0, ..DgpConfig::default() }).is_err());
}
