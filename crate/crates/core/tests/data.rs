use std::path::PathBuf;

use exval::data::{
    apply_sample_restrictions, load_macro, load_micro, parse_site_summaries, Education, LoadOptions, MaritalStatus,
    MicroSchema, APPENDIX_TABLE_1,
};
use exval::synth::{generate, DgpConfig};
use exval::{EvidenceBase, MicroRecord, Outcome};
use proptest::prelude::*;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn synthetic_fixture_loads_two_sites_of_1000() {
    let load = load_micro(&fixture("synth_2x1000_micro.csv"), &MicroSchema::default(), LoadOptions::default()).unwrap();
    assert_eq!(load.rows_read, 2000);
    assert_eq!(load.record_count(), 2000);
    assert_eq!(load.groups.len(), 2);
    assert!(load.diagnostics.is_empty());
    assert!(load.groups.values().all(|g| g.len() == 1000));

    // The fixture is the seed-1 synthetic world; regenerating it must match.
    let macros = load_macro(&fixture("synth_2x1000_macro.csv")).unwrap();
    let (eb, diag) = EvidenceBase::assemble(load.groups, &macros).unwrap();
    assert!(diag.is_empty());
    let cfg = DgpConfig {
        n_sites: 2,
        records_per_site: 1000,
        seed: 1,
        ..DgpConfig::default()
    };
    let (fresh, _) = generate(&cfg).unwrap();
    for (a, b) in eb.sites().iter().zip(fresh.sites()) {
        assert_eq!(a.key, b.key);
        assert_eq!(a.records, b.records);
    }
}

const HEADER: &str = "country,year,more_kids,econ_active,same_sex,age,educ_own,educ_spouse,age_first_birth,marital_status,oldest_child_age,weight";

fn write_micro_rows(rows: &[&str]) -> tempfile::NamedTempFile {
    let f = tempfile::NamedTempFile::new().unwrap();
    let mut text = String::from(HEADER);
    for r in rows {
        text.push('\n');
        text.push_str(r);
    }
    std::fs::write(f.path(), text).unwrap();
    f
}

#[test]
fn ingestion_is_lossless_modulo_diagnostics() {
    let f = write_micro_rows(&[
        "ARG,1970,1,0,1,30,2,2,22,married,7,1",
        "ARG,1970,0,1,0,25,1,NA,20,married,4,1",
        "ARG,1970,1,0,2,28,3,3,21,married,6,1",
        "BRA,1980,0,NA,1,33,4,4,24,married,8,2.5",
    ]);
    let skip = LoadOptions { skip_invalid: true };
    let load = load_micro(f.path(), &MicroSchema::default(), skip).unwrap();
    assert_eq!(load.record_count() + load.rows_rejected(), load.rows_read);
    assert_eq!(load.rows_rejected(), 1);
    assert_eq!(load.diagnostics[0].row, 4);
    assert!(load_micro(f.path(), &MicroSchema::default(), LoadOptions::default()).is_err());
}

#[test]
fn clean_three_row_file() {
    let f = write_micro_rows(&[
        "ARG,1970,1,0,1,30,2,2,22,married,7,1",
        "ARG,1970,0,1,0,25,1,NA,20,married,4,1",
        "ARG,1970,1,NA,0,29,3,3,21,married,6,1",
    ]);
    let load = load_micro(f.path(), &MicroSchema::default(), LoadOptions::default()).unwrap();
    assert_eq!(load.record_count(), 3);
    assert!(load.diagnostics.is_empty());
}

#[test]
fn summary_rows_from_published_table() {
    let all = parse_site_summaries(APPENDIX_TABLE_1).unwrap();
    let arg = all
        .iter()
        .find(|e| e.site.country == "Argentina" && e.site.year == 1970 && e.outcome == Outcome::MoreKids)
        .unwrap();
    assert_eq!((arg.tau, arg.se), (0.0495, 0.0078));
    assert!(!all
        .iter()
        .any(|e| e.site.country == "Hungary" && e.site.year == 1970 && e.outcome == Outcome::EconActive));
    let bad = "country,year,tau_more_kids,se_more_kids,tau_econ_active,se_econ_active\nX,1990,0.05,0,NA,NA\n";
    assert!(parse_site_summaries(bad).is_err());
}

fn record() -> impl Strategy<Value = MicroRecord> {
    (
        15u16..50,
        0u16..25,
        0usize..6,
        any::<bool>(),
        1u8..=4,
    )
        .prop_map(|(age, oldest, ms, treated, educ)| MicroRecord {
            outcome_more_kids: treated,
            outcome_econ_active: None,
            treated,
            age,
            educ_own: Education::new(educ).unwrap(),
            educ_spouse: None,
            age_first_birth: age.min(18),
            marital_status: [
                MaritalStatus::Married,
                MaritalStatus::NeverMarried,
                MaritalStatus::Separated,
                MaritalStatus::Divorced,
                MaritalStatus::Widowed,
                MaritalStatus::Other,
            ][ms],
            oldest_child_age: oldest,
            sampling_weight: 1.0,
            continuous_outcome: None,
        })
}

proptest! {
    #[test]
    fn restrictions_are_idempotent_and_exact(records in prop::collection::vec(record(), 0..60)) {
        let (once, rep) = apply_sample_restrictions(&records);
        let (twice, rep2) = apply_sample_restrictions(&once);
        prop_assert_eq!(&once, &twice);
        prop_assert_eq!(rep2.dropped, 0);
        prop_assert_eq!(rep.kept + rep.dropped, records.len());
        let expected = records
            .iter()
            .filter(|r| r.marital_status == MaritalStatus::Married && (21..=35).contains(&r.age) && r.oldest_child_age < 18)
            .count();
        prop_assert_eq!(once.len(), expected);
    }
}
