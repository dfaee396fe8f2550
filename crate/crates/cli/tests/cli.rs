use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn exval(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_exval"))
        .args(args)
        .output()
        .expect("spawn exval")
}

fn ok(args: &[&str]) -> String {
    let out = exval(args);
    assert!(
        out.status.success(),
        "exval {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn output_hashes(dir: &Path) -> Value {
    json(&dir.join("manifest.json"))["outputs"].clone()
}

fn simulate(dir: &Path, extra: &[&str]) -> (String, String) {
    let d = dir.to_str().unwrap();
    let mut args = vec!["simulate", "-o", d];
    args.extend_from_slice(extra);
    ok(&args);
    (
        dir.join("micro.csv").to_str().unwrap().to_string(),
        dir.join("macro.csv").to_str().unwrap().to_string(),
    )
}

#[test]
fn homogeneous_world_passes_q_test() {
    let tmp = tempfile::tempdir().unwrap();
    let (micro, macro_) = simulate(
        &tmp.path().join("sim"),
        &["--preset", "homogeneous", "--n-sites", "25", "--records-per-site", "2000", "--seed", "5"],
    );
    let out = tmp.path().join("het");
    ok(&["heterogeneity", "--micro", &micro, "--macro", &macro_, "-o", out.to_str().unwrap()]);
    let h = json(&out.join("heterogeneity.json"));
    let more_kids = &h["reports"][0];
    assert_eq!(more_kids["outcome"], "more_kids");
    assert!(more_kids["q_pvalue"].as_f64().unwrap() > 0.05, "{more_kids}");
}

#[test]
fn bundled_heterogeneity_prints_table() {
    let tmp = tempfile::tempdir().unwrap();
    let stdout = ok(&["heterogeneity", "--summaries", "bundled", "-o", tmp.path().to_str().unwrap()]);
    assert!(stdout.contains("Q-test statistic"));
    assert!(stdout.contains("wSF-test statistic"));
    let h = json(&tmp.path().join("heterogeneity.json"));
    assert_eq!(h["reports"][0]["q_df"], 141);
    assert_eq!(h["reports"][1]["q_df"], 127);
    for f in ["funnel_more_kids.csv", "funnel_econ_active.csv", "manifest.json"] {
        assert!(tmp.path().join(f).is_file(), "{f} missing");
    }
}

#[test]
fn decide_with_zero_threshold_in_noisy_world_says_experiment() {
    let tmp = tempfile::tempdir().unwrap();
    let (micro, macro_) = simulate(
        &tmp.path().join("sim"),
        &[
            "--preset",
            "macro_driven",
            "--n-sites",
            "30",
            "--records-per-site",
            "2000",
            "--intrinsic-sd",
            "0.05",
            "--seed",
            "2",
        ],
    );
    let out = tmp.path().join("dec");
    let stdout = ok(&[
        "decide",
        "--micro",
        &micro,
        "--macro",
        &macro_,
        "--target",
        "C000-1960",
        "--c-star",
        "0",
        "--covariate-set",
        "macro",
        "--bootstrap-reps",
        "50",
        "-o",
        out.to_str().unwrap(),
    ]);
    assert!(stdout.contains("experiment"), "{stdout}");
    let d = json(&out.join("decision.json"));
    assert_eq!(d["decision"]["verdict"], "experiment");
}

#[test]
fn reruns_reproduce_output_hashes() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let args = ["--n-sites", "8", "--records-per-site", "500", "--seed", "9"];
    simulate(&a, &args);
    simulate(&b, &args);
    assert_eq!(output_hashes(&a), output_hashes(&b));

    let micro = a.join("micro.csv");
    let macro_ = a.join("macro.csv");
    let before = fs::read(&micro).unwrap();
    let mut hashes = Vec::new();
    for (name, threads) in [("c1", "1"), ("c2", "2")] {
        let out = tmp.path().join(name);
        ok(&[
            "cumulative",
            "--threads",
            threads,
            "--micro",
            micro.to_str().unwrap(),
            "--macro",
            macro_.to_str().unwrap(),
            "-o",
            out.to_str().unwrap(),
        ]);
        hashes.push(output_hashes(&out));
    }
    assert_eq!(hashes[0], hashes[1]);
    assert_eq!(before, fs::read(&micro).unwrap(), "input was modified");
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.json");
    fs::write(&cfg, r#"{ "summaries": "bundled", "mc_reps": 200, "seed": 3 }"#).unwrap();
    let out = tmp.path().join("o");
    ok(&["heterogeneity", "--config", cfg.to_str().unwrap(), "--seed", "4", "-o", out.to_str().unwrap()]);
    let m = json(&out.join("manifest.json"));
    assert_eq!(m["config"]["mc_reps"], 200);
    assert_eq!(m["config"]["seed"], 4);
    assert_eq!(m["command"], "heterogeneity");
}

#[test]
fn invalid_configuration_is_reported_exhaustively() {
    let tmp = tempfile::tempdir().unwrap();
    let out = exval(&[
        "decide",
        "--alpha",
        "2",
        "--mc-reps",
        "3",
        "--target",
        "nonsense",
        "-o",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let report: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(report["kind"], "config");
    let errors: Vec<String> = report["errors"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e.as_str().unwrap().to_string())
        .collect();
    for needle in ["`micro`", "`macro`", "`alpha`", "`mc_reps`", "`target`", "`c_star`"] {
        assert!(errors.iter().any(|e| e.contains(needle)), "{needle} not in {errors:?}");
    }
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.json");
    fs::write(&cfg, r#"{ "sumaries": "bundled" }"#).unwrap();
    let out = exval(&["heterogeneity", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sumaries"));
}

#[test]
fn runtime_failure_is_machine_readable() {
    let tmp = tempfile::tempdir().unwrap();
    let (micro, macro_) = simulate(&tmp.path().join("sim"), &["--n-sites", "4", "--records-per-site", "300"]);
    let out = exval(&[
        "decide",
        "--micro",
        &micro,
        "--macro",
        &macro_,
        "--target",
        "ZZZ-1900",
        "--c-star",
        "0",
        "-o",
        tmp.path().join("d").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let report: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(report["kind"], "runtime");
}

#[test]
fn micro_subcommands_write_declared_files() {
    let tmp = tempfile::tempdir().unwrap();
    let (micro, macro_) = simulate(
        &tmp.path().join("sim"),
        &["--preset", "macro_driven", "--n-sites", "10", "--records-per-site", "1500", "--seed", "4"],
    );
    let cases: [(&str, &[&str]); 5] = [
        ("estimate", &["effects.csv"]),
        (
            "evf",
            &[
                "dyads.csv",
                "evf_curve_educ_own.csv",
                "evf_curve_log_gdp_pc.csv",
                "table3.csv",
                "covariate_sets.csv",
                "evf.json",
            ],
        ),
        ("extrapolate", &["extrapolation.json"]),
        ("cumulative", &["cumulative.csv", "cumulative_by_year.csv"]),
        ("site-select", &["rankings.csv", "second_site.csv"]),
    ];
    for (cmd, files) in cases {
        let out = tmp.path().join(cmd);
        ok(&[
            cmd,
            "--micro",
            &micro,
            "--macro",
            &macro_,
            "--covariate-set",
            "macro",
            "--first-site",
            "C000-1960",
            "-o",
            out.to_str().unwrap(),
        ]);
        let manifest = json(&out.join("manifest.json"));
        let listed: Vec<&str> = manifest["outputs"]
            .as_array()
            .unwrap()
            .iter()
            .map(|f| f["file"].as_str().unwrap())
            .collect();
        for f in files {
            assert!(out.join(f).is_file(), "{cmd}: {f} missing");
            assert!(listed.contains(f), "{cmd}: {f} not in manifest");
        }
        assert_eq!(manifest["inputs"].as_array().unwrap().len(), 2);
    }
}
