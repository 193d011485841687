use std::path::Path;
use std::process::{Command, Output};

use planloop_core::docmodel::save_bundle;
use planloop_core::evalharness::{generate_fixtures, generate_synthetic_corpus};
use serde_json::Value;

const GOLDEN: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/tests/data/golden/compare_seed7_n50.tsv");

fn planloop(data: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_planloop"))
        .arg("--data-dir")
        .arg(data)
        .args(args)
        .env_remove("PLANLOOP_MOCK_PROVIDER")
        .env_remove("PLANLOOP_PROVIDER_URL")
        .env_remove("PLANLOOP_OPERATOR")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn json(o: &Output) -> Value {
    assert!(o.status.success(), "{}", stderr(o));
    serde_json::from_slice(&o.stdout).unwrap()
}

#[test]
fn eval_run_matches_the_golden_table() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let out = planloop(dir.path(), &["eval", "run", "--seed", "7", "--n", "50", "--report", report.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out), std::fs::read_to_string(GOLDEN).unwrap());
    let structured: Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(structured["rows"].as_array().unwrap().len(), 6);

    // The same table from fixtures written to disk and read back.
    let fixtures = dir.path().join("fixtures");
    let w = planloop(dir.path(), &["eval", "fixtures", "--seed", "7", "--n", "50", "--out", fixtures.to_str().unwrap()]);
    assert!(w.status.success(), "{}", stderr(&w));
    let again = planloop(dir.path(), &["--mock-provider", fixtures.to_str().unwrap(), "eval", "run", "--seed", "7", "--n", "50"]);
    assert_eq!(stdout(&again), stdout(&out));
}

#[test]
fn tampered_log_fails_verification_naming_the_record() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_synthetic_corpus(5, 1).unwrap();
    let bundle_path = dir.path().join("doc.plb");
    save_bundle(&corpus.docs[0], &bundle_path).unwrap();
    let data = dir.path().join("data");
    json(&planloop(&data, &["ingest", bundle_path.to_str().unwrap(), "--operator", "clerk"]));
    let ok = planloop(&data, &["audit", "verify"]);
    assert!(ok.status.success(), "{}", stderr(&ok));
    assert_eq!(json(&ok)["chain_valid"], true);

    let log = data.join("audit.log");
    let mut bytes = std::fs::read(&log).unwrap();
    let at = bytes.iter().position(|&b| b == b'\t').unwrap() + 3;
    bytes[at] ^= 0x02;
    std::fs::write(&log, &bytes).unwrap();
    let bad = planloop(&data, &["audit", "verify", "--log", log.to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(3));
    assert!(stderr(&bad).contains("broken at seq 0"), "{}", stderr(&bad));
    // The service refuses to open a damaged log.
    let refused = planloop(&data, &["review", "list", "--doc", &corpus.docs[0].doc_id]);
    assert!(!refused.status.success());
}

#[test]
fn roi_authority_a() {
    let dir = tempfile::tempdir().unwrap();
    let v = json(&planloop(dir.path(), &["roi", "--scenario", "authorityA"]));
    assert_eq!(v["annual_hours_saved"], "1000.00");
    assert_eq!(v["gross_benefit"], "40000.00");
    assert_eq!(v["net_benefit"], "20000.00");
    assert_eq!(v["payback_months"], "6.0");
    let missing = planloop(dir.path(), &["roi", "--scenario", "nowhere"]);
    assert_eq!(missing.status.code(), Some(4));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["frobnicate"][..], &["roi"], &["eval", "run", "--corruption", "2"], &["run", "--task", "summarise", "--doc", "d", "--operator", "o"], &["ingest", "x"]] {
        let out = planloop(dir.path(), args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", stderr(&out));
    }
}

#[test]
fn review_workflow_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_synthetic_corpus(9, 1).unwrap();
    let doc = corpus.docs[0].doc_id.clone();
    let bundle_dir = dir.path().join("bundle");
    save_bundle(&corpus.docs[0], &bundle_dir).unwrap();
    let fixtures = dir.path().join("fixtures");
    generate_fixtures(&corpus, 0).write(&fixtures).unwrap();
    let data = dir.path().join("data");
    let mock = ["--mock-provider", fixtures.to_str().unwrap()];
    let with_mock = |args: &[&str]| planloop(&data, &[&mock[..], args].concat());

    json(&with_mock(&["ingest", bundle_dir.to_str().unwrap(), "--operator", "clerk"]));
    let job = json(&with_mock(&["run", "--task", "pii_detection", "--doc", &doc, "--operator", "clerk"]));
    assert_eq!(job["status"], "done");
    let items = json(&planloop(&data, &["review", "list", "--doc", &doc, "--queue"]));
    let ids: Vec<String> = items.as_array().unwrap().iter().map(|i| i["item_id"].as_str().unwrap().to_string()).collect();
    assert!(!ids.is_empty());

    // Committing before review is refused with the blockers listed.
    let blocked = planloop(&data, &["commit", "--doc", &doc, "--operator", "reviewer"]);
    assert_eq!(blocked.status.code(), Some(6));
    assert!(stderr(&blocked).contains("commit_blocked"));

    for id in &ids {
        let v = json(&planloop(&data, &["review", "confirm", id, "--expect", "suggested", "--operator", "reviewer"]));
        assert_eq!(v["state"], "Confirmed");
    }
    let again = planloop(&data, &["review", "reject", &ids[0], "--expect", "suggested", "--operator", "reviewer"]);
    assert_eq!(again.status.code(), Some(5));
    let summary = json(&planloop(&data, &["commit", "--doc", &doc, "--operator", "reviewer"]));
    assert_eq!(summary["revision"], 1);
    assert_eq!(summary["scrub_report"]["clean"], true);
    let events = json(&planloop(&data, &["audit", "show", "--doc", &doc, "--action", "FinalHash"]));
    assert_eq!(events[0]["payload"]["final_hash"], summary["final_hash"]);
    assert!(planloop(&data, &["audit", "verify"]).status.success());

    let no_provider = planloop(&data, &["run", "--task", "extraction", "--doc", &doc, "--operator", "clerk"]);
    assert_eq!(no_provider.status.code(), Some(7));
}
