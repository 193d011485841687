mod support;

use std::time::Instant;

use support::{corpus_rows, verifier_accepts, VERIFIER_CORPORA};

#[test]
fn every_verifier_scores_the_full_corpus() {
    let start = Instant::now();
    for (kind, text) in VERIFIER_CORPORA {
        let rows = corpus_rows(text);
        let valid = rows.iter().filter(|r| r.0).count();
        assert!(valid >= 50 && rows.len() - valid >= 50, "{kind}: {valid} valid, {} invalid", rows.len() - valid);
        let wrong: Vec<_> = rows.iter().filter(|(expect, v)| verifier_accepts(kind, v) != *expect).collect();
        assert!(wrong.is_empty(), "{kind} misclassified: {wrong:?}");
    }
    assert!(start.elapsed().as_secs_f64() < 1.0);
}

#[test]
fn email_and_phone_verdicts_match_the_commit_gate() {
    use planloop_core::pii::{verify_value, PiiCategory, VerifierStatus};
    for (kind, cat) in [("email", PiiCategory::Emails), ("phone", PiiCategory::Phones)] {
        let text = VERIFIER_CORPORA.iter().find(|c| c.0 == kind).unwrap().1;
        for (expect, v) in corpus_rows(text) {
            let status = verify_value(cat, v);
            assert_eq!(status == VerifierStatus::Passed, expect, "{kind} {v:?}");
            assert_eq!(status, verify_value(cat, v));
        }
    }
}
