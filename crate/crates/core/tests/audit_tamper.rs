mod support;

use std::sync::Arc;

use planloop_core::audit::{head_path, verify_chain_bytes, verify_file, Actor, AuditError, AuditLog};
use rand::Rng;
use serde_json::json;
use support::*;

#[test]
fn every_single_bit_flip_is_detected() {
    let (bytes, head) = hundred_event_log(7);
    assert!(verify_chain_bytes(&bytes, Some(&head)).intact());
    let mut r = rng(99);
    for i in 0..1_000 {
        let mut m = bytes.clone();
        let at = r.random_range(0..m.len());
        let bit = r.random_range(0..8);
        m[at] ^= 1 << bit;
        let report = verify_chain_bytes(&m, Some(&head));
        assert!(!report.intact(), "flip {i} at byte {at} bit {bit} went unnoticed");
    }
}

#[test]
fn flip_is_attributed_to_the_damaged_record() {
    let (bytes, head) = hundred_event_log(8);
    let starts: Vec<usize> = std::iter::once(0).chain(bytes.iter().enumerate().filter(|(_, &b)| b == b'\n').map(|(i, _)| i + 1)).collect();
    let mut r = rng(5);
    for _ in 0..200 {
        let record = r.random_range(0..100usize);
        let (lo, hi) = (starts[record], starts[record + 1] - 1);
        let mut m = bytes.clone();
        m[r.random_range(lo..hi)] ^= 1 << r.random_range(0..8);
        let report = verify_chain_bytes(&m, Some(&head));
        assert_eq!(report.first_break.map(|b| b.seq), Some(record as u64));
    }
}

#[test]
fn truncation_is_detected_by_the_head_anchor() {
    let (bytes, head) = hundred_event_log(9);
    let lines: Vec<&[u8]> = bytes.split_inclusive(|&b| b == b'\n').collect();
    for keep in 0..100 {
        let cut: Vec<u8> = lines[..keep].concat();
        let report = verify_chain_bytes(&cut, Some(&head));
        assert!(report.chain_valid, "a prefix on its own still links");
        assert!(report.truncated && !report.intact(), "keep {keep}");
    }
    // Dropping the tail of the final record is a break at that record.
    let report = verify_chain_bytes(&bytes[..bytes.len() - 3], Some(&head));
    assert_eq!(report.first_break.map(|b| b.seq), Some(99));
}

#[test]
fn tampered_file_is_refused_on_open() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("audit.log");
    {
        let log = AuditLog::open(&path).unwrap();
        for i in 0..10 {
            log.append(Actor::operator("officer"), "ReviewTransition", &json!({"doc_id": "d", "i": i})).unwrap();
        }
    }
    assert!(AuditLog::open(&path).unwrap().verify().intact());
    let mut bytes = std::fs::read(&path).unwrap();
    let at = bytes.len() / 2;
    bytes[at] ^= 0x04;
    std::fs::write(&path, &bytes).unwrap();
    let report = verify_file(&path).unwrap();
    assert!(!report.intact());
    assert!(matches!(AuditLog::open(&path), Err(AuditError::Corrupt(_))));

    // Removing the last line with the anchor in place is caught too.
    bytes[at] ^= 0x04;
    let trimmed: Vec<u8> = bytes.split_inclusive(|&b| b == b'\n').take(9).flatten().copied().collect();
    std::fs::write(&path, trimmed).unwrap();
    assert!(head_path(&path).exists());
    assert!(verify_file(&path).unwrap().truncated);
}

#[test]
fn concurrent_appends_are_serialized() {
    let dir = tempfile::tempdir().unwrap();
    let log = Arc::new(AuditLog::open(&dir.path().join("audit.log")).unwrap());
    let handles: Vec<_> = (0..8)
        .map(|t| {
            let log = Arc::clone(&log);
            std::thread::spawn(move || {
                for i in 0..25 {
                    log.append(Actor::operator(format!("op{t}")), "Note", &json!({"i": i})).unwrap();
                }
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    let seqs: Vec<u64> = log.events().iter().map(|e| e.seq).collect();
    assert_eq!(seqs, (0..200).collect::<Vec<_>>());
    assert!(log.verify().intact());
    assert!(verify_file(&log.path().unwrap()).unwrap().intact());
}
