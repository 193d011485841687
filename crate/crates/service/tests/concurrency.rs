mod common;

use std::sync::{Arc, Barrier};

use common::*;
use planloop_core::review::{ReviewAction, ReviewState};
use planloop_core::TaskKind;
use planloop_service::TaskRequest;

#[test]
fn racing_operators_get_exactly_one_transition() {
    let env = Env::new(60, 1);
    let doc = env.doc_id(0);
    let e = env.engine();
    e.ingest(&env.corpus.docs[0], "clerk").unwrap();
    e.run_task_direct(&doc, &TaskRequest { task_kind: TaskKind::Extraction, rule_ids: None }, "clerk").unwrap();
    let ids: Vec<String> = e.items(&doc).unwrap().into_iter().map(|i| i.item_id).collect();
    for id in &ids {
        let barrier = Arc::new(Barrier::new(6));
        let handles: Vec<_> = (0..6)
            .map(|t| {
                let (e, id, barrier) = (Arc::clone(&e), id.clone(), Arc::clone(&barrier));
                std::thread::spawn(move || {
                    barrier.wait();
                    let action = if t % 2 == 0 { ReviewAction::Confirm } else { ReviewAction::Reject };
                    e.transition(&id, &action, &format!("op{t}"), Some(ReviewState::Suggested)).is_ok()
                })
            })
            .collect();
        let wins = handles.into_iter().map(|h| h.join().unwrap()).filter(|w| *w).count();
        assert_eq!(wins, 1, "{id}");
        let item = e.item(id).unwrap();
        assert_eq!(item.history.len(), 1);
        assert_eq!(e.audit_events(&doc, Some("ReviewTransition")).unwrap().iter().filter(|ev| ev.payload["item_id"] == id.as_str()).count(), 1);
    }
    assert!(e.verify_audit().unwrap().intact());
}
