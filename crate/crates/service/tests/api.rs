mod common;

use std::cmp::Ordering;

use axum::http::{Method, StatusCode};
use common::*;
use proptest::prelude::*;
use serde_json::{json, Value};

async fn ingest(env: &Env, app: &axum::Router, i: usize) -> Value {
    let (status, body) = post(app, "/api/v1/documents", json!({ "operator_id": "clerk", "archive_base64": archive_base64(&env.corpus.docs[i]) })).await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    body
}

async fn run(app: &axum::Router, doc: &str, kind: &str) -> Value {
    let (status, job) = post(app, &format!("/api/v1/documents/{doc}/tasks"), json!({ "operator_id": "clerk", "task_kind": kind, "direct": true })).await;
    assert_eq!(status, StatusCode::OK, "{job}");
    assert_eq!(job["status"], "done", "{job}");
    job
}

async fn items(app: &axum::Router, doc: &str) -> Vec<Value> {
    let (status, v) = get(app, &format!("/api/v1/documents/{doc}/items")).await;
    assert_eq!(status, StatusCode::OK);
    v.as_array().unwrap().clone()
}

async fn act(app: &axum::Router, item: &str, op: &str, action: &str, value: Option<&str>) -> (StatusCode, Value) {
    let mut body = json!({ "operator_id": op, "action": action });
    if let Some(v) = value {
        body["value"] = json!(v);
    }
    post(app, &format!("/api/v1/items/{item}/transitions"), body).await
}

// Priority rank recomputed from the JSON item, independent of the library.
fn risk(item: &Value) -> u8 {
    match item["payload"]["kind"].as_str().unwrap() {
        "pii" => match item["payload"]["category"].as_str().unwrap() {
            "Signatures" => 0,
            "Emails" => 1,
            "Phones" => 2,
            "Addresses" => 3,
            _ => 4,
        },
        _ => 5,
    }
}

fn expected_order(a: &Value, b: &Value) -> Ordering {
    let conf = |i: &Value| i["payload"]["confidence"].as_f64();
    let id = |i: &Value| i["item_id"].as_str().unwrap().to_string();
    match (conf(a), conf(b)) {
        (Some(x), Some(y)) => x.partial_cmp(&y).unwrap().then(risk(a).cmp(&risk(b))).then(id(a).cmp(&id(b))),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => {
            let sat = |i: &Value| i["payload"]["satisfied"].as_bool().unwrap();
            sat(a).cmp(&sat(b)).then(a["ordinal"].as_u64().cmp(&b["ordinal"].as_u64()))
        }
    }
}

#[test]
fn queue_is_served_in_priority_order() {
    let env = Env::new(21, 2);
    let (_, app) = env.app();
    rt().block_on(async {
        let doc = env.doc_id(0);
        ingest(&env, &app, 0).await;
        for kind in ["extraction", "pii_detection", "visual_detection"] {
            run(&app, &doc, kind).await;
        }
        let all = items(&app, &doc).await;
        assert!(all.len() > 5);
        // Reject one so it leaves the queue.
        let gone = all[0]["item_id"].as_str().unwrap().to_string();
        assert_eq!(act(&app, &gone, "reviewer", "reject", None).await.0, StatusCode::OK);

        let (status, q) = get(&app, &format!("/api/v1/documents/{doc}/queue")).await;
        assert_eq!(status, StatusCode::OK);
        let served: Vec<&str> = q["order"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
        let mut open: Vec<Value> = items(&app, &doc).await.into_iter().filter(|i| i["state"] != "Rejected" && i["state"] != "Committed").collect();
        open.sort_by(expected_order);
        let expected: Vec<&str> = open.iter().map(|i| i["item_id"].as_str().unwrap()).collect();
        assert_eq!(served, expected);
        assert!(!served.contains(&gone.as_str()));
        let kinds: Vec<&str> = q["items"].as_array().unwrap().iter().map(|i| i["payload"]["kind"].as_str().unwrap()).collect();
        let first_rule = kinds.iter().position(|k| *k == "rule").unwrap();
        assert!(kinds[first_rule..].iter().all(|k| *k == "rule"));
    });
}

#[test]
fn illegal_transition_is_409_and_changes_nothing() {
    let env = Env::new(22, 1);
    let (engine, app) = env.app();
    rt().block_on(async {
        let doc = env.doc_id(0);
        ingest(&env, &app, 0).await;
        run(&app, &doc, "extraction").await;
        let id = items(&app, &doc).await[0]["item_id"].as_str().unwrap().to_string();
        assert_eq!(act(&app, &id, "reviewer", "reject", None).await.0, StatusCode::OK);
        let before = engine.audit().len();
        for action in ["confirm", "reject", "commit"] {
            let (status, body) = act(&app, &id, "reviewer", action, None).await;
            assert_eq!(status, StatusCode::CONFLICT, "{action}: {body}");
            assert_eq!(body["error"]["code"], "illegal_transition");
            assert_eq!(body["error"]["details"]["from"], "Rejected");
        }
        let (status, body) = act(&app, &id, "reviewer", "edit", Some("x")).await;
        assert_eq!((status, body["error"]["code"].as_str()), (StatusCode::CONFLICT, Some("illegal_transition")));
        assert_eq!(engine.audit().len(), before);
        assert_eq!(get(&app, &format!("/api/v1/items/{id}")).await.1["state"], "Rejected");

        // A stale expectation is refused too.
        let other = items(&app, &doc).await[1]["item_id"].as_str().unwrap().to_string();
        let (status, body) = post(&app, &format!("/api/v1/items/{other}/transitions"), json!({ "operator_id": "r", "action": "confirm", "expected_state": "Confirmed" })).await;
        assert_eq!((status, body["error"]["code"].as_str()), (StatusCode::CONFLICT, Some("stale_state")));
    });
}

#[test]
fn commit_with_suggested_items_is_422_and_lists_them() {
    let env = Env::new(23, 6);
    let (engine, app) = env.app();
    let i = env.corpus.gold.iter().position(|g| g.pii_items.len() >= 3).unwrap();
    rt().block_on(async {
        let doc = env.doc_id(i);
        ingest(&env, &app, i).await;
        run(&app, &doc, "pii_detection").await;
        let pii: Vec<String> = items(&app, &doc).await.iter().map(|i| i["item_id"].as_str().unwrap().to_string()).collect();
        assert!(pii.len() >= 2);
        assert_eq!(act(&app, &pii[0], "reviewer", "confirm", None).await.0, StatusCode::OK);
        let before = engine.audit().len();
        let (status, body) = post(&app, &format!("/api/v1/documents/{doc}/commit"), json!({ "operator_id": "reviewer" })).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
        assert_eq!(body["error"]["code"], "commit_blocked");
        let blocking: Vec<&str> = body["error"]["details"]["blocking"].as_array().unwrap().iter().map(|b| b["item_id"].as_str().unwrap()).collect();
        assert_eq!(blocking, pii[1..].iter().map(String::as_str).collect::<Vec<_>>());
        assert!(body["error"]["details"]["blocking"].as_array().unwrap().iter().all(|b| b["state"] == "Suggested"));
        assert_eq!(engine.audit().len(), before);
        assert_eq!(get(&app, &format!("/api/v1/documents/{doc}")).await.1["revision"], 0);
    });
}

#[test]
fn no_route_commits_a_suggested_item() {
    let env = Env::new(24, 1);
    let (engine, app) = env.app();
    rt().block_on(async {
        let doc = env.doc_id(0);
        ingest(&env, &app, 0).await;
        for kind in ["extraction", "pii_detection", "visual_detection"] {
            run(&app, &doc, kind).await;
        }
        let all = items(&app, &doc).await;
        let before = engine.audit().len();
        for item in &all {
            let id = item["item_id"].as_str().unwrap();
            let (status, body) = act(&app, id, "reviewer", "commit", None).await;
            assert!(status.is_client_error(), "{id}: {status} {body}");
            if item["payload"]["kind"] == "pii" {
                let (status, _) = post(&app, &format!("/api/v1/documents/{doc}/commit"), json!({ "operator_id": "reviewer", "item_ids": [id] })).await;
                assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
            }
        }
        assert_eq!(engine.audit().len(), before);
        assert!(items(&app, &doc).await.iter().all(|i| i["state"] == "Suggested"));

        // Confirmed PII still goes only through the redacting commit.
        let pii = all.iter().find(|i| i["payload"]["kind"] == "pii").unwrap()["item_id"].as_str().unwrap();
        assert_eq!(act(&app, pii, "reviewer", "confirm", None).await.0, StatusCode::OK);
        let (status, body) = act(&app, pii, "reviewer", "commit", None).await;
        assert_eq!((status, body["error"]["code"].as_str()), (StatusCode::CONFLICT, Some("redaction_required")));
    });
}

#[test]
fn approved_commit_redacts_and_advances_the_revision() {
    let env = Env::new(25, 1);
    let (engine, app) = env.app();
    rt().block_on(async {
        let doc = env.doc_id(0);
        ingest(&env, &app, 0).await;
        run(&app, &doc, "pii_detection").await;
        let pii = items(&app, &doc).await;
        let values: Vec<String> = pii.iter().map(|i| i["payload"]["value"].as_str().unwrap().to_string()).collect();
        for i in &pii {
            assert_eq!(act(&app, i["item_id"].as_str().unwrap(), "reviewer", "confirm", None).await.0, StatusCode::OK);
        }
        let (status, summary) = post(&app, &format!("/api/v1/documents/{doc}/commit"), json!({ "operator_id": "reviewer" })).await;
        assert_eq!(status, StatusCode::OK, "{summary}");
        assert_eq!(summary["revision"], 1);
        assert_eq!(summary["scrub_report"]["clean"], true);
        assert_eq!(summary["committed_items"].as_array().unwrap().len(), pii.len());
        assert!(items(&app, &doc).await.iter().all(|i| i["state"] == "Committed"));

        let (status, preview) = get(&app, &format!("/api/v1/documents/{doc}/pages/0/preview")).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(preview["revision"], 1);
        assert_eq!(preview["content_hash"], summary["final_hash"]);
        let text: String = preview["spans"].as_array().unwrap().iter().map(|s| s["text"].as_str().unwrap()).collect::<Vec<_>>().join("\n");
        for v in &values {
            assert!(!text.contains(v.as_str()), "{v:?} survived");
        }
        let bundle = engine.bundle(&doc).unwrap();
        assert_eq!(planloop_core::content_hash(&bundle).to_hex(), summary["final_hash"].as_str().unwrap());

        let events = engine.audit_events(&doc, None).unwrap();
        let actions: Vec<&str> = events.iter().map(|e| e.action.as_str()).collect();
        let at = actions.iter().position(|a| *a == "PlanIssued").unwrap();
        assert_eq!(&actions[at..at + 4], ["PlanIssued", "RedactionApplied", "ScrubPassed", "FinalHash"]);
        let log = std::fs::read_to_string(engine.data_dir().join("audit.log")).unwrap();
        for v in &values {
            // Only the provider exchange carries document text.
            for line in log.lines().filter(|l| l.contains(v.as_str())) {
                let action = line.split('\t').nth(3).unwrap();
                assert!(action.starts_with("Provider"), "{v:?} in a {action} event");
            }
        }
        let (status, verify) = get(&app, "/api/v1/audit/verify").await;
        assert_eq!((status, verify["intact"].as_bool()), (StatusCode::OK, Some(true)));

        // Nothing left to commit.
        let (status, body) = post(&app, &format!("/api/v1/documents/{doc}/commit"), json!({ "operator_id": "reviewer" })).await;
        assert_eq!((status, body["error"]["code"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("nothing_to_commit")));
    });
}

#[test]
fn mutations_without_operator_are_400() {
    let env = Env::new(26, 1);
    let (engine, app) = env.app();
    rt().block_on(async {
        let doc = env.doc_id(0);
        let archive = archive_base64(&env.corpus.docs[0]);
        let (status, body) = post(&app, "/api/v1/documents", json!({ "archive_base64": archive })).await;
        assert_eq!((status, body["error"]["code"].as_str()), (StatusCode::BAD_REQUEST, Some("missing_operator")));
        ingest(&env, &app, 0).await;
        run(&app, &doc, "pii_detection").await;
        let id = items(&app, &doc).await[0]["item_id"].as_str().unwrap().to_string();
        let before = engine.audit().len();
        let cases = [
            (format!("/api/v1/documents/{doc}/tasks"), json!({ "task_kind": "extraction" })),
            (format!("/api/v1/items/{id}/transitions"), json!({ "action": "confirm" })),
            (format!("/api/v1/items/{id}/transitions"), json!({ "operator_id": "  ", "action": "confirm" })),
            (format!("/api/v1/documents/{doc}/commit"), json!({})),
            (format!("/api/v1/documents/{doc}/assessment-notes"), json!({ "note": "fine" })),
        ];
        for (uri, body) in cases {
            let (status, resp) = post(&app, &uri, body).await;
            assert_eq!(status, StatusCode::BAD_REQUEST, "{uri}: {resp}");
            assert_eq!(resp["error"]["code"], "missing_operator");
        }
        assert_eq!(engine.audit().len(), before);
        assert_eq!(get(&app, &format!("/api/v1/items/{id}")).await.1["state"], "Suggested");
    });
}

#[test]
fn errors_use_the_envelope() {
    let env = Env::new(27, 1);
    let (_, app) = env.app();
    rt().block_on(async {
        let (status, body) = call(&app, Method::POST, "/api/v1/documents", None).await;
        assert!(status.is_client_error());
        assert_eq!(body["error"]["code"], "bad_request");
        let (status, body) = post(&app, "/api/v1/documents", json!({ "operator_id": "c", "archive_base64": "%%%" })).await;
        assert_eq!((status, body["error"]["code"].as_str()), (StatusCode::BAD_REQUEST, Some("bad_request")));
        let (status, body) = post(&app, "/api/v1/documents", json!({ "operator_id": "c", "archive_base64": "aGVsbG8=" })).await;
        assert_eq!((status, body["error"]["code"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("invalid_bundle")));
        let (status, body) = get(&app, "/api/v1/nowhere").await;
        assert_eq!((status, body["error"]["code"].as_str()), (StatusCode::NOT_FOUND, Some("not_found")));
        let (status, body) = call(&app, Method::DELETE, "/api/v1/documents", None).await;
        assert_eq!((status, body["error"]["code"].as_str()), (StatusCode::METHOD_NOT_ALLOWED, Some("method_not_allowed")));
        let (status, body) = get(&app, "/api/v1/documents/missing").await;
        assert_eq!((status, body["error"]["code"].as_str()), (StatusCode::NOT_FOUND, Some("not_found")));
        let (status, body) = get(&app, "/api/v1/documents/missing/pages/x/preview").await;
        assert_eq!((status, body["error"]["code"].as_str()), (StatusCode::BAD_REQUEST, Some("bad_request")));

        ingest(&env, &app, 0).await;
        let (status, body) = post(&app, "/api/v1/documents", json!({ "operator_id": "c", "archive_base64": archive_base64(&env.corpus.docs[0]) })).await;
        assert_eq!((status, body["error"]["code"].as_str()), (StatusCode::CONFLICT, Some("already_exists")));
        let doc = env.doc_id(0);
        let (status, body) = post(&app, &format!("/api/v1/documents/{doc}/tasks"), json!({ "operator_id": "c", "task_kind": "extraction", "rule_ids": ["x"] })).await;
        assert_eq!((status, body["error"]["code"].as_str()), (StatusCode::BAD_REQUEST, Some("bad_request")));
        let (status, _) = post(&app, &format!("/api/v1/documents/{doc}/tasks"), json!({ "operator_id": "c", "task_kind": "summarise" })).await;
        assert_eq!(status, StatusCode::BAD_REQUEST);
    });
}

#[test]
fn provider_less_service_refuses_tasks_with_503() {
    let env = Env::new(28, 1);
    let engine = std::sync::Arc::new(planloop_service::Engine::open(planloop_service::ServiceConfig::new(env.data.path())).unwrap());
    let app = planloop_service::router(engine);
    rt().block_on(async {
        ingest(&env, &app, 0).await;
        let (status, body) = post(&app, &format!("/api/v1/documents/{}/tasks", env.doc_id(0)), json!({ "operator_id": "c", "task_kind": "extraction" })).await;
        assert_eq!((status, body["error"]["code"].as_str()), (StatusCode::SERVICE_UNAVAILABLE, Some("provider_unavailable")));
    });
}

#[test]
fn queued_job_finishes_in_the_background() {
    let env = Env::new(29, 1);
    let (_, app) = env.app();
    rt().block_on(async {
        let doc = env.doc_id(0);
        ingest(&env, &app, 0).await;
        let (status, job) = post(&app, &format!("/api/v1/documents/{doc}/tasks"), json!({ "operator_id": "c", "task_kind": "visual_detection" })).await;
        assert_eq!(status, StatusCode::ACCEPTED);
        assert_eq!(job["status"], "queued");
        let id = job["job_id"].as_str().unwrap();
        let mut last = Value::Null;
        for _ in 0..400 {
            last = get(&app, &format!("/api/v1/jobs/{id}")).await.1;
            if last["status"] == "done" {
                break;
            }
            tokio::time::sleep(std::time::Duration::from_millis(25)).await;
        }
        assert_eq!(last["status"], "done", "{last}");
        assert_eq!(last["output"]["rule_outcomes"].as_array().unwrap().len(), 2);
        assert_eq!(last["attempts"].as_array().unwrap().len(), 1);
        let (_, jobs) = get(&app, &format!("/api/v1/documents/{doc}/jobs")).await;
        assert_eq!(jobs.as_array().unwrap().len(), 1);
    });
}

#[test]
fn preview_carries_overlays_and_rule_outcomes() {
    let env = Env::new(30, 1);
    let (_, app) = env.app();
    rt().block_on(async {
        let doc = env.doc_id(0);
        ingest(&env, &app, 0).await;
        run(&app, &doc, "pii_detection").await;
        let (status, job) = post(&app, &format!("/api/v1/documents/{doc}/tasks"), json!({ "operator_id": "c", "task_kind": "visual_detection", "rule_ids": ["north_arrow_present"], "direct": true })).await;
        assert_eq!(status, StatusCode::OK, "{job}");
        let (status, preview) = get(&app, &format!("/api/v1/documents/{doc}/pages/0/preview")).await;
        assert_eq!(status, StatusCode::OK);
        assert!(!preview["pii"].as_array().unwrap().is_empty());
        let rules: Vec<&str> = preview["rule_outcomes"].as_array().unwrap().iter().map(|r| r["rule_id"].as_str().unwrap()).collect();
        assert_eq!(rules, ["north_arrow_present"]);
        assert!(preview["image_png_base64"].as_str().unwrap().len() > 100);
        assert_eq!(get(&app, &format!("/api/v1/documents/{doc}/pages/9/preview")).await.0, StatusCode::NOT_FOUND);

        let (status, raster) = get(&app, &format!("/api/v1/documents/{doc}/pages/0/raster")).await;
        assert_eq!(status, StatusCode::OK);
        assert!(raster.as_str().is_some_and(|s| s.contains("PNG")));

        let (status, pack) = get(&app, "/api/v1/rule-packs/default").await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(pack["rules"].as_array().unwrap().len(), 2);
    });
}

#[test]
fn assessment_note_is_audited_with_the_outcomes() {
    let env = Env::new(31, 1);
    let (engine, app) = env.app();
    rt().block_on(async {
        let doc = env.doc_id(0);
        ingest(&env, &app, 0).await;
        run(&app, &doc, "visual_detection").await;
        let before = engine.bundle(&doc).unwrap();
        let (status, event) = post(&app, &format!("/api/v1/documents/{doc}/assessment-notes"), json!({ "operator_id": "planner", "note": "scale bar checked by hand", "rule_ids": ["scale_text_valid"] })).await;
        assert_eq!(status, StatusCode::CREATED, "{event}");
        assert_eq!(event["action"], "AssessmentNote");
        assert_eq!(event["actor"], "operator:planner");
        assert_eq!(event["payload"]["note"], "scale bar checked by hand");
        let outcomes = event["payload"]["outcomes"].as_object().unwrap();
        assert_eq!(outcomes.keys().collect::<Vec<_>>(), ["scale_text_valid"]);
        assert_eq!(engine.bundle(&doc).unwrap(), before);
        let (_, notes) = get(&app, &format!("/api/v1/documents/{doc}/audit?action=AssessmentNote")).await;
        assert_eq!(notes.as_array().unwrap().len(), 1);
        let (status, _) = post(&app, &format!("/api/v1/documents/{doc}/assessment-notes"), json!({ "operator_id": "planner", "note": "x", "rule_ids": ["nope"] })).await;
        assert_eq!(status, StatusCode::BAD_REQUEST);
        let (status, _) = post(&app, &format!("/api/v1/documents/{doc}/assessment-notes"), json!({ "operator_id": "planner", "note": "   " })).await;
        assert_eq!(status, StatusCode::BAD_REQUEST);
    });
}

#[test]
fn roi_endpoints() {
    let env = Env::new(32, 1);
    let (_, app) = env.app();
    rt().block_on(async {
        let (status, v) = get(&app, "/api/v1/roi/scenarios/authorityA").await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(v["outputs"]["annual_hours_saved"], "1000.00");
        assert_eq!(v["outputs"]["payback_months"], "6.0");
        let mut inputs = v["inputs"].clone();
        inputs["annual_system_cost"] = json!("40000");
        let (status, out) = post(&app, "/api/v1/roi", inputs.clone()).await;
        assert_eq!(status, StatusCode::OK, "{out}");
        assert_eq!(out["net_benefit"], "0.00");
        inputs["fte_annual_hours"] = json!(0);
        assert_eq!(post(&app, "/api/v1/roi", inputs).await.0, StatusCode::UNPROCESSABLE_ENTITY);
        assert_eq!(get(&app, "/api/v1/roi/scenarios/nowhere").await.0, StatusCode::NOT_FOUND);
    });
}

#[derive(Debug, Clone)]
struct Step {
    operator: usize,
    item: usize,
    action: usize,
}

fn step() -> impl Strategy<Value = Step> {
    (0usize..3, 0usize..64, 0usize..4).prop_map(|(operator, item, action)| Step { operator, item, action })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn every_transition_is_attributed_to_its_operator(steps in proptest::collection::vec(step(), 1..24)) {
        let env = Env::new(40, 1);
        let (engine, app) = env.app();
        let operators = ["alice", "bob", "carol"];
        rt().block_on(async {
            let doc = env.doc_id(0);
            ingest(&env, &app, 0).await;
            run(&app, &doc, "extraction").await;
            run(&app, &doc, "pii_detection").await;
            let ids: Vec<String> = items(&app, &doc).await.iter().map(|i| i["item_id"].as_str().unwrap().to_string()).collect();
            let mut expected: Vec<(String, String)> = Vec::new();
            for s in &steps {
                let id = &ids[s.item % ids.len()];
                let op = operators[s.operator];
                let (action, value) = [("confirm", None), ("reject", None), ("edit", Some("Revised value")), ("commit", None)][s.action];
                let (status, _) = act(&app, id, op, action, value).await;
                if status == StatusCode::OK {
                    expected.push((id.clone(), format!("operator:{op}")));
                } else {
                    assert!(status.is_client_error());
                }
            }
            let events = engine.audit_events(&doc, Some("ReviewTransition")).unwrap();
            let seen: Vec<(String, String)> = events.iter().map(|e| (e.payload["item_id"].as_str().unwrap().to_string(), e.actor.to_string())).collect();
            assert_eq!(seen, expected);
            for id in &ids {
                let item = engine.item(id).unwrap();
                let from_log: Vec<String> = events.iter().filter(|e| e.payload["item_id"] == id.as_str()).map(|e| e.actor.operator_id().unwrap().to_string()).collect();
                let from_history: Vec<String> = item.history.iter().map(|h| h.operator.clone()).collect();
                assert_eq!(from_history, from_log);
                if let Some(last) = item.history.last() {
                    assert_eq!(item.operator_id.as_deref(), Some(last.operator.as_str()));
                }
            }
        });
    }
}
