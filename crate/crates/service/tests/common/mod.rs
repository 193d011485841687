#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use base64::Engine as _;
use http_body_util::BodyExt;
use planloop_core::evalharness::{generate_fixtures, generate_synthetic_corpus, SyntheticCorpus};
use planloop_service::{router, Engine, ServiceConfig};
use serde_json::Value;
use tempfile::TempDir;
use tower::ServiceExt;

pub struct Env {
    pub data: TempDir,
    pub fixtures: TempDir,
    pub corpus: SyntheticCorpus,
}

impl Env {
    /// A synthetic corpus with clean provider fixtures written to disk.
    pub fn new(seed: u64, n_docs: usize) -> Self {
        let corpus = generate_synthetic_corpus(seed, n_docs).unwrap();
        let fixtures = tempfile::tempdir().unwrap();
        generate_fixtures(&corpus, 0).write(fixtures.path()).unwrap();
        Env { data: tempfile::tempdir().unwrap(), fixtures, corpus }
    }

    pub fn config(&self) -> ServiceConfig {
        ServiceConfig::new(self.data.path()).with_mock_provider(self.fixtures.path())
    }

    pub fn engine(&self) -> Arc<Engine> {
        Arc::new(Engine::open(self.config()).unwrap())
    }

    pub fn app(&self) -> (Arc<Engine>, Router) {
        let engine = self.engine();
        (Arc::clone(&engine), router(engine))
    }

    pub fn doc_id(&self, i: usize) -> String {
        self.corpus.docs[i].doc_id.clone()
    }
}

pub fn archive_base64(bundle: &planloop_core::DocumentBundle) -> String {
    base64::engine::general_purpose::STANDARD.encode(bundle.canonical_bytes())
}

pub async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(serde_json::to_vec(&v).unwrap())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap_or(Value::String(String::from_utf8_lossy(&bytes).into())) };
    (status, value)
}

pub async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    call(app, Method::GET, uri, None).await
}

pub async fn post(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    call(app, Method::POST, uri, Some(body)).await
}

pub fn rt() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().unwrap()
}

pub fn file_len(path: &Path) -> u64 {
    std::fs::metadata(path).map(|m| m.len()).unwrap_or(0)
}
