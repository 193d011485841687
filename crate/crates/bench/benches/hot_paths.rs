use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use planloop_bench::*;
use planloop_core::audit::verify_chain_bytes;
use planloop_core::evalharness::{map_at_50, span_f1};
use planloop_core::redaction::{apply_redactions, scrub_verify};
use planloop_core::vischeck::{builtin_north_arrow, detect_template, non_max_suppression};

fn metrics(c: &mut Criterion) {
    let (gold, pred) = (spans(1, 500), spans(2, 500));
    c.bench_function("span_f1/500", |b| b.iter(|| span_f1(black_box(&gold), black_box(&pred)).unwrap()));
    let mut g = c.benchmark_group("map_at_50");
    for docs in [10, 100] {
        let (gold, pred) = detection_case(3, docs, 8);
        g.bench_with_input(BenchmarkId::from_parameter(docs), &docs, |b, _| b.iter(|| map_at_50(black_box(&gold), black_box(&pred), &["north_point", "red_line"])));
    }
    g.finish();
}

fn detection(c: &mut Criterion) {
    let mut g = c.benchmark_group("nms");
    for n in [64, 512] {
        let dets = nms_case(4, n);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| b.iter(|| non_max_suppression(black_box(&dets), 0.5)));
    }
    g.finish();
    let page = corpus_page(5);
    let template = builtin_north_arrow();
    let mut g = c.benchmark_group("detect_template");
    g.sample_size(10);
    g.bench_function("north_arrow_page", |b| b.iter(|| detect_template(black_box(&page), &template, "north_point", 0.7).unwrap()));
    g.finish();
}

fn audit(c: &mut Criterion) {
    let mut g = c.benchmark_group("verify_chain");
    for n in [100, 1000] {
        let (bytes, head) = audit_log(n);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| b.iter(|| verify_chain_bytes(black_box(&bytes), Some(&head))));
    }
    g.finish();
}

fn redaction(c: &mut Criterion) {
    let (bundle, plan) = redaction_case(6);
    let redacted = apply_redactions(&bundle, &plan).unwrap().new_bundle;
    c.bench_function("apply_redactions", |b| b.iter(|| apply_redactions(black_box(&bundle), black_box(&plan)).unwrap()));
    c.bench_function("scrub_verify", |b| b.iter(|| scrub_verify(black_box(&redacted), black_box(&plan))));
}

criterion_group!(benches, metrics, detection, audit, redaction);
criterion_main!(benches);
