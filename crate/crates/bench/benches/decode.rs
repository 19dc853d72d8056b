use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use treespec_core::cache_manager::CommittedCache;
use treespec_core::drafter::propose_tree;
use treespec_core::engine::{
    generate_baseline, generate_speculative, verify_tree_batched, verify_tree_reference, DecodeConfig,
};
use treespec_core::{DraftConfig, Model, ModelConfig};

fn models() -> (Model<f64>, Model<f64>) {
    let cfg = ModelConfig::teacher(1);
    (
        Model::new(cfg.clone()).unwrap(),
        Model::new(ModelConfig::early_exit(&cfg, 1)).unwrap(),
    )
}

fn verify(c: &mut Criterion) {
    let (teacher, drafter) = models();
    let prompt: Vec<u32> = (0..32).map(|i| (i * 7) % 64).collect();
    let mut committed = CommittedCache::new(teacher.empty_cache());
    teacher.prefill(&prompt, committed.kv_mut()).unwrap();
    let mut g = c.benchmark_group("verify");
    for m in [4, 16, 64] {
        let draft = DraftConfig {
            node_budget: m,
            ..Default::default()
        };
        let tree = propose_tree(&drafter, &prompt, &draft).unwrap();
        g.bench_with_input(BenchmarkId::new("batched", m), &tree, |b, t| {
            b.iter(|| verify_tree_batched(&teacher, &committed, black_box(t), prompt.len()).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("reference", m), &tree, |b, t| {
            b.iter(|| verify_tree_reference(&teacher, &committed, black_box(t), prompt.len()).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("draft", m), &draft, |b, d| {
            b.iter(|| propose_tree(&drafter, black_box(&prompt), d).unwrap())
        });
    }
    g.finish();
}

fn generate(c: &mut Criterion) {
    let (teacher, drafter) = models();
    let prompt: Vec<u32> = (0..16).map(|i| (i * 5) % 64).collect();
    let cfg = DecodeConfig {
        max_new_tokens: 32,
        ..Default::default()
    };
    let mut g = c.benchmark_group("generate");
    g.sample_size(20);
    g.bench_function("baseline", |b| {
        b.iter(|| generate_baseline(&teacher, black_box(&prompt), &cfg).unwrap())
    });
    g.bench_function("speculative", |b| {
        b.iter(|| generate_speculative(&teacher, &drafter, black_box(&prompt), &cfg).unwrap())
    });
    g.finish();
}

criterion_group!(benches, verify, generate);
criterion_main!(benches);
