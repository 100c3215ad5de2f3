use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use ume_core::data::{generate_synthetic, GeneratorConfig, Sample};
use ume_core::encoder::{ExpertEnsemble, ModelConfig};
use ume_core::parallel::Parallelism;
use ume_core::trainer::{compute_routing, pooled_features};

fn modes() -> [(&'static str, Parallelism); 2] {
    [("sequential", Parallelism::Sequential), ("rayon", Parallelism::available())]
}

fn bench(c: &mut Criterion) {
    let data = generate_synthetic(&GeneratorConfig { num_samples: 512, ..GeneratorConfig::benchmark() }).unwrap();
    let mut cfg = ModelConfig::new(data.tree.len());
    cfg.experts = 3;
    let ens = ExpertEnsemble::new(cfg, data.tree.clone()).unwrap();
    let samples: Vec<&Sample> = data.corpus.samples.iter().collect();

    let mut group = c.benchmark_group("encode_512");
    group.sample_size(10);
    for (name, mode) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| pooled_features(&ens, &samples, mode).unwrap())
        });
    }
    group.finish();

    let feats = pooled_features(&ens, &samples, Parallelism::Sequential).unwrap();
    let mut group = c.benchmark_group("routing_512");
    for (name, mode) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| compute_routing(&ens, &feats, 2, 0.5, mode).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
