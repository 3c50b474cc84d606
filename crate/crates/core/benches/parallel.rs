//! Sequential (one-thread pool) against the default pool on the data-parallel
//! hot paths. Build with `--no-default-features` to bench the fallback.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cinetraj::metrics::{classifier_metrics, label_set, prdc};
use cinetraj::par;
use cinetraj::synth::{gen_samples, SynthSpec};
use cinetraj::tagging::TagConfig;

fn pools() -> [(&'static str, usize); 2] {
    let all = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    [("1-thread", 1), ("default", all)]
}

fn bench_synth(c: &mut Criterion) {
    let spec = SynthSpec {
        n_samples: 200,
        max_segments: 2,
        ..Default::default()
    };
    let mut group = c.benchmark_group("synth_200");
    group.sample_size(10);
    for (name, threads) in pools() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &threads, |b, &t| {
            b.iter(|| par::with_threads(t, || black_box(gen_samples(&spec).unwrap())))
        });
    }
    group.finish();
}

fn bench_tagging(c: &mut Criterion) {
    let spec = SynthSpec {
        n_samples: 200,
        max_segments: 2,
        ..Default::default()
    };
    let samples = gen_samples(&spec).unwrap();
    let prompts: Vec<_> = samples.iter().map(|s| label_set(&s.camera_tags)).collect();
    let cams: Vec<_> = samples.into_iter().map(|s| s.camera).collect();
    let cfg = TagConfig::default();
    let mut group = c.benchmark_group("classifier_200");
    for (name, threads) in pools() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &threads, |b, &t| {
            b.iter(|| par::with_threads(t, || black_box(classifier_metrics(&prompts, &cams, &cfg).unwrap())))
        });
    }
    group.finish();
}

fn bench_prdc(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut set = |n: usize| -> Vec<Vec<f64>> { (0..n).map(|_| (0..64).map(|_| rng.gen::<f64>()).collect()).collect() };
    let (real, gen) = (set(1000), set(1000));
    let mut group = c.benchmark_group("prdc_1000x64");
    group.sample_size(10);
    for (name, threads) in pools() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &threads, |b, &t| {
            b.iter(|| par::with_threads(t, || black_box(prdc(&real, &gen, 3).unwrap())))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_synth, bench_tagging, bench_prdc);
criterion_main!(benches);
