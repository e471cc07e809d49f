use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use lsaq_core::toy::{calibration_prompts, capture_bundle, ToyRng};
use lsaq_core::{
    allocate_precision, init_toy, pack_int4, quantize_tensor, score_layers, topk_indices, Bits,
    Metric, ModelProfile, ToyConfig,
};

fn random(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ToyRng::new(seed, 1);
    (0..n).map(|_| rng.symmetric(1.0)).collect()
}

fn topk(c: &mut Criterion) {
    let mut group = c.benchmark_group("topk");
    for vocab in [1_000, 32_000] {
        let logits = random(vocab, 1);
        group.bench_with_input(BenchmarkId::from_parameter(vocab), &logits, |b, l| {
            b.iter(|| topk_indices(black_box(l), 10).unwrap())
        });
    }
    group.finish();
}

fn quantize(c: &mut Criterion) {
    let w = random(4096 * 4096 / 16, 2);
    let mut group = c.benchmark_group("quantize_tensor_1024x1024");
    for bits in [Bits::Eight, Bits::Four] {
        group.bench_function(format!("int{}", bits.get()), |b| {
            b.iter(|| quantize_tensor(black_box(&w), 1024, 1024, bits).unwrap())
        });
    }
    group.finish();
    let q: Vec<i8> = (0..1 << 20).map(|i| (i % 15) as i8 - 7).collect();
    c.bench_function("pack_int4_1M", |b| {
        b.iter(|| pack_int4(black_box(&q)).unwrap())
    });
}

fn score(c: &mut Criterion) {
    let w = init_toy(ToyConfig::default()).unwrap();
    let bundle = capture_bundle(&w, &calibration_prompts(0, 16, 32, w.config.vocab)).unwrap();
    c.bench_function("score_layers_toy_jaccard", |b| {
        b.iter(|| score_layers(black_box(&bundle), Metric::Jaccard, 10).unwrap())
    });
}

fn allocate(c: &mut Criterion) {
    let p = ModelProfile::builtin("llama-2-7b").unwrap();
    let ranked: Vec<usize> = (0..32).rev().collect();
    c.bench_function("allocate_llama2_7b_6gb", |b| {
        b.iter(|| allocate_precision(black_box(&ranked), &p, 6_000_000_000).unwrap())
    });
}

criterion_group!(benches, topk, quantize, score, allocate);
criterion_main!(benches);
