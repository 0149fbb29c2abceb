use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use mltile::ops::matmul;
use mltile::quant::{attention_w8a16, dequantize, qmatmul};
use mltile::ElementType;
use mltile_bench::{inputs, label, quant_operands, UNET_BLOCKS};

fn integer_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for (m, k, n) in [(16, 16, 16), (256, 77, 160), (1024, 77, 80)] {
        let q = quant_operands(m, k, n);
        let id = format!("{m}x{k}x{n}");
        group.bench_function(BenchmarkId::new("qmatmul", &id), |b| {
            b.iter(|| qmatmul(&q.wq, &q.xq, &q.wp, &q.xp).unwrap())
        });
        let (x, w) = (dequantize(&q.xq, &q.xp).unwrap(), dequantize(&q.wq, &q.wp).unwrap());
        group.bench_function(BenchmarkId::new("fp32", &id), |b| {
            b.iter(|| matmul(&x, &w, ElementType::Fp32).unwrap())
        });
    }
    group.finish();
}

fn w8a16_block(c: &mut Criterion) {
    let mut group = c.benchmark_group("w8a16_attention");
    group.sample_size(10);
    for dims in &UNET_BLOCKS[1..] {
        let x = inputs(*dims);
        group.bench_function(label(*dims), |b| b.iter(|| attention_w8a16(&x).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, integer_matmul, w8a16_block);
criterion_main!(benches);
