use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use neumat_bench::{decoder, inputs};

const IN: usize = 20;
const OUT: usize = 3;

fn fused_vs_naive(c: &mut Criterion) {
    let mut g = c.benchmark_group("decoder_3x64");
    for batch in [4096usize, 16384] {
        let net = decoder(IN, 64, 3, OUT, 1);
        let q = net.quantize();
        let x = inputs(batch, IN, 2);
        let mut out = vec![0f32; batch * OUT];
        g.throughput(Throughput::Elements(batch as u64));
        g.bench_with_input(BenchmarkId::new("naive_fp32", batch), &x, |b, x| {
            b.iter(|| {
                for (row, y) in x.chunks_exact(IN).zip(out.chunks_exact_mut(OUT)) {
                    y.copy_from_slice(&net.forward(black_box(row)).unwrap());
                }
            })
        });
        g.bench_with_input(BenchmarkId::new("fused_fp16", batch), &x, |b, x| {
            b.iter(|| {
                for (row, y) in x.chunks_exact(IN).zip(out.chunks_exact_mut(OUT)) {
                    q.fused_forward(black_box(row), y).unwrap();
                }
            })
        });
        g.bench_with_input(BenchmarkId::new("fused_fp16_batched", batch), &x, |b, x| {
            b.iter(|| q.fused_forward_batch(black_box(x), &mut out).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, fused_vs_naive);
criterion_main!(benches);
