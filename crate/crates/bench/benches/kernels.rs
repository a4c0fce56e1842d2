use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rsmoe::config::ModelConfig;
use rsmoe::metrics::{bleu_n, cider, meteor, rouge_l};
use rsmoe::Graph;
use rsmoe_bench::{caption_corpus, random_tensor, Stage1Case};
use std::hint::black_box;

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [16, 64, 128] {
        let a = random_tensor(&[n, n], 1);
        let b = random_tensor(&[n, n], 2);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| black_box(a.matmul(&b).unwrap()))
        });
    }
    group.finish();
}

fn attention_backward(c: &mut Criterion) {
    let q = random_tensor(&[24, 32], 3);
    let k = random_tensor(&[24, 32], 4);
    c.bench_function("softmax_attention_fwd_bwd", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let qv = g.leaf(q.clone().with_requires_grad(true));
            let kv = g.leaf(k.clone().with_requires_grad(true));
            let s = g.matmul_nt(qv, kv).unwrap();
            let p = g.softmax(s, 1).unwrap();
            let o = g.matmul(p, kv).unwrap();
            let l = g.sum(o);
            g.backward(l).unwrap();
            black_box(g.grad(qv).map(|x| x[0]))
        })
    });
}

fn stage1_step(c: &mut Criterion) {
    let case = Stage1Case::new(&ModelConfig::default());
    c.bench_function("stage1_loss_fwd_bwd", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let fi = g.constant(case.features.0.clone());
            let l = case.model.stage1_loss(&mut g, fi, &case.instr, &case.target).unwrap();
            g.backward(l).unwrap();
            black_box(g.value(l).item())
        })
    });
    c.bench_function("greedy_caption", |bench| {
        bench.iter(|| black_box(case.model.caption(&case.vocab, &case.sample.image, &case.instr).unwrap()))
    });
}

fn metrics(c: &mut Criterion) {
    let corpus = caption_corpus(100);
    let mut group = c.benchmark_group("metrics_100_images");
    group.bench_function("bleu4", |b| b.iter(|| black_box(bleu_n(&corpus, 4).unwrap())));
    group.bench_function("rouge_l", |b| b.iter(|| black_box(rouge_l(&corpus).unwrap())));
    group.bench_function("meteor", |b| b.iter(|| black_box(meteor(&corpus).unwrap())));
    group.bench_function("cider", |b| b.iter(|| black_box(cider(&corpus).unwrap())));
    group.finish();
}

criterion_group!(benches, matmul, attention_backward, stage1_step, metrics);
criterion_main!(benches);
