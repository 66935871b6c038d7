use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use refseg_core::harness::{Batch, RefSegModel, RunConfig};
use refseg_core::parser::{decompose, CategoryLexicon, SpatialLexicon};
use refseg_core::{DType, Device, Tensor, Vocabulary};

fn config(size: usize) -> RunConfig {
    RunConfig {
        image_size: size,
        channels: [16, 32, 48, 64],
        text_dim: 32,
        attn_dim: 32,
        mlp_hidden: 64,
        tmem_blocks: 1,
        decoder_dim: 16,
        ..RunConfig::default()
    }
}

fn batch(model: &RefSegModel, b: usize, size: usize) -> Batch {
    let expr = decompose(
        "the red circle in the top left",
        &CategoryLexicon::synthetic(),
        &SpatialLexicon::default_lexicon(),
    )
    .unwrap();
    Batch {
        images: Tensor::full(0.5f32, (b, 3, size, size), &Device::Cpu).unwrap(),
        texts: vec![model.tokenize(&expr); b],
        targets: Some(Tensor::zeros((b, size, size), DType::F32, &Device::Cpu).unwrap()),
    }
}

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward");
    group.sample_size(10);
    for size in [64, 96] {
        let model = RefSegModel::new(&config(size), Vocabulary::builtin(), DType::F32).unwrap();
        let b = batch(&model, 8, size);
        group.bench_with_input(BenchmarkId::new("inference", size), &b, |bench, b| {
            bench.iter(|| model.forward(b, false).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("loss_and_backward", size), &b, |bench, b| {
            bench.iter(|| model.loss(b).unwrap().1.total.backward().unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, forward);
criterion_main!(benches);
