use criterion::{black_box, criterion_group, criterion_main, Criterion};
use refseg_core::metrics::{aggregate, Sample};
use refseg_core::parser::{decompose, CategoryLexicon, SpatialLexicon};
use refseg_core::{Provenance, SegmentationMask};

fn masks(n: usize, side: usize) -> Vec<SegmentationMask> {
    (0..n)
        .map(|k| {
            let px = (0..side * side).map(|i| (i * 31 + k * 7) % 5 < 2).collect();
            SegmentationMask::new(side, side, px, Provenance::Predicted).unwrap()
        })
        .collect()
}

fn metrics(c: &mut Criterion) {
    let preds = masks(64, 96);
    let gts = masks(64, 96);
    c.bench_function("aggregate_64x96x96", |b| {
        b.iter(|| {
            aggregate(preds.iter().zip(&gts).map(|(p, g)| Sample {
                pred: p,
                gt: g,
                category: Some("car"),
            }))
            .unwrap()
        })
    });

    let cats = CategoryLexicon::rrsisd();
    let spatial = SpatialLexicon::default_lexicon();
    c.bench_function("decompose", |b| {
        b.iter(|| decompose(black_box("the gray vehicle on the left of the large storage tank"), &cats, &spatial).unwrap())
    });
}

criterion_group!(benches, metrics);
criterion_main!(benches);
