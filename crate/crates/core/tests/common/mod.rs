//! Reference implementations shared by the integration tests.
//!
//! Everything here is written with plain loops over `Vec<f64>` so it does
//! not share code paths with the tensor implementation under test.

#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use refseg_core::encoders::LinguisticFeatures;
use refseg_core::nn::Linear;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

/// `(B, N, D)` random embeddings with the first `lens[b]` tokens unmasked.
pub fn random_text(rng: &mut ChaCha8Rng, lens: &[usize], n: usize, d: usize) -> LinguisticFeatures {
    let emb = random_tensor(rng, &[lens.len(), n, d]);
    let mask: Vec<f64> = lens
        .iter()
        .flat_map(|&l| (0..n).map(move |j| if j < l { 1.0 } else { 0.0 }))
        .collect();
    let mask = Tensor::from_vec(mask, (lens.len(), n), &Device::Cpu).unwrap();
    LinguisticFeatures::new(emb, mask).unwrap()
}

pub fn mat(t: &Tensor) -> Vec<Vec<f64>> {
    t.to_dtype(DType::F64).unwrap().to_vec2().unwrap()
}

pub fn vec3(t: &Tensor) -> Vec<Vec<Vec<f64>>> {
    t.to_dtype(DType::F64).unwrap().to_vec3().unwrap()
}

pub fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

/// `W x + b` for one row, with `W` stored `(out, in)`.
pub fn dense(l: &Linear, x: &[f64]) -> Vec<f64> {
    let w = mat(l.weight.as_tensor());
    let b = l.bias.as_ref().map(|b| flat(b.as_tensor()));
    w.iter()
        .enumerate()
        .map(|(o, row)| {
            let s: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
            s + b.as_ref().map_or(0.0, |b| b[o])
        })
        .collect()
}

/// Literal softmax attention for one batch element:
/// `out[t] = sum_j softmax_j(q_t . k_j * scale) v_j` over unmasked `j`.
pub fn attention_oracle(
    queries: &[Vec<f64>],
    keys: &[Vec<f64>],
    values: &[Vec<f64>],
    mask: &[f64],
    scale: f64,
) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(queries.len());
    for q in queries {
        let mut logits = Vec::new();
        for (j, k) in keys.iter().enumerate() {
            if mask[j] > 0.5 {
                let mut dot = 0.0;
                for c in 0..q.len() {
                    dot += q[c] * k[c];
                }
                logits.push((j, dot * scale));
            }
        }
        let peak = logits.iter().map(|&(_, l)| l).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|&(_, l)| (l - peak).exp()).sum();
        let mut row = vec![0.0; values[0].len()];
        for &(j, l) in &logits {
            let w = (l - peak).exp() / z;
            for c in 0..row.len() {
                row[c] += w * values[j][c];
            }
        }
        out.push(row);
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Central finite differences of `f` with respect to every entry of every
/// var, compared with the analytic gradient. Returns the worst per-tensor
/// relative error `|a - n| / max(|a|, |n|)` and the name it occurred on.
pub fn gradient_check<F>(vars: &[(String, Var)], step: f64, f: F) -> (f64, String)
where
    F: Fn() -> Tensor,
{
    let grads = f().backward().unwrap();
    let mut worst = (0.0, String::new());
    for (name, var) in vars {
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => flat(g),
            None => vec![0.0; var.elem_count()],
        };
        let base = flat(var.as_tensor());
        let shape = var.dims().to_vec();
        let mut numeric = vec![0.0; base.len()];
        for i in 0..base.len() {
            let probe = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
                f().to_scalar::<f64>().unwrap()
            };
            numeric[i] = (probe(step) - probe(-step)) / (2.0 * step);
        }
        var.set(&Tensor::from_vec(base, shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = na.max(nn);
        let rel = if denom < 1e-12 { diff } else { diff / denom };
        if rel > worst.0 {
            worst = (rel, name.clone());
        }
    }
    worst
}

/// Hard masks as flat bools.
pub fn random_mask(rng: &mut ChaCha8Rng, n: usize, density: f64) -> Vec<bool> {
    (0..n).map(|_| rng.random_bool(density)).collect()
}
