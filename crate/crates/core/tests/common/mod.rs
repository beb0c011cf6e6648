//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use qfm_core::model::FeatureMap;
use qfm_core::snm::{Pool, TemporaryMemory};
use qfm_tensor::Tensor;
use rand::Rng;

/// Cosine computed straight from the definition.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum();
    dot / (na.sqrt() * nb.sqrt())
}

pub fn metric(f: &[f32], y: f64, g: &[f32], z: f64, clamp: bool) -> f64 {
    let c = cosine(f, g);
    let c = if clamp { c.max(0.0).min(1.0) } else { c };
    c * (y - z).abs()
}

/// Top-k by repeated minimum extraction; ties go to the lower index.
pub fn topk(values: &[(usize, f64)], k: usize) -> Vec<(usize, f64)> {
    let mut left: Vec<(usize, f64)> = values.to_vec();
    let mut out = Vec::new();
    while out.len() < k && !left.is_empty() {
        let mut best = 0;
        for i in 1..left.len() {
            let (bi, bv) = left[best];
            let (ci, cv) = left[i];
            if cv < bv || (cv == bv && ci < bi) {
                best = i;
            }
        }
        out.push(left.remove(best));
    }
    out
}

pub fn layernorm(v: &[f32]) -> Vec<f32> {
    let n = v.len() as f64;
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v.iter().map(|&x| (x as f64 - mean) * (x as f64 - mean)).sum::<f64>() / n;
    v.iter().map(|&x| ((x as f64 - mean) / (var + 1e-5).sqrt()) as f32).collect()
}

/// Ranks by counting: `#less + (#equal + 1) / 2`.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&x| {
            let less = v.iter().filter(|&&y| y < x).count() as f64;
            let equal = v.iter().filter(|&&y| y == x).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

/// Pearson correlation via the raw-moment formula in f64.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
    let sx = (x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / n).sqrt();
    let sy = (y.iter().map(|b| (b - my).powi(2)).sum::<f64>() / n).sqrt();
    cov / (sx * sy)
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&ranks(x), &ranks(y))
}

pub fn memory_from(features: &[Vec<f32>], scores: &[f32], pool: Pool) -> TemporaryMemory {
    let maps: Vec<FeatureMap> = features
        .iter()
        .map(|f| FeatureMap::new(Tensor::new(vec![1, f.len()], f.clone()).unwrap()).unwrap())
        .collect();
    let mut m = TemporaryMemory::new(pool);
    m.ingest(&maps, scores).unwrap();
    m
}

/// Feature vectors in U(-1, 1) with scores in U(0, 100).
pub fn random_memory<R: Rng>(rng: &mut R, n: usize, dim: usize) -> (Vec<Vec<f32>>, Vec<f32>) {
    let feats = (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let scores = (0..n).map(|_| rng.random_range(0.0..100.0)).collect();
    (feats, scores)
}
