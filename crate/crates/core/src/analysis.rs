//! Confused-pair analysis: pair every image with its nearest neighbour in
//! feature space and histogram the label gaps of those pairs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::snm::layernorm_vec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NeighborMetric {
    /// Cosine similarity of layer-normalized vectors.
    #[default]
    Cosine,
    /// Euclidean distance of raw vectors.
    Euclidean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborPair {
    pub query: usize,
    pub neighbor: usize,
    pub label_gap: f64,
    /// `|prediction − label|` of the query and of the neighbour.
    pub query_error: Option<f64>,
    pub neighbor_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionHistogram {
    /// `buckets + 1` non-decreasing edges from 0 to the largest pairwise
    /// gap; bucket `i` is `[edges[i], edges[i+1])`, the last one closed.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub gap_threshold: f64,
    /// Nearest-neighbour pairs with a label gap above the threshold.
    pub confused: usize,
    pub pairs: Vec<NeighborPair>,
}

impl ConfusionHistogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Nearest neighbour of every vector (itself excluded, ties to the lower
/// index).
pub fn nearest_neighbors(features: &[Vec<f32>], metric: NeighborMetric) -> Vec<usize> {
    let prepared: Vec<Vec<f64>> = features
        .iter()
        .map(|f| match metric {
            NeighborMetric::Cosine => {
                let v: Vec<f64> = layernorm_vec(f).iter().map(|&x| x as f64).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 {
                    v.iter().map(|x| x / norm).collect()
                } else {
                    v
                }
            }
            NeighborMetric::Euclidean => f.iter().map(|&x| x as f64).collect(),
        })
        .collect();
    (0..prepared.len())
        .into_par_iter()
        .map(|i| {
            let mut best = usize::MAX;
            let mut best_d = f64::INFINITY;
            for (j, g) in prepared.iter().enumerate() {
                if j == i {
                    continue;
                }
                let d = match metric {
                    // distance = 1 − cosine
                    NeighborMetric::Cosine => {
                        1.0 - prepared[i].iter().zip(g).map(|(a, b)| a * b).sum::<f64>()
                    }
                    NeighborMetric::Euclidean => {
                        prepared[i].iter().zip(g).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
                    }
                };
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Histogram from precomputed features. Bucket edges are quantiles of all
/// pairwise label gaps (deciles for `buckets = 10`).
pub fn confusion_from_features(
    features: &[Vec<f32>],
    labels: &[f32],
    preds: Option<&[f32]>,
    buckets: usize,
    gap_threshold: f64,
    metric: NeighborMetric,
) -> Result<ConfusionHistogram> {
    let n = features.len();
    if n < 2 {
        return Err(Error::Degenerate("confusion analysis needs at least two images".into()));
    }
    if labels.len() != n || preds.is_some_and(|p| p.len() != n) {
        return Err(Error::LengthMismatch("features, labels and predictions differ in length".into()));
    }
    if buckets == 0 {
        return Err(Error::Config("at least one bucket is required".into()));
    }
    let mut gaps = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            gaps.push((labels[i] as f64 - labels[j] as f64).abs());
        }
    }
    gaps.sort_by(f64::total_cmp);
    let mut edges: Vec<f64> = (0..=buckets)
        .map(|b| quantile(&gaps, b as f64 / buckets as f64))
        .collect();
    edges[0] = 0.0;

    let nn = nearest_neighbors(features, metric);
    let mut counts = vec![0usize; buckets];
    let mut pairs = Vec::with_capacity(n);
    let mut confused = 0;
    for (i, &j) in nn.iter().enumerate() {
        let gap = (labels[i] as f64 - labels[j] as f64).abs();
        let bucket = (0..buckets).find(|&b| gap < edges[b + 1]).unwrap_or(buckets - 1);
        counts[bucket] += 1;
        if gap > gap_threshold {
            confused += 1;
        }
        let err = |k: usize| preds.map(|p| (p[k] as f64 - labels[k] as f64).abs());
        pairs.push(NeighborPair {
            query: i,
            neighbor: j,
            label_gap: gap,
            query_error: err(i),
            neighbor_error: err(j),
        });
    }
    Ok(ConfusionHistogram {
        edges,
        counts,
        gap_threshold,
        confused,
        pairs,
    })
}

/// Encodes every sample with `model` and analyses the flattened feature
/// maps against the labels (in label units).
pub fn confusion_histogram(
    model: &Model,
    samples: &[Sample],
    buckets: usize,
    gap_threshold: f64,
) -> Result<ConfusionHistogram> {
    let rows = samples
        .par_iter()
        .map(|s| {
            let y = s
                .score
                .ok_or_else(|| Error::Config(format!("sample {:?} has no score", s.id)))?;
            let img = s.load_image()?;
            let f = model.encode_image(&img)?;
            let raw = model.decode_features(&f)?;
            Ok((f.flatten(), y, model.label_scale().denormalize(raw)))
        })
        .collect::<Result<Vec<_>>>()?;
    let features: Vec<Vec<f32>> = rows.iter().map(|r| r.0.clone()).collect();
    let labels: Vec<f32> = rows.iter().map(|r| r.1).collect();
    let preds: Vec<f32> = rows.iter().map(|r| r.2).collect();
    confusion_from_features(
        &features,
        &labels,
        Some(&preds),
        buckets,
        gap_threshold,
        NeighborMetric::Cosine,
    )
}
