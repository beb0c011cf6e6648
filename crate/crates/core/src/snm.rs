//! Per-batch temporary memory and noise-sample matching.
//!
//! The matching metric between a query `(f, y)` and a memory entry
//! `(f̂, ŷ)` is `S = cos(f, f̂) · |y − ŷ|`. The K entries with the smallest
//! `S` are the selected noise samples: similar quality, dissimilar content.

use qfm_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FeatureMap;

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pool {
    /// Labeled batch.
    A,
    /// Pseudo-labeled batch.
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Origin {
    pub pool: Pool,
    pub batch_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    /// Flattened feature map; never tracks gradients.
    pub feature: Tensor,
    pub score: f32,
    pub origin: Origin,
}

/// Contents of one mini-batch, replaced wholesale on every ingest.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporaryMemory {
    pool: Pool,
    entries: Vec<MemoryEntry>,
    map_shape: Option<(usize, usize)>,
    generation: u64,
}

impl TemporaryMemory {
    pub fn new(pool: Pool) -> Self {
        Self {
            pool,
            entries: Vec::new(),
            map_shape: None,
            generation: 0,
        }
    }

    pub fn pool(&self) -> Pool {
        self.pool
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// `(rows, dim)` of the feature maps stored by the last ingest.
    pub fn map_shape(&self) -> Option<(usize, usize)> {
        self.map_shape
    }

    /// Entry `i` reshaped back into a feature map.
    pub fn feature_map(&self, i: usize) -> Result<FeatureMap> {
        let (rows, dim) = self.map_shape.ok_or(Error::EmptyMemory)?;
        FeatureMap::unflatten(self.entries[i].feature.data(), rows, dim)
    }

    /// Replaces the contents with `features`/`scores`.
    pub fn ingest(&mut self, features: &[FeatureMap], scores: &[f32]) -> Result<()> {
        if features.len() != scores.len() {
            return Err(Error::LengthMismatch(format!(
                "{} features but {} scores",
                features.len(),
                scores.len()
            )));
        }
        let shape = features.first().map(|f| (f.rows(), f.dim()));
        let mut entries = Vec::with_capacity(features.len());
        for (i, (f, &y)) in features.iter().zip(scores).enumerate() {
            if Some((f.rows(), f.dim())) != shape {
                return Err(Error::LengthMismatch(format!(
                    "feature map {i} is {}x{}, expected {:?}",
                    f.rows(),
                    f.dim(),
                    shape
                )));
            }
            if !y.is_finite() {
                return Err(Error::Degenerate(format!("score {i} is not finite")));
            }
            entries.push(MemoryEntry {
                feature: Tensor::from_vec(f.flatten())?,
                score: y,
                origin: Origin {
                    pool: self.pool,
                    batch_index: i,
                },
            });
        }
        self.entries = entries;
        self.map_shape = shape;
        self.generation += 1;
        Ok(())
    }
}

/// What the matching metric measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchMode {
    /// `cos · |Δy|`
    #[default]
    Full,
    /// `|Δy|` only: similar quality, content ignored.
    QualityOnly,
    /// `cos` only: dissimilar content, quality ignored.
    FeatureOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchConfig {
    /// Clamp the cosine to `[0, 1]` before the product.
    pub clamp_cos: bool,
    /// Z-score memory scores before measuring distances.
    pub zscore_scores: bool,
    /// Layer-normalize each flattened feature before the cosine.
    pub layernorm_features: bool,
    pub mode: MatchMode,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            clamp_cos: true,
            zscore_scores: true,
            layernorm_features: true,
            mode: MatchMode::Full,
        }
    }
}

fn cosine(f: &[f32], g: &[f32]) -> Result<f64> {
    if f.len() != g.len() {
        return Err(Error::LengthMismatch(format!(
            "feature lengths {} and {}",
            f.len(),
            g.len()
        )));
    }
    let mut dot = 0.0f64;
    let mut nf = 0.0f64;
    let mut ng = 0.0f64;
    for (&a, &b) in f.iter().zip(g) {
        let (a, b) = (a as f64, b as f64);
        dot += a * b;
        nf += a * a;
        ng += b * b;
    }
    if nf == 0.0 || ng == 0.0 {
        return Err(Error::Degenerate("zero-norm feature vector".into()));
    }
    Ok(dot / (nf.sqrt() * ng.sqrt()))
}

fn metric(cos: f64, dist: f64, clamp_cos: bool, mode: MatchMode) -> f64 {
    let cos = if clamp_cos { cos.clamp(0.0, 1.0) } else { cos };
    match mode {
        MatchMode::Full => cos * dist,
        MatchMode::QualityOnly => dist,
        MatchMode::FeatureOnly => cos,
    }
}

/// `cos(f, f̂) · |y − ŷ|`, cosine optionally clamped to `[0, 1]`.
pub fn matching_metric(f: &[f32], y: f32, f_hat: &[f32], y_hat: f32, clamp_cos: bool) -> Result<f64> {
    let cos = cosine(f, f_hat)?;
    Ok(metric(cos, (y as f64 - y_hat as f64).abs(), clamp_cos, MatchMode::Full))
}

/// Selected memory entries in metric order.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
}

impl MatchResult {
    /// Number of entries actually returned (K clamped to the memory size).
    pub fn effective_k(&self) -> usize {
        self.indices.len()
    }
}

fn select(mut scored: Vec<(f64, usize)>, k: usize) -> Result<MatchResult> {
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    if scored.is_empty() {
        return Err(Error::EmptyMemory);
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.truncate(k);
    Ok(MatchResult {
        indices: scored.iter().map(|s| s.1).collect(),
        scores: scored.iter().map(|s| s.0).collect(),
    })
}

/// The `k` raw memory entries minimizing the metric against `(query_f,
/// query_y)`, ties to the lower index. `exclude` removes one entry (the
/// query itself when it lives in this memory).
pub fn match_topk(
    query_f: &[f32],
    query_y: f32,
    memory: &TemporaryMemory,
    k: usize,
    exclude: Option<usize>,
    clamp_cos: bool,
) -> Result<MatchResult> {
    let mut scored = Vec::with_capacity(memory.len());
    for (i, e) in memory.entries().iter().enumerate() {
        if Some(i) == exclude {
            continue;
        }
        scored.push((matching_metric(query_f, query_y, e.feature.data(), e.score, clamp_cos)?, i));
    }
    select(scored, k)
}

pub(crate) fn layernorm_vec(v: &[f32]) -> Vec<f32> {
    let n = v.len() as f64;
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    let rstd = 1.0 / (var + NORM_EPS).sqrt();
    v.iter().map(|&x| ((x as f64 - mean) * rstd) as f32).collect()
}

/// Population mean and standard deviation.
fn moments(scores: &[f32]) -> (f64, f64) {
    let n = scores.len() as f64;
    let mean = scores.iter().map(|&y| y as f64).sum::<f64>() / n;
    let var = scores.iter().map(|&y| (y as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn zscore(y: f32, mean: f64, std: f64, population: usize) -> f32 {
    if population < 2 {
        y
    } else if std == 0.0 {
        0.0
    } else {
        ((y as f64 - mean) / std) as f32
    }
}

/// Layer-normalizes every feature vector and z-scores the scores over the
/// list. A single score is returned unchanged; equal scores map to 0.
pub fn normalize_for_matching(features: &[Vec<f32>], scores: &[f32]) -> (Vec<Vec<f32>>, Vec<f32>) {
    let feats = features.iter().map(|f| layernorm_vec(f)).collect();
    let (mean, std) = moments(scores);
    let ys = scores.iter().map(|&y| zscore(y, mean, std, scores.len())).collect();
    (feats, ys)
}

/// A memory prepared for repeated queries: features and scores already
/// normalized according to a [`MatchConfig`]. Queries from outside the
/// memory are normalized with the memory's score statistics.
#[derive(Debug, Clone)]
pub struct MatchSpace {
    cfg: MatchConfig,
    features: Vec<Vec<f32>>,
    scores: Vec<f32>,
    mean: f64,
    std: f64,
}

impl MatchSpace {
    pub fn new(memory: &TemporaryMemory, cfg: MatchConfig) -> Self {
        let raw_scores: Vec<f32> = memory.entries().iter().map(|e| e.score).collect();
        let (mean, std) = if raw_scores.is_empty() {
            (0.0, 0.0)
        } else {
            moments(&raw_scores)
        };
        let features = memory
            .entries()
            .iter()
            .map(|e| {
                if cfg.layernorm_features {
                    layernorm_vec(e.feature.data())
                } else {
                    e.feature.data().to_vec()
                }
            })
            .collect();
        let mut space = Self {
            cfg,
            features,
            scores: Vec::new(),
            mean,
            std,
        };
        space.scores = raw_scores.iter().map(|&y| space.norm_score(y)).collect();
        space
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn config(&self) -> &MatchConfig {
        &self.cfg
    }

    fn norm_score(&self, y: f32) -> f32 {
        if self.cfg.zscore_scores {
            zscore(y, self.mean, self.std, self.features.len())
        } else {
            y
        }
    }

    // the quality-only metric never looks at features
    fn cosine(&self, f: &[f32], g: &[f32]) -> Result<f64> {
        match self.cfg.mode {
            MatchMode::QualityOnly => Ok(0.0),
            _ => cosine(f, g),
        }
    }

    /// Metric between memory entry `i` and memory entry `j`.
    pub fn entry_metric(&self, i: usize, j: usize) -> Result<f64> {
        let cos = self.cosine(&self.features[i], &self.features[j])?;
        let d = (self.scores[i] as f64 - self.scores[j] as f64).abs();
        Ok(metric(cos, d, self.cfg.clamp_cos, self.cfg.mode))
    }

    /// Query with memory entry `i` itself, excluding it from the result.
    pub fn query_entry(&self, i: usize, k: usize) -> Result<MatchResult> {
        let scored = (0..self.len())
            .filter(|&j| j != i)
            .map(|j| Ok((self.entry_metric(i, j)?, j)))
            .collect::<Result<Vec<_>>>()?;
        select(scored, k)
    }

    /// Query with an outside feature (flattened, raw) and raw score.
    pub fn query(&self, feature: &[f32], score: f32, k: usize) -> Result<MatchResult> {
        let f = if self.cfg.layernorm_features {
            layernorm_vec(feature)
        } else {
            feature.to_vec()
        };
        let y = self.norm_score(score) as f64;
        let scored = (0..self.len())
            .map(|j| {
                let cos = self.cosine(&f, &self.features[j])?;
                let d = (y - self.scores[j] as f64).abs();
                Ok((metric(cos, d, self.cfg.clamp_cos, self.cfg.mode), j))
            })
            .collect::<Result<Vec<_>>>()?;
        select(scored, k)
    }

    /// Full feature-score matrix between all memory entries (diagonal
    /// included).
    pub fn matrix(&self) -> Result<Vec<Vec<f64>>> {
        (0..self.len())
            .map(|i| (0..self.len()).map(|j| self.entry_metric(i, j)).collect())
            .collect()
    }
}
