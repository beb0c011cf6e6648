//! Correlation metrics and per-repeat aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check(preds: &[f64], labels: &[f64]) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(Error::LengthMismatch(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.len() < 2 {
        return Err(Error::UndefinedCorrelation("fewer than two samples"));
    }
    if preds.iter().chain(labels).any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("non-finite value in correlation input".into()));
    }
    Ok(())
}

/// Pearson linear correlation.
pub fn plcc(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check(preds, labels)?;
    let n = preds.len() as f64;
    let mp = preds.iter().sum::<f64>() / n;
    let ml = labels.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&p, &l) in preds.iter().zip(labels) {
        let (dp, dl) = (p - mp, l - ml);
        sxy += dp * dl;
        sxx += dp * dp;
        syy += dl * dl;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn srcc(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check(preds, labels)?;
    plcc(&average_ranks(preds), &average_ranks(labels))
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Mean, median and sample standard deviation of a list.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median = if sorted.len() % 2 == 1 {
            sorted[mid]
        } else {
            (sorted[mid - 1] + sorted[mid]) / 2.0
        };
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, median, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatMetrics {
    pub repeat: usize,
    pub plcc: f64,
    pub srcc: f64,
    pub n: usize,
}

pub const AGGREGATION: &str = "mean over repeats (median and sample std also reported)";

/// Metrics over repeated splits. The headline `plcc`/`srcc` are means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub plcc: f64,
    pub srcc: f64,
    /// Predictions scored in total, summed over repeats.
    pub n: usize,
    pub repeats: Vec<RepeatMetrics>,
    pub plcc_summary: Summary,
    pub srcc_summary: Summary,
    pub aggregation: String,
}

impl MetricReport {
    pub fn from_repeats(repeats: Vec<RepeatMetrics>) -> Result<Self> {
        let p: Vec<f64> = repeats.iter().map(|r| r.plcc).collect();
        let s: Vec<f64> = repeats.iter().map(|r| r.srcc).collect();
        let (Some(plcc_summary), Some(srcc_summary)) = (Summary::of(&p), Summary::of(&s)) else {
            return Err(Error::Config("metric report needs at least one repeat".into()));
        };
        Ok(Self {
            plcc: plcc_summary.mean,
            srcc: srcc_summary.mean,
            n: repeats.iter().map(|r| r.n).sum(),
            repeats,
            plcc_summary,
            srcc_summary,
            aggregation: AGGREGATION.to_string(),
        })
    }

    /// Single evaluation as a one-repeat report.
    pub fn single(preds: &[f64], labels: &[f64]) -> Result<Self> {
        Self::from_repeats(vec![RepeatMetrics {
            repeat: 0,
            plcc: plcc(preds, labels)?,
            srcc: srcc(preds, labels)?,
            n: preds.len(),
        }])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plcc_examples() {
        let p = [0.3, 1.7, -2.0, 4.4];
        let l: Vec<f64> = p.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((plcc(&p, &l).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = p.iter().map(|v| -v).collect();
        assert!((plcc(&neg, &p).unwrap() + 1.0).abs() < 1e-12);
        assert!(plcc(&[1.0, 1.0], &[1.0, 2.0]).is_err());
        assert!(plcc(&[1.0], &[1.0]).is_err());
        assert!(plcc(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn srcc_examples() {
        assert!((srcc(&[1.0, 5.0, 9.0], &[0.1, 0.2, 7.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((srcc(&[1.0, 5.0, 9.0], &[7.0, 0.2, 0.1]).unwrap() + 1.0).abs() < 1e-12);
        assert!(srcc(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).is_err());
        assert_eq!(average_ranks(&[1.0, 2.0, 2.0, 3.0]), vec![1.0, 2.5, 2.5, 4.0]);
    }

    #[test]
    fn summary() {
        let s = Summary::of(&[3.0, 1.0, 2.0, 10.0]).unwrap();
        assert_eq!(s.mean, 4.0);
        assert_eq!(s.median, 2.5);
        assert!((s.std - (50.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!(Summary::of(&[]).is_none());
        let r = MetricReport::from_repeats(
            (0..3)
                .map(|i| RepeatMetrics {
                    repeat: i,
                    plcc: 0.5 + i as f64 * 0.1,
                    srcc: 0.9,
                    n: 10,
                })
                .collect(),
        )
        .unwrap();
        assert!((r.plcc - 0.6).abs() < 1e-12);
        assert_eq!(r.n, 30);
        assert_eq!(r.repeats.len(), 3);
    }
}
