//! Prediction over sample lists and cross-dataset evaluation.

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{Manifest, Sample};
use crate::error::{Error, Result};
use crate::metrics::{to_f64, MetricReport};
use crate::model::Model;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub dataset: String,
    pub ids: Vec<String>,
    /// Predictions in label units.
    pub predictions: Vec<f32>,
    pub labels: Vec<f32>,
    pub report: MetricReport,
}

/// Predictions in label units, in sample order.
pub fn predict_all(model: &Model, samples: &[Sample]) -> Result<Vec<f32>> {
    samples
        .par_iter()
        .map(|s| model.predict(&s.load_image()?))
        .collect()
}

/// Scores `samples` (all must be labeled) and computes PLCC/SRCC.
pub fn evaluate(model: &Model, dataset: &str, samples: &[Sample]) -> Result<Evaluation> {
    let labels = samples
        .iter()
        .map(|s| {
            s.score
                .ok_or_else(|| Error::Config(format!("sample {:?} has no score", s.id)))
        })
        .collect::<Result<Vec<f32>>>()?;
    let predictions = predict_all(model, samples)?;
    let report = MetricReport::single(&to_f64(&predictions), &to_f64(&labels))?;
    Ok(Evaluation {
        dataset: dataset.to_string(),
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        predictions,
        labels,
        report,
    })
}

/// Evaluates on every manifest in `tests`. A test manifest with the same
/// name as the training one is refused unless `allow_same`.
pub fn cross_dataset_eval(
    model: &Model,
    train_name: &str,
    tests: &[Manifest],
    allow_same: bool,
) -> Result<Vec<Evaluation>> {
    if !allow_same {
        if let Some(m) = tests.iter().find(|m| m.meta.name == train_name) {
            return Err(Error::SameManifest(m.meta.name.clone()));
        }
    }
    tests
        .iter()
        .map(|m| evaluate(model, &m.meta.name, &m.samples))
        .collect()
}
