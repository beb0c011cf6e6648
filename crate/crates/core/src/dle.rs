//! Frozen teacher, pseudo-labels for the unlabeled pool and the dual
//! temporary memories.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use qfm_tensor::{ParamSet, Tensor};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::config::{QfmConfig, TrainConfig};
use crate::data::{Manifest, SynthConfig};
use crate::error::{Error, Result};
use crate::model::{FeatureMap, Model};
use crate::snm::{Pool, TemporaryMemory};
use crate::train::{run_training, RunResult, TrainInputs};

/// SHA-256 (hex) of the parameter payload: names, shapes and values.
pub fn param_digest(params: &ParamSet) -> String {
    let bytes = qfm_tensor::checkpoint::encode(params, &BTreeMap::new())
        .expect("parameter names are valid tokens");
    hex::encode(Sha256::digest(&bytes))
}

/// A frozen model. Parameters are only reachable through `&`.
#[derive(Debug, Clone)]
pub struct Teacher {
    model: Model,
    digest: String,
}

impl Teacher {
    pub fn new(model: Model) -> Self {
        let digest = param_digest(model.params());
        Self { model, digest }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (model, _) = Model::load(path)?;
        Ok(Self::new(model))
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    /// Digest recorded when the teacher was frozen.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    /// Digest of the parameters as they are now.
    pub fn current_digest(&self) -> String {
        param_digest(self.model.params())
    }

    /// Teacher prediction in label units.
    pub fn score(&self, image: &Tensor) -> Result<f32> {
        self.model.predict(image)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabeledBatch {
    pub ids: Vec<String>,
    /// Teacher scores in label units, in batch order.
    pub pseudo_scores: Vec<f32>,
    pub teacher_id: String,
}

/// Scores every image with the teacher, preserving order.
pub fn pseudo_label(teacher: &Teacher, ids: &[String], images: &[Tensor]) -> Result<PseudoLabeledBatch> {
    if ids.len() != images.len() {
        return Err(Error::LengthMismatch(format!(
            "{} ids for {} images",
            ids.len(),
            images.len()
        )));
    }
    let pseudo_scores = images
        .par_iter()
        .map(|img| teacher.score(img))
        .collect::<Result<Vec<_>>>()?;
    Ok(PseudoLabeledBatch {
        ids: ids.to_vec(),
        pseudo_scores,
        teacher_id: teacher.digest().to_string(),
    })
}

/// Encodes both batches with the student and stores them with their
/// (pseudo-)scores. An empty B batch leaves memory B empty.
pub fn build_dual_memory(
    student: &Model,
    batch_a: &[(Tensor, f32)],
    images_b: &[Tensor],
    pseudo_b: &PseudoLabeledBatch,
) -> Result<(TemporaryMemory, TemporaryMemory)> {
    if images_b.len() != pseudo_b.pseudo_scores.len() {
        return Err(Error::LengthMismatch("pool images and pseudo-labels differ in length".into()));
    }
    let fa = batch_a
        .par_iter()
        .map(|(img, _)| student.encode_image(img))
        .collect::<Result<Vec<FeatureMap>>>()?;
    let fb = images_b
        .par_iter()
        .map(|img| student.encode_image(img))
        .collect::<Result<Vec<FeatureMap>>>()?;
    let ya: Vec<f32> = batch_a.iter().map(|(_, y)| *y).collect();
    let mut mem_a = TemporaryMemory::new(Pool::A);
    let mut mem_b = TemporaryMemory::new(Pool::B);
    mem_a.ingest(&fa, &ya)?;
    mem_b.ingest(&fb, &pseudo_b.pseudo_scores)?;
    Ok((mem_a, mem_b))
}

/// Errors when the pool shares a sample id with the test side.
pub fn check_disjoint(pool: &Manifest, test_ids: &[String]) -> Result<()> {
    let test: HashSet<&str> = test_ids.iter().map(String::as_str).collect();
    let shared: Vec<&str> = pool
        .samples
        .iter()
        .map(|s| s.id.as_str())
        .filter(|id| test.contains(id))
        .take(5)
        .collect();
    if shared.is_empty() {
        Ok(())
    } else {
        Err(Error::Disjointness(format!(
            "unlabeled pool {:?} contains test ids {shared:?}",
            pool.meta.name
        )))
    }
}

/// The teacher's training pool: 256 contents × 16 distortions under a
/// content seed distinct from the student's data.
pub fn teacher_pool_config(seed: u64) -> SynthConfig {
    SynthConfig {
        name: "teacher".into(),
        contents: 256,
        distortions_per_content: 16,
        seed: qfm_tensor::rng::derive_seed(seed, "teacher-pool"),
        ..SynthConfig::default()
    }
}

/// Plain supervised training (no matching, mixing or pool) on `manifest`,
/// then freezing. Returns the teacher and the run that produced it.
pub fn pretrain_teacher(manifest: &Manifest, cfg: &TrainConfig) -> Result<(Teacher, RunResult)> {
    let mut cfg = cfg.clone();
    cfg.qfm = QfmConfig::disabled();
    cfg.dle.enabled = false;
    cfg.data.repeats = 1;
    let run = run_training(&cfg, TrainInputs::split(manifest.clone()), &mut ())?;
    let model = run.model.clone();
    Ok((Teacher::new(model), run))
}
