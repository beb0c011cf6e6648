//! Samples, manifests, synthetic data and train/test splits.

mod manifest;
pub mod ppm;
mod split;
mod synth;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use qfm_tensor::Tensor;

use crate::error::{Error, Result};

pub use manifest::{load_manifest, parse_manifest, write_manifest};
pub use split::{split, SplitPlan};
pub use synth::{distort, generate_synthetic, mos_proxy, render_content, Distortion, MosWeights, SynthConfig};

/// Where a sample's pixels live.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageSource {
    Memory(Arc<Tensor>),
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: ImageSource,
    pub score: Option<f32>,
    pub reference_id: Option<String>,
}

impl Sample {
    /// Pixels as `C×H×W` in `[0, 1]`.
    pub fn load_image(&self) -> Result<Tensor> {
        match &self.image {
            ImageSource::Memory(t) => Ok((**t).clone()),
            ImageSource::File(p) => read_image(p),
        }
    }
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ppm::decode(&bytes).map_err(|msg| Error::Image {
        path: path.display().to_string(),
        msg,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestMeta {
    pub name: String,
    /// Score range; every score in the manifest lies inside it.
    pub label_range: Option<(f32, f32)>,
    pub synthetic: bool,
    pub labeled: bool,
    /// Any other `#key=value` lines, kept verbatim.
    pub extra: BTreeMap<String, String>,
}

impl ManifestMeta {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            label_range: None,
            synthetic: false,
            labeled: true,
            extra: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub meta: ManifestMeta,
    pub samples: Vec<Sample>,
}

impl Manifest {
    /// Builds a manifest and checks its invariants: unique ids, scores on
    /// every sample of a labeled manifest, scores finite and inside the
    /// label range. A missing range is derived from the scores.
    pub fn new(mut meta: ManifestMeta, samples: Vec<Sample>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for s in &samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Config(format!("duplicate sample id {:?}", s.id)));
            }
            match s.score {
                Some(y) if !y.is_finite() => {
                    return Err(Error::Config(format!("sample {:?} has a non-finite score", s.id)))
                }
                Some(y) => {
                    lo = lo.min(y);
                    hi = hi.max(y);
                }
                None if meta.labeled => {
                    return Err(Error::Config(format!(
                        "sample {:?} has no score in labeled manifest {:?}",
                        s.id, meta.name
                    )))
                }
                None => {}
            }
        }
        match meta.label_range {
            Some((a, b)) if !(a.is_finite() && b.is_finite() && a < b) => {
                return Err(Error::Config(format!("invalid label range [{a}, {b}]")))
            }
            Some((a, b)) if lo < a || hi > b => {
                return Err(Error::Config(format!(
                    "scores span [{lo}, {hi}] outside label range [{a}, {b}]"
                )))
            }
            Some(_) => {}
            None if lo < hi => meta.label_range = Some((lo, hi)),
            None => {}
        }
        Ok(Self { meta, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// Samples with the given ids, in the given order.
    pub fn select(&self, ids: &[String]) -> Result<Vec<Sample>> {
        let index: std::collections::HashMap<&str, &Sample> =
            self.samples.iter().map(|s| (s.id.as_str(), s)).collect();
        ids.iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .map(|s| (*s).clone())
                    .ok_or_else(|| Error::Config(format!("unknown sample id {id:?}")))
            })
            .collect()
    }

    /// Loads every file-backed image into memory.
    pub fn materialize(&self) -> Result<Manifest> {
        let samples = self
            .samples
            .iter()
            .map(|s| {
                let image = match &s.image {
                    ImageSource::Memory(t) => ImageSource::Memory(t.clone()),
                    ImageSource::File(_) => ImageSource::Memory(Arc::new(s.load_image()?)),
                };
                Ok(Sample { image, ..s.clone() })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Manifest {
            meta: self.meta.clone(),
            samples,
        })
    }
}
