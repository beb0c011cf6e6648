//! Repeated train/test splits. Synthetic manifests split by reference
//! content so no content appears on both sides.

use std::collections::{BTreeMap, HashSet};

use qfm_tensor::rng::stream;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Manifest;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    /// Train ids in manifest order.
    pub train: Vec<String>,
    /// Test ids in manifest order.
    pub test: Vec<String>,
    pub repeat: usize,
    pub seed: u64,
}

impl SplitPlan {
    pub fn is_disjoint(&self) -> bool {
        let train: HashSet<&String> = self.train.iter().collect();
        self.test.iter().all(|id| !train.contains(id))
    }
}

/// `repeats` independent plans with `round(fraction · groups)` groups on
/// the train side, where a group is a reference id (synthetic manifests,
/// samples without one form their own group) or a single sample.
pub fn split(manifest: &Manifest, fraction: f64, repeats: usize, seed: u64) -> Result<Vec<SplitPlan>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Split(format!("fraction {fraction} is not in (0, 1)")));
    }
    // group key per sample, groups in first-appearance order
    let keys: Vec<String> = manifest
        .samples
        .iter()
        .map(|s| match (&s.reference_id, manifest.meta.synthetic) {
            (Some(r), true) => format!("ref:{r}"),
            _ => format!("id:{}", s.id),
        })
        .collect();
    let mut order: Vec<&str> = Vec::new();
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    for k in &keys {
        if !index.contains_key(k.as_str()) {
            index.insert(k, order.len());
            order.push(k);
        }
    }
    let groups = order.len();
    let n_train = (fraction * groups as f64).round() as usize;
    if n_train == 0 || n_train == groups {
        return Err(Error::Split(format!(
            "fraction {fraction} of {groups} groups leaves one side empty"
        )));
    }
    (0..repeats)
        .map(|repeat| {
            let mut perm: Vec<usize> = (0..groups).collect();
            perm.shuffle(&mut stream(seed, &format!("split-{repeat}")));
            let mut in_train = vec![false; groups];
            for &g in &perm[..n_train] {
                in_train[g] = true;
            }
            let mut plan = SplitPlan {
                train: Vec::new(),
                test: Vec::new(),
                repeat,
                seed,
            };
            for (s, k) in manifest.samples.iter().zip(&keys) {
                if in_train[index[k.as_str()]] {
                    plan.train.push(s.id.clone());
                } else {
                    plan.test.push(s.id.clone());
                }
            }
            Ok(plan)
        })
        .collect()
}
