//! Feature mixing with matched noise samples and the consistency loss.
//!
//! The perturbed map is
//! `(1 − λ1 − λ2)·F + (λ1/|A|)·ΣÂ + (λ2/|B|)·ΣB̂`, where `Â`/`B̂` are the
//! matched maps from memories A and B. The decoded score of the perturbed
//! map is supervised with the original sample's label.

use qfm_tensor::{Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Bound, FeatureMap, Model};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub k: usize,
}

impl MixWeights {
    pub fn new(lambda1: f64, lambda2: f64, k: usize) -> Result<Self> {
        let w = Self {
            lambda1,
            lambda2,
            k,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |l: f64| l.is_finite() && (0.0..1.0).contains(&l);
        if !ok(self.lambda1) || !ok(self.lambda2) || self.lambda1 + self.lambda2 >= 1.0 {
            return Err(Error::Config(format!(
                "mix weights need 0 <= lambda < 1 and lambda1 + lambda2 < 1, got {} and {}",
                self.lambda1, self.lambda2
            )));
        }
        if self.k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.lambda1 == 0.0 && self.lambda2 == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelMixWeights {
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for LabelMixWeights {
    fn default() -> Self {
        Self {
            beta1: 0.1,
            beta2: 0.1,
        }
    }
}

impl LabelMixWeights {
    pub fn new(beta1: f64, beta2: f64) -> Result<Self> {
        let ok = |b: f64| b.is_finite() && (0.0..1.0).contains(&b);
        if !ok(beta1) || !ok(beta2) || beta1 + beta2 >= 1.0 {
            return Err(Error::Config(format!(
                "label mix weights need 0 <= beta < 1 and beta1 + beta2 < 1, got {beta1} and {beta2}"
            )));
        }
        Ok(Self { beta1, beta2 })
    }
}

/// `(1 − β1 − β2)·y + β1·y1 + β2·y2`.
pub fn mix_labels(y: f32, y1: f32, y2: f32, b: LabelMixWeights) -> f32 {
    ((1.0 - b.beta1 - b.beta2) * y as f64 + b.beta1 * y1 as f64 + b.beta2 * y2 as f64) as f32
}

/// Coefficient on `F` and the constant offset contributed by the matches,
/// or `None` when the mix is the identity. A missing list hands its weight
/// back to `F`.
fn mix_terms(len: usize, a: &[&[f32]], b: &[&[f32]], w: &MixWeights) -> Result<Option<(f64, Vec<f64>)>> {
    w.validate()?;
    for (name, list) in [("A", a), ("B", b)] {
        if list.len() > w.k {
            return Err(Error::LengthMismatch(format!(
                "{} matches from memory {name} exceed K = {}",
                list.len(),
                w.k
            )));
        }
        if let Some(m) = list.iter().find(|m| m.len() != len) {
            return Err(Error::LengthMismatch(format!(
                "matched feature of length {} against map of length {len}",
                m.len()
            )));
        }
    }
    let l1 = if a.is_empty() { 0.0 } else { w.lambda1 };
    let l2 = if b.is_empty() { 0.0 } else { w.lambda2 };
    if l1 == 0.0 && l2 == 0.0 {
        return Ok(None);
    }
    let mut offset = vec![0.0f64; len];
    for (lambda, list) in [(l1, a), (l2, b)] {
        if lambda == 0.0 {
            continue;
        }
        let per = lambda / list.len() as f64;
        for m in list {
            for (o, &v) in offset.iter_mut().zip(m.iter()) {
                *o += per * v as f64;
            }
        }
    }
    Ok(Some((1.0 - l1 - l2, offset)))
}

/// Mixes matched maps into `f`. Arithmetic is carried out in f64 and
/// rounded once, identically to [`mix_on_tape`].
pub fn mix_features(f: &FeatureMap, a: &[FeatureMap], b: &[FeatureMap], w: &MixWeights) -> Result<FeatureMap> {
    for m in a.iter().chain(b) {
        if (m.rows(), m.dim()) != (f.rows(), f.dim()) {
            return Err(Error::LengthMismatch(format!(
                "matched map {}x{} against {}x{}",
                m.rows(),
                m.dim(),
                f.rows(),
                f.dim()
            )));
        }
    }
    let fa: Vec<&[f32]> = a.iter().map(|m| m.tokens().data()).collect();
    let fb: Vec<&[f32]> = b.iter().map(|m| m.tokens().data()).collect();
    let x = f.tokens().data();
    match mix_terms(x.len(), &fa, &fb, w)? {
        None => Ok(f.clone()),
        Some((c, offset)) => {
            let data: Vec<f32> = x
                .iter()
                .zip(&offset)
                .map(|(&v, &o)| (c * v as f64 + o) as f32)
                .collect();
            FeatureMap::unflatten(&data, f.rows(), f.dim())
        }
    }
}

/// Tape version of [`mix_features`]: matches enter as constants, so the
/// gradient reaches only `f`. With nothing to mix, `f` itself is returned.
pub fn mix_on_tape(tape: &mut Tape<'_>, f: Var, a: &[&[f32]], b: &[&[f32]], w: &MixWeights) -> Result<Var> {
    let len = tape.value(f).len();
    match mix_terms(len, a, b, w)? {
        None => Ok(f),
        Some((c, offset)) => Ok(tape.affine(f, c, &offset)?),
    }
}

/// Squared error of a single-element prediction.
pub fn mse(tape: &mut Tape<'_>, pred: Var, target: f32) -> Result<Var> {
    let t = tape.constant(qfm_tensor::Tensor::scalar(target));
    let d = tape.sub(pred, t)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq)?)
}

/// Loss of one sample: decode the perturbed map, compare with `target`.
#[allow(clippy::too_many_arguments)]
pub fn qcc_loss(
    model: &Model,
    tape: &mut Tape<'_>,
    bound: &Bound,
    f: Var,
    a: &[&[f32]],
    b: &[&[f32]],
    w: &MixWeights,
    target: f32,
    clean_loss: bool,
) -> Result<Var> {
    let mixed = mix_on_tape(tape, f, a, b, w)?;
    let pred = model.decode(tape, bound, mixed)?;
    let loss = mse(tape, pred, target)?;
    if clean_loss && mixed != f {
        let clean = model.decode(tape, bound, f)?;
        let l2 = mse(tape, clean, target)?;
        return Ok(tape.add(loss, l2)?);
    }
    Ok(loss)
}
