//! AdamW with decoupled weight decay.

use thiserror::Error;

use crate::params::ParamSet;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient in parameter {name} at index {index}")]
    NonFiniteGradient { name: String, index: usize },
    #[error("learning rate must be positive and finite, got {0}")]
    InvalidLearningRate(f32),
    #[error("optimizer state has {state} slots but there are {params} parameters")]
    StateMismatch { state: usize, params: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamWState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros = |p: &ParamSet| p.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }
}

/// One AdamW update using each parameter's accumulated gradient buffer.
/// Parameters without a gradient are treated as having a zero gradient.
///
/// The gradient check runs over every parameter before anything is written,
/// so a failed step leaves parameters and state untouched.
pub fn adamw_step(
    params: &mut ParamSet,
    state: &mut AdamWState,
    lr: f32,
    cfg: &AdamWConfig,
) -> Result<(), OptimError> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(OptimError::InvalidLearningRate(lr));
    }
    if state.m.len() != params.len() {
        return Err(OptimError::StateMismatch {
            state: state.m.len(),
            params: params.len(),
        });
    }
    for (name, t) in params.iter() {
        if let Some(g) = t.grad() {
            if let Some(index) = g.iter().position(|v| !v.is_finite()) {
                return Err(OptimError::NonFiniteGradient {
                    name: name.to_string(),
                    index,
                });
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - lr * cfg.weight_decay;
    for ((p, m), v) in params
        .tensors_mut()
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        let grad = p.grad().map(<[f32]>::to_vec);
        let data = p.data_mut();
        for i in 0..data.len() {
            let g = grad.as_ref().map_or(0.0, |g| g[i]);
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] = data[i] * decay - lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn single(p: f32, g: Option<f32>) -> ParamSet {
        let mut ps = ParamSet::new();
        let id = ps.insert("p", Tensor::scalar(p)).unwrap();
        if let Some(g) = g {
            ps.get_mut(id).accumulate_grad(&[g]).unwrap();
        }
        ps
    }

    /// Textbook scalar AdamW, written out independently of the vector code.
    fn reference(p: f64, g: f64, lr: f64, wd: f64, steps: u32) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        let (mut p, mut m, mut v) = (p, 0.0, 0.0);
        for t in 1..=steps {
            p -= lr * wd * p;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            p -= lr * mh / (vh.sqrt() + eps);
        }
        p
    }

    #[test]
    fn zero_gradient_zero_decay_is_identity() {
        let mut ps = single(1.5, Some(0.0));
        let mut st = AdamWState::new(&ps);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut ps, &mut st, 0.1, &cfg).unwrap();
        assert_eq!(ps.by_name("p").unwrap().data(), &[1.5]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut ps = single(1.0, Some(1.0));
        let mut st = AdamWState::new(&ps);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut ps, &mut st, 0.1, &cfg).unwrap();
        let p = ps.by_name("p").unwrap().data()[0] as f64;
        assert!((p - reference(1.0, 1.0, 0.1, 0.0, 1)).abs() < 1e-6);
        assert!((p - 0.9).abs() < 1e-6);
    }

    #[test]
    fn decoupled_decay_without_gradient() {
        let mut ps = single(2.0, None);
        let mut st = AdamWState::new(&ps);
        let cfg = AdamWConfig {
            weight_decay: 0.01,
            ..Default::default()
        };
        adamw_step(&mut ps, &mut st, 0.1, &cfg).unwrap();
        let p = ps.by_name("p").unwrap().data()[0];
        assert!((p - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-7);
    }

    #[test]
    fn matches_reference_over_several_steps() {
        let mut ps = single(0.7, None);
        let mut st = AdamWState::new(&ps);
        let cfg = AdamWConfig {
            weight_decay: 0.05,
            ..Default::default()
        };
        for _ in 0..5 {
            ps.zero_grad();
            ps.by_name_mut("p").unwrap().accumulate_grad(&[0.3]).unwrap();
            adamw_step(&mut ps, &mut st, 0.01, &cfg).unwrap();
        }
        let p = ps.by_name("p").unwrap().data()[0] as f64;
        assert!((p - reference(0.7, 0.3, 0.01, 0.05, 5)).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut ps = ParamSet::new();
        ps.insert("encoder/w", Tensor::zeros(&[2])).unwrap();
        let bad = ps.by_name_mut("encoder/w").unwrap();
        bad.accumulate_grad(&[0.0, f32::NAN]).unwrap();
        let mut st = AdamWState::new(&ps);
        let err = adamw_step(&mut ps, &mut st, 0.1, &AdamWConfig::default()).unwrap_err();
        assert_eq!(
            err,
            OptimError::NonFiniteGradient {
                name: "encoder/w".into(),
                index: 1
            }
        );
        assert_eq!(st.step, 0);
    }

    #[test]
    fn rejects_bad_learning_rate() {
        let mut ps = single(1.0, Some(1.0));
        let mut st = AdamWState::new(&ps);
        assert!(adamw_step(&mut ps, &mut st, 0.0, &AdamWConfig::default()).is_err());
    }
}
