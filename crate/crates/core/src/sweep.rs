//! Hyperparameter sweeps: one training run per setting, one report row
//! per run.

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::Result;
use crate::report::SweepRow;
use crate::train::{run_training, TrainInputs};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPlan {
    /// Values of K, applied to both memories.
    pub ks: Vec<usize>,
    /// Values tried for λ1 and, separately, for λ2 (at K = 1).
    pub lambdas: Vec<f64>,
}

impl Default for SweepPlan {
    fn default() -> Self {
        Self {
            ks: vec![1, 2, 3, 4, 6, 8],
            lambdas: (1..=8).map(|e| 10f64.powi(-e)).collect(),
        }
    }
}

/// `(parameter, value, config)` for every setting of the plan, K first.
pub fn sweep_settings(base: &TrainConfig, plan: &SweepPlan) -> Vec<(String, f64, TrainConfig)> {
    let mut out = Vec::new();
    for &k in &plan.ks {
        let mut c = base.clone();
        c.qfm.enabled = true;
        c.qfm.k_a = k;
        c.qfm.k_b = k;
        out.push(("k".to_string(), k as f64, c));
    }
    for (name, which) in [("lambda1", 1), ("lambda2", 2)] {
        for &l in &plan.lambdas {
            let mut c = base.clone();
            c.qfm.enabled = true;
            c.qfm.k_a = 1;
            c.qfm.k_b = 1;
            if which == 1 {
                c.qfm.lambda1 = l;
            } else {
                c.qfm.lambda2 = l;
            }
            out.push((name.to_string(), l, c));
        }
    }
    out
}

/// Runs every setting on the same inputs. `progress` sees each row as it
/// completes.
pub fn run_sweep(
    base: &TrainConfig,
    inputs: &TrainInputs,
    plan: &SweepPlan,
    progress: &mut dyn FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for (parameter, value, cfg) in sweep_settings(base, plan) {
        let run = run_training(&cfg, inputs.clone(), &mut ())?;
        let row = SweepRow {
            parameter,
            value,
            plcc: run.report.plcc,
            srcc: run.report.srcc,
            repeats: run.report.repeats.len(),
        };
        progress(&row);
        rows.push(row);
    }
    Ok(rows)
}
