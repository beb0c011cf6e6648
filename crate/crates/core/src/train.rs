//! Training loop.
//!
//! Each step runs in two phases. Phase 1 encodes every sample of the
//! labeled batch A and the pseudo-labeled batch B on its own tape and fills
//! the two temporary memories. Phase 2 matches each sample against both
//! memories, mixes the matched features into its own, decodes, and
//! backpropagates through its tape. Per-sample gradients are summed in
//! batch order so the result does not depend on the thread count.

use std::time::Instant;

use qfm_tensor::rng::{derive_seed, stream};
use qfm_tensor::{adamw_step, AdamWConfig, AdamWState, Tape, Tensor, Var};
use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::{split, Manifest, SplitPlan};
use crate::dle::{check_disjoint, pseudo_label, Teacher};
use crate::error::{Error, Result};
use crate::metrics::{plcc, srcc, to_f64, MetricReport, RepeatMetrics};
use crate::model::{Bound, FeatureMap, LabelScale, Model};
use crate::qcc::{mix_labels, qcc_loss, LabelMixWeights, MixWeights};
use crate::snm::{MatchResult, MatchSpace, Pool, TemporaryMemory};

/// Data for a run. Without `test`, `labeled` is split according to the
/// data config; with it, `labeled` is used whole for training.
#[derive(Debug, Clone)]
pub struct TrainInputs {
    pub labeled: Manifest,
    pub test: Option<Manifest>,
    pub pool: Option<Manifest>,
    pub teacher: Option<Teacher>,
}

impl TrainInputs {
    pub fn split(labeled: Manifest) -> Self {
        Self {
            labeled,
            test: None,
            pool: None,
            teacher: None,
        }
    }

    pub fn fixed(train: Manifest, test: Manifest) -> Self {
        Self {
            labeled: train,
            test: Some(test),
            pool: None,
            teacher: None,
        }
    }

    pub fn with_pool(mut self, pool: Manifest, teacher: Teacher) -> Self {
        self.pool = Some(pool);
        self.teacher = Some(teacher);
        self
    }
}

/// Matches selected for one sample during a step (memory indices).
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct SampleMatches {
    pub from_a: Vec<usize>,
    pub from_b: Vec<usize>,
}

/// State visible to an observer after the losses of a step are computed
/// and before the parameters are updated.
#[derive(Debug)]
pub struct StepEvent<'a> {
    pub repeat: usize,
    pub epoch: usize,
    pub step: usize,
    pub ids_a: &'a [String],
    pub ids_b: &'a [String],
    pub memory_a: &'a TemporaryMemory,
    pub memory_b: &'a TemporaryMemory,
    /// A samples first, then B samples.
    pub matches: &'a [SampleMatches],
    /// Parameters the memories were computed with.
    pub model: &'a Model,
    pub teacher: Option<&'a Teacher>,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f32,
    /// Mean per-sample training loss.
    pub train_loss: f64,
    pub plcc: Option<f64>,
    pub srcc: Option<f64>,
    pub seconds: f64,
}

pub trait TrainObserver {
    fn on_step(&mut self, _event: &StepEvent<'_>) -> Result<()> {
        Ok(())
    }

    fn on_epoch(&mut self, _repeat: usize, _log: &EpochLog) {}
}

impl TrainObserver for () {}

#[derive(Debug, Clone, Serialize)]
pub struct RepeatResult {
    pub repeat: usize,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub epochs: Vec<EpochLog>,
    pub metrics: RepeatMetrics,
    /// Final test predictions in label units.
    pub predictions: Vec<f32>,
    pub labels: Vec<f32>,
    pub teacher_digest: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub report: MetricReport,
    pub repeats: Vec<RepeatResult>,
    /// Model of the last repeat.
    pub model: Model,
}

struct Item<'a> {
    id: &'a str,
    image: &'a Tensor,
    /// Normalized target.
    target: f32,
}

struct Encoded<'p> {
    tape: Tape<'p>,
    bound: Bound,
    feature: Var,
}

struct StepOutput {
    grads: Vec<Vec<f32>>,
    loss: f64,
    memory_a: TemporaryMemory,
    memory_b: TemporaryMemory,
    matches: Vec<SampleMatches>,
}

fn at_step(epoch: usize, step: usize, sample: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| Error::Step {
        epoch,
        step,
        sample: sample.to_string(),
        source: Box::new(e),
    }
}

/// Top-k query that yields nothing when the memory has no candidates.
fn matches_or_empty(r: Result<MatchResult>) -> Result<Vec<usize>> {
    match r {
        Ok(m) => Ok(m.indices),
        Err(Error::EmptyMemory) => Ok(Vec::new()),
        Err(e) => Err(e),
    }
}

struct StepParams {
    qfm_enabled: bool,
    k_a: usize,
    k_b: usize,
    space: crate::snm::MatchConfig,
    weights: MixWeights,
    label_mix: Option<LabelMixWeights>,
    clean_loss: bool,
}

fn run_step(
    model: &Model,
    a: &[Item<'_>],
    b: &[Item<'_>],
    p: &StepParams,
    epoch: usize,
    step: usize,
) -> Result<StepOutput> {
    let items: Vec<&Item<'_>> = a.iter().chain(b).collect();
    let n = items.len();
    let inv_n = 1.0 / n as f32;

    // phase 1: encode
    let encoded = items
        .par_iter()
        .map(|it| {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let x = tape.constant_ref(it.image);
            let feature = model
                .encode(&mut tape, &bound, x)
                .map_err(at_step(epoch, step, it.id))?;
            Ok(Encoded { tape, bound, feature })
        })
        .collect::<Result<Vec<_>>>()?;
    let maps = encoded
        .iter()
        .map(|e| FeatureMap::new(e.tape.to_tensor(e.feature)))
        .collect::<Result<Vec<_>>>()?;
    let mut memory_a = TemporaryMemory::new(Pool::A);
    let mut memory_b = TemporaryMemory::new(Pool::B);
    let targets: Vec<f32> = items.iter().map(|it| it.target).collect();
    memory_a.ingest(&maps[..a.len()], &targets[..a.len()])?;
    memory_b.ingest(&maps[a.len()..], &targets[a.len()..])?;
    let space_a = MatchSpace::new(&memory_a, p.space);
    let space_b = MatchSpace::new(&memory_b, p.space);

    // phase 2: match, mix, decode, backprop
    let per_sample = encoded
        .into_par_iter()
        .enumerate()
        .map(|(i, enc)| {
            let it = items[i];
            let Encoded {
                mut tape,
                bound,
                feature,
            } = enc;
            let flat = maps[i].tokens().data();
            let mut m = SampleMatches::default();
            if p.qfm_enabled {
                let in_a = i < a.len();
                m.from_a = matches_or_empty(if in_a {
                    space_a.query_entry(i, p.k_a)
                } else {
                    space_a.query(flat, it.target, p.k_a)
                })?;
                m.from_b = matches_or_empty(if in_a {
                    space_b.query(flat, it.target, p.k_b)
                } else {
                    space_b.query_entry(i - a.len(), p.k_b)
                })?;
            }
            let (target, fa, fb): (f32, Vec<&[f32]>, Vec<&[f32]>) = match p.label_mix {
                Some(lw) if p.qfm_enabled => {
                    let ya = m.from_a.first().map_or(it.target, |&j| memory_a.entries()[j].score);
                    let yb = m.from_b.first().map_or(it.target, |&j| memory_b.entries()[j].score);
                    (mix_labels(it.target, ya, yb, lw), Vec::new(), Vec::new())
                }
                _ => (
                    it.target,
                    m.from_a.iter().map(|&j| memory_a.entries()[j].feature.data()).collect(),
                    m.from_b.iter().map(|&j| memory_b.entries()[j].feature.data()).collect(),
                ),
            };
            let loss = qcc_loss(
                model,
                &mut tape,
                &bound,
                feature,
                &fa,
                &fb,
                &p.weights,
                target,
                p.clean_loss,
            )?;
            let value = tape.value(loss)[0] as f64;
            let scaled = tape.scale(loss, inv_n)?;
            let mut g = tape.backward(scaled)?;
            let grads: Vec<Option<Vec<f32>>> = bound.vars().iter().map(|&v| g.take(v)).collect();
            Ok((grads, value, m))
        })
        .enumerate()
        .map(|(i, r): (usize, Result<_>)| r.map_err(at_step(epoch, step, items[i].id)))
        .collect::<Result<Vec<_>>>()?;

    let mut sums: Vec<Vec<f32>> = model.params().iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
    let mut loss = 0.0;
    let mut matches = Vec::with_capacity(n);
    for (grads, value, m) in per_sample {
        for (sum, g) in sums.iter_mut().zip(grads) {
            if let Some(g) = g {
                sum.iter_mut().zip(&g).for_each(|(s, v)| *s += v);
            }
        }
        loss += value;
        matches.push(m);
    }
    Ok(StepOutput {
        grads: sums,
        loss: loss / n as f64,
        memory_a,
        memory_b,
        matches,
    })
}

fn label_scale(m: &Manifest) -> Result<LabelScale> {
    let (lo, hi) = m.meta.label_range.ok_or_else(|| {
        Error::Config(format!("manifest {:?} has no label range", m.meta.name))
    })?;
    LabelScale::new(lo, hi)
}

fn load_images(samples: &[crate::data::Sample]) -> Result<Vec<Tensor>> {
    samples.par_iter().map(|s| s.load_image()).collect()
}

fn scores(samples: &[crate::data::Sample]) -> Result<Vec<f32>> {
    samples
        .iter()
        .map(|s| {
            s.score
                .ok_or_else(|| Error::Config(format!("sample {:?} has no score", s.id)))
        })
        .collect()
}

/// Test-set correlations in label units.
fn test_metrics(model: &Model, images: &[Tensor], labels: &[f32]) -> Result<(Vec<f32>, f64, f64)> {
    let preds = images
        .par_iter()
        .map(|img| model.predict(img))
        .collect::<Result<Vec<f32>>>()?;
    let (p, l) = (to_f64(&preds), to_f64(labels));
    Ok((preds.clone(), plcc(&p, &l)?, srcc(&p, &l)?))
}

/// Trains one model per repeat and reports test correlations.
pub fn run_training(
    cfg: &TrainConfig,
    inputs: TrainInputs,
    observer: &mut dyn TrainObserver,
) -> Result<RunResult> {
    cfg.validate()?;
    let plans: Vec<SplitPlan> = match &inputs.test {
        Some(test) => vec![SplitPlan {
            train: inputs.labeled.samples.iter().map(|s| s.id.clone()).collect(),
            test: test.samples.iter().map(|s| s.id.clone()).collect(),
            repeat: 0,
            seed: cfg.seed,
        }],
        None => split(&inputs.labeled, cfg.data.split_fraction, cfg.data.repeats, cfg.seed)?,
    };
    let dle = if cfg.dle.enabled {
        match (&inputs.pool, &inputs.teacher) {
            (Some(p), Some(t)) => Some((p, t)),
            _ => {
                return Err(Error::Config(
                    "pool-based training needs an unlabeled pool and a teacher".into(),
                ))
            }
        }
    } else {
        None
    };
    let scale = label_scale(&inputs.labeled)?;
    let pool_images = match dle {
        Some((pool, _)) => load_images(&pool.samples)?,
        None => Vec::new(),
    };
    let pool_ids: Vec<String> = dle
        .map(|(p, _)| p.samples.iter().map(|s| s.id.clone()).collect())
        .unwrap_or_default();
    let cached_pseudo = match dle {
        Some((_, teacher)) if cfg.dle.cache => Some(pseudo_label(teacher, &pool_ids, &pool_images)?),
        _ => None,
    };

    let q = &cfg.qfm;
    let params = StepParams {
        qfm_enabled: q.enabled,
        k_a: q.k_a,
        k_b: q.k_b,
        space: q.match_config(),
        weights: if q.enabled {
            q.mix_weights()?
        } else {
            MixWeights::new(0.0, 0.0, 1)?
        },
        label_mix: if q.label_mix { Some(q.label_weights()?) } else { None },
        clean_loss: q.clean_loss,
    };
    let adam = AdamWConfig {
        beta1: cfg.optim.beta1,
        beta2: cfg.optim.beta2,
        eps: cfg.optim.eps,
        weight_decay: cfg.optim.weight_decay,
    };

    let mut results = Vec::with_capacity(plans.len());
    let mut last_model = None;
    for plan in &plans {
        let r = plan.repeat;
        let seed_r = derive_seed(cfg.seed, &format!("repeat-{r}"));
        let train_samples = inputs.labeled.select(&plan.train)?;
        let test_samples = match &inputs.test {
            Some(t) => t.samples.clone(),
            None => inputs.labeled.select(&plan.test)?,
        };
        if let Some((pool, _)) = dle {
            check_disjoint(pool, &plan.test)?;
        }
        let train_images = load_images(&train_samples)?;
        let train_targets: Vec<f32> = scores(&train_samples)?
            .iter()
            .map(|&y| scale.normalize(y))
            .collect();
        let test_images = load_images(&test_samples)?;
        let test_labels = scores(&test_samples)?;

        let mut model = Model::init(cfg.model.clone(), scale, seed_r)?;
        let mut state = AdamWState::new(model.params());
        let mut epochs = Vec::with_capacity(cfg.optim.epochs);
        let bs = cfg.optim.batch_size;
        let bs_b = cfg.dle.batch_size.unwrap_or(bs);
        let mut step = 0;
        for epoch in 0..cfg.optim.epochs {
            let started = Instant::now();
            let lr = cfg.optim.lr_at(epoch);
            let mut order: Vec<usize> = (0..train_samples.len()).collect();
            order.shuffle(&mut stream(seed_r, &format!("shuffle-{epoch}")));
            let mut loss_sum = 0.0;
            let mut loss_n = 0usize;
            for chunk in order.chunks(bs) {
                let items_a: Vec<Item<'_>> = chunk
                    .iter()
                    .map(|&i| Item {
                        id: &train_samples[i].id,
                        image: &train_images[i],
                        target: train_targets[i],
                    })
                    .collect();
                let ids_a: Vec<String> = chunk.iter().map(|&i| train_samples[i].id.clone()).collect();
                let (items_b, ids_b) = match dle {
                    Some((_, teacher)) => {
                        let mut rng = stream(seed_r, &format!("pool-{epoch}-{step}"));
                        let picked = index::sample(&mut rng, pool_images.len(), bs_b.min(pool_images.len())).into_vec();
                        let ids: Vec<String> = picked.iter().map(|&j| pool_ids[j].clone()).collect();
                        let pseudo = match &cached_pseudo {
                            Some(all) => picked.iter().map(|&j| all.pseudo_scores[j]).collect(),
                            None => {
                                let imgs: Vec<Tensor> = picked.iter().map(|&j| pool_images[j].clone()).collect();
                                pseudo_label(teacher, &ids, &imgs)?.pseudo_scores
                            }
                        };
                        let items = picked
                            .iter()
                            .zip(&pseudo)
                            .map(|(&j, &y)| Item {
                                id: &pool_ids[j],
                                image: &pool_images[j],
                                target: scale.normalize(y),
                            })
                            .collect::<Vec<_>>();
                        (items, ids)
                    }
                    None => (Vec::new(), Vec::new()),
                };
                let out = run_step(&model, &items_a, &items_b, &params, epoch, step)?;
                observer.on_step(&StepEvent {
                    repeat: r,
                    epoch,
                    step,
                    ids_a: &ids_a,
                    ids_b: &ids_b,
                    memory_a: &out.memory_a,
                    memory_b: &out.memory_b,
                    matches: &out.matches,
                    model: &model,
                    teacher: dle.map(|(_, t)| t),
                    loss: out.loss,
                })?;
                loss_sum += out.loss * (items_a.len() + items_b.len()) as f64;
                loss_n += items_a.len() + items_b.len();
                let ps = model.params_mut();
                for (t, g) in ps.tensors_mut().zip(&out.grads) {
                    t.accumulate_grad(g)?;
                }
                adamw_step(ps, &mut state, cfg.optim.lr_at_step(epoch, step), &adam)?;
                ps.zero_grad();
                step += 1;
            }
            let last = epoch + 1 == cfg.optim.epochs;
            let (plcc_e, srcc_e) = if cfg.data.eval_every_epoch || last {
                let (_, p, s) = test_metrics(&model, &test_images, &test_labels)?;
                (Some(p), Some(s))
            } else {
                (None, None)
            };
            let log = EpochLog {
                epoch,
                lr,
                train_loss: loss_sum / loss_n.max(1) as f64,
                plcc: plcc_e,
                srcc: srcc_e,
                seconds: started.elapsed().as_secs_f64(),
            };
            log::info!(
                "repeat {r} epoch {epoch}: loss {:.5} plcc {:?} srcc {:?} ({:.1}s)",
                log.train_loss,
                log.plcc,
                log.srcc,
                log.seconds
            );
            observer.on_epoch(r, &log);
            epochs.push(log);
        }
        let (predictions, p, s) = test_metrics(&model, &test_images, &test_labels)?;
        results.push(RepeatResult {
            repeat: r,
            train_ids: plan.train.clone(),
            test_ids: plan.test.clone(),
            epochs,
            metrics: RepeatMetrics {
                repeat: r,
                plcc: p,
                srcc: s,
                n: predictions.len(),
            },
            predictions,
            labels: test_labels,
            teacher_digest: dle.map(|(_, t)| t.digest().to_string()),
        });
        last_model = Some(model);
    }
    let report = MetricReport::from_repeats(results.iter().map(|r| r.metrics.clone()).collect())?;
    Ok(RunResult {
        report,
        repeats: results,
        model: last_model.expect("at least one repeat"),
    })
}
