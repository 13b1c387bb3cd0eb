//! AdamW with two learning-rate groups, warmup schedule, staged training,
//! loss traces and finite-difference gradient checks.

use std::path::Path;

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{StageConfig, TrainingSection};
use crate::error::{Error, Result};
use crate::evaluation::AnnotatedExample;
use crate::model::{JointModel, LossMode, LossValues, Schema};
use crate::params::{Gradients, ParamGroup, ParamStore};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adam moments with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    first: Vec<Array2<f64>>,
    second: Vec<Array2<f64>>,
    steps: u64,
    weight_decay: f64,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Array2<f64>> = store.iter().map(|(_, p)| Array2::zeros(p.value.dim())).collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            steps: 0,
            weight_decay,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update; `lr` maps each parameter group to its current rate.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: impl Fn(ParamGroup) -> f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let param = store.get_mut(id);
            let rate = lr(param.group);
            let g = grads.get(id);
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            ndarray::Zip::from(&mut param.value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = BETA1 * *m + (1.0 - BETA1) * g;
                    *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                    if rate != 0.0 {
                        let update = (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                        *p -= rate * (update + self.weight_decay * *p);
                    }
                });
        }
    }
}

/// Linear warmup over the first `ceil(ratio · total)` steps, then constant.
pub fn learning_rate(base: f64, step: usize, total_steps: usize, warmup_ratio: f64) -> f64 {
    let warmup = (warmup_ratio * total_steps as f64).ceil() as usize;
    if step < warmup {
        base * (step + 1) as f64 / warmup as f64
    } else {
        base
    }
}

/// One optimizer step in the loss trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub stage: usize,
    pub epoch: usize,
    pub encoder_lr: f64,
    pub head_lr: f64,
    pub entity: f64,
    pub adjacency: f64,
    pub relation: f64,
    pub total: f64,
    pub dropped_pairs: usize,
}

pub fn write_trace(path: &Path, trace: &[TraceRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in trace {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Whether to continue after an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Per-epoch hook: `(stage, epoch, model)`.
pub type EpochHook<'a> = dyn FnMut(usize, usize, &JointModel) -> Result<Control> + 'a;

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix-style scramble so nearby inputs give unrelated streams
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn training_schema(schema: &Schema, training: &TrainingSection, rng: &mut ChaCha8Rng) -> Schema {
    let mut s = schema.clone();
    if training.shuffle_labels {
        s.entity_labels.shuffle(rng);
        s.relation_labels.shuffle(rng);
    }
    if training.label_dropout > 0.0 {
        drop_labels(&mut s.entity_labels, training.label_dropout, rng);
        drop_labels(&mut s.relation_labels, training.label_dropout, rng);
    }
    s
}

fn drop_labels(labels: &mut Vec<String>, p: f64, rng: &mut ChaCha8Rng) {
    if labels.is_empty() {
        return;
    }
    let keep = rng.random_range(0..labels.len());
    let mut i = 0;
    labels.retain(|_| {
        let kept = i == keep || rng.random::<f64>() >= p;
        i += 1;
        kept
    });
}

/// Trains for `stage.epochs` epochs with a fresh optimizer.
pub fn train_stage(
    model: &mut JointModel,
    corpus: &[AnnotatedExample],
    stage: &StageConfig,
    stage_index: usize,
    seed: u64,
    hook: &mut EpochHook<'_>,
) -> Result<Vec<TraceRecord>> {
    if corpus.is_empty() {
        return Err(Error::config("training corpus is empty"));
    }
    stage.validate("stage")?;
    let batches_per_epoch = corpus.len().div_ceil(stage.batch_size);
    let total_steps = batches_per_epoch * stage.epochs;
    let mut optimizer = AdamW::new(&model.store, stage.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, stage_index as u64, 0));
    let mut trace = Vec::with_capacity(total_steps);
    let mut step = 0;
    for epoch in 0..stage.epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut rng);
        for batch in order.chunks(stage.batch_size) {
            let encoder_lr = learning_rate(stage.encoder_lr, step, total_steps, stage.warmup_ratio);
            let head_lr = learning_rate(stage.head_lr, step, total_steps, stage.warmup_ratio);
            let jobs: Vec<(usize, Schema, LossMode)> = batch
                .iter()
                .map(|&i| {
                    let schema = training_schema(&model.schema, &model.config.training, &mut rng);
                    let mode = LossMode {
                        dropout_seed: Some(rng.random()),
                        sample_seed: Some(rng.random()),
                    };
                    (i, schema, mode)
                })
                .collect();
            let results = batch_gradients(model, corpus, &jobs)?;
            let mut grads = Gradients::zeros_like(&model.store);
            let mut mean = LossValues::default();
            let w = 1.0 / batch.len() as f64;
            for (values, g) in &results {
                grads.add_scaled(g, w);
                mean.entity += w * values.entity;
                mean.adjacency += w * values.adjacency;
                mean.relation += w * values.relation;
                mean.total += w * values.total;
                mean.dropped_pairs += values.dropped_pairs;
            }
            if !mean.total.is_finite() || !grads.is_finite() {
                return Err(Error::Diverged { step, loss: mean.total });
            }
            optimizer.step(&mut model.store, &grads, |g| match g {
                ParamGroup::Encoder => encoder_lr,
                ParamGroup::Head => head_lr,
            });
            trace.push(TraceRecord {
                step,
                stage: stage_index,
                epoch,
                encoder_lr,
                head_lr,
                entity: mean.entity,
                adjacency: mean.adjacency,
                relation: mean.relation,
                total: mean.total,
                dropped_pairs: mean.dropped_pairs,
            });
            step += 1;
        }
        if hook(stage_index, epoch, model)? == Control::Stop {
            break;
        }
    }
    Ok(trace)
}

/// Per-example gradients, evaluated in parallel and returned in job order.
fn batch_gradients(model: &JointModel, corpus: &[AnnotatedExample], jobs: &[(usize, Schema, LossMode)]) -> Result<Vec<(LossValues, Gradients)>> {
    use rayon::prelude::*;
    jobs.par_iter()
        .map(|(i, schema, mode)| model.loss_and_gradients(&corpus[*i], schema, *mode))
        .collect()
}

/// Stage 1 then stage 2 as enabled in the model config, each with a fresh optimizer.
pub fn run_training(
    model: &mut JointModel,
    stage1_corpus: &[AnnotatedExample],
    stage2_corpus: &[AnnotatedExample],
    hook: &mut EpochHook<'_>,
) -> Result<Vec<TraceRecord>> {
    let seed = model.config.training.seed;
    let mut trace = Vec::new();
    let stages = [(1, model.config.stage1.clone(), stage1_corpus), (2, model.config.stage2.clone(), stage2_corpus)];
    for (index, stage, corpus) in stages {
        if !stage.enabled {
            continue;
        }
        let offset = trace.len();
        let mut part = train_stage(model, corpus, &stage, index, seed, hook)?;
        for r in &mut part {
            r.step += offset;
        }
        trace.extend(part);
    }
    Ok(trace)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub coords_per_module: usize,
    pub seed: u64,
    /// Leave encoder-group parameters out of the sample.
    pub skip_encoder: bool,
    /// Denominator floor for the relative error.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            coords_per_module: 50,
            seed: 0,
            skip_encoder: false,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateCheck {
    pub module: &'static str,
    pub param: String,
    pub index: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub coordinates: Vec<CoordinateCheck>,
    pub max_relative_error: f64,
}

impl GradCheckReport {
    pub fn modules(&self) -> Vec<&'static str> {
        let mut m: Vec<&'static str> = self.coordinates.iter().map(|c| c.module).collect();
        m.dedup();
        m
    }

    pub fn max_for(&self, module: &str) -> f64 {
        self.coordinates
            .iter()
            .filter(|c| c.module == module)
            .map(|c| c.relative_error)
            .fold(0.0, f64::max)
    }
}

/// Central differences on the weighted total loss against backprop, over a
/// seeded sample of coordinates from every module.
pub fn gradient_check(model: &JointModel, example: &AnnotatedExample, options: &GradCheckOptions) -> Result<GradCheckReport> {
    let mode = LossMode {
        dropout_seed: Some(options.seed),
        sample_seed: Some(options.seed),
    };
    let schema = model.schema.clone();
    let (_, grads) = model.loss_and_gradients(example, &schema, mode)?;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut probe = model.clone();
    let mut coordinates = Vec::new();
    for (module, ids) in model.modules() {
        if options.skip_encoder && module == "encoder" {
            continue;
        }
        let cells: Vec<(usize, usize, usize)> = ids
            .iter()
            .enumerate()
            .flat_map(|(k, id)| {
                let (r, c) = model.store.get(*id).value.dim();
                (0..r * c).map(move |flat| (k, flat / c, flat % c))
            })
            .collect();
        let picked: Vec<&(usize, usize, usize)> = cells.choose_multiple(&mut rng, options.coords_per_module).collect();
        let mut picked: Vec<(usize, usize, usize)> = picked.into_iter().copied().collect();
        picked.sort_unstable();
        for (k, r, c) in picked {
            let id = ids[k];
            let original = model.store.get(id).value[[r, c]];
            let mut eval = |x: f64| -> Result<f64> {
                probe.store.get_mut(id).value[[r, c]] = x;
                Ok(probe.loss(example, &schema, mode)?.total)
            };
            let plus = eval(original + options.epsilon)?;
            let minus = eval(original - options.epsilon)?;
            probe.store.get_mut(id).value[[r, c]] = original;
            let numeric = (plus - minus) / (2.0 * options.epsilon);
            let analytic = grads.get(id)[[r, c]];
            let relative_error = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(options.floor);
            coordinates.push(CoordinateCheck {
                module,
                param: model.store.get(id).name.clone(),
                index: (r, c),
                analytic,
                numeric,
                relative_error,
            });
        }
    }
    let max_relative_error = coordinates.iter().map(|c| c.relative_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        coordinates,
        max_relative_error,
    })
}
