//! Adam with linear warmup/decay, the epoch loop, and checkpoints.

mod checkpoint;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, TensorEntry};

use crate::encoder::{Mode, Vocabulary};
use crate::error::{Error, Result};
use crate::peft::{PeMethod, TrainableSet};
use crate::retrievers::{RetrieverModel, TrainingBatch, TrainingExample};
use crate::tensor::{seeded_rng, Tape, Tensor};

fn default_batch_size() -> usize {
    128
}
fn default_epochs() -> usize {
    40
}
fn default_warmup() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Peak learning rate; `None` picks the per-method default.
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    /// Global gradient-norm clip; off unless set.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: None,
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            warmup_fraction: default_warmup(),
            seed: 0,
            grad_clip: None,
        }
    }
}

pub fn default_learning_rate(method: PeMethod) -> f64 {
    match method {
        PeMethod::PrefixV2 | PeMethod::InputPrompt | PeMethod::BiasOnly => 0.01,
        PeMethod::Adapter => 3e-5,
        PeMethod::FineTune => 2e-5,
    }
}

impl TrainConfig {
    pub fn peak_lr(&self, method: PeMethod) -> f64 {
        self.learning_rate.unwrap_or_else(|| default_learning_rate(method))
    }

    /// Fills in the method-dependent learning rate.
    pub fn resolved(&self, method: PeMethod) -> TrainConfig {
        TrainConfig {
            learning_rate: Some(self.peak_lr(method)),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("train.{field}: {why}")));
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction", "must be in [0, 1)");
        }
        if let Some(lr) = self.learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad("learning_rate", "must be positive");
            }
        }
        if self.batch_size < 2 {
            return bad("batch_size", "must be at least 2");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be positive");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip", "must be positive");
            }
        }
        Ok(())
    }
}

pub fn warmup_steps(total_steps: usize, warmup_fraction: f64) -> usize {
    (warmup_fraction * total_steps as f64).ceil() as usize
}

/// Linear ramp from 0 to `peak` over the warmup steps, then linear decay to
/// 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, peak: f64, warmup_fraction: f64) -> f64 {
    let warm = warmup_steps(total_steps, warmup_fraction);
    if step <= warm {
        if warm == 0 {
            return peak;
        }
        return peak * step as f64 / warm as f64;
    }
    if step >= total_steps {
        return 0.0;
    }
    peak * (total_steps - step) as f64 / (total_steps - warm) as f64
}

/// Gradients keyed by parameter path.
pub type Gradients = BTreeMap<String, Vec<f64>>;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    /// Zero moments for exactly the trainable paths.
    pub fn new<'a>(
        params: impl IntoIterator<Item = (String, &'a Tensor)>,
        trainable: &TrainableSet,
    ) -> Self {
        let mut first = BTreeMap::new();
        for (p, t) in params {
            if trainable.contains(&p) {
                first.insert(p, vec![0.0; t.len()]);
            }
        }
        Adam {
            step: 0,
            second: first.clone(),
            first,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn has_moments(&self, path: &str) -> bool {
        self.first.contains_key(path)
    }

    /// One bias-corrected update of every trainable tensor. Tensors without
    /// moments are never written. `grads` is emptied afterwards.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = (String, &'a mut Tensor)>,
        grads: &mut Gradients,
        lr: f64,
    ) -> Result<()> {
        if let Some(stray) = grads.keys().find(|p| !self.first.contains_key(*p)) {
            return Err(Error::Internal(format!("gradient supplied for frozen path {stray}")));
        }
        let mut params: Vec<(String, &mut Tensor)> = params
            .into_iter()
            .filter(|(p, _)| self.first.contains_key(p))
            .collect();
        if params.len() != self.first.len() {
            return Err(Error::Internal("trainable parameter missing from model".into()));
        }
        for (path, _) in &params {
            match grads.get(path) {
                None => return Err(Error::Internal(format!("missing gradient for {path}"))),
                Some(g) if g.len() != self.first[path].len() => {
                    return Err(Error::Internal(format!("gradient size mismatch for {path}")))
                }
                Some(_) => {}
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (path, tensor) in params.iter_mut() {
            let g = &grads[path];
            let m = self.first.get_mut(path).expect("checked");
            let v = self.second.get_mut(path).expect("checked");
            for (i, w) in tensor.data_mut().iter_mut().enumerate() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + EPSILON);
            }
        }
        grads.clear();
        Ok(())
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.values_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

struct Tokenized {
    query: Vec<usize>,
    positive: Vec<usize>,
    negatives: Vec<Vec<usize>>,
}

fn tokenize_examples(
    model: &RetrieverModel,
    vocab: &Vocabulary,
    examples: &[TrainingExample],
) -> Result<Vec<Tokenized>> {
    examples
        .iter()
        .map(|ex| {
            Ok(Tokenized {
                query: model.query_ids(&ex.query, vocab)?,
                positive: model.passage_ids(&ex.positive, vocab)?,
                negatives: ex
                    .negatives
                    .iter()
                    .map(|n| model.passage_ids(n, vocab))
                    .collect::<Result<_>>()?,
            })
        })
        .collect()
}

/// Consecutive chunks of `batch_size`; a trailing chunk of one is dropped.
pub fn batch_ranges(n: usize, batch_size: usize) -> Vec<std::ops::Range<usize>> {
    (0..n)
        .step_by(batch_size.max(1))
        .map(|s| s..(s + batch_size).min(n))
        .filter(|r| r.len() >= 2)
        .collect()
}

/// What a finished run hands back besides the updated model.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

/// Trains `model` in place. Each epoch reshuffles with a generator seeded
/// from `cfg.seed`, so the result depends only on (seed, config, data).
pub fn train(
    model: &mut RetrieverModel,
    vocab: &Vocabulary,
    examples: &[TrainingExample],
    cfg: &TrainConfig,
    method: PeMethod,
) -> Result<TrainReport> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Config("training data is empty".into()));
    }
    let data = tokenize_examples(model, vocab, examples)?;
    let ranges = batch_ranges(data.len(), cfg.batch_size);
    if ranges.is_empty() {
        return Err(Error::Config("training needs at least two examples".into()));
    }
    let total = ranges.len() * cfg.epochs;
    let peak = cfg.peak_lr(method);
    let trainable = model.trainable().clone();
    let mut adam = Adam::new(model.parameters(), &trainable);
    let mut rng = seeded_rng(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    info!(
        "training {} examples, {} batches/epoch, {} steps, peak lr {peak}",
        data.len(),
        ranges.len(),
        total
    );
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for range in &ranges {
            let idx = &order[range.clone()];
            let batch = TrainingBatch {
                queries: idx.iter().map(|&i| data[i].query.clone()).collect(),
                positives: idx.iter().map(|&i| data[i].positive.clone()).collect(),
                hard_negatives: idx.iter().map(|&i| data[i].negatives.clone()).collect(),
            };
            let mut tape = Tape::new();
            let (loss, leaves) = model.in_batch_loss(&mut tape, &batch, &mut Mode::Train(&mut rng))?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numeric {
                    op: "train",
                    detail: format!("loss became {value} in epoch {epoch}"),
                });
            }
            sum += value;
            tape.backward(loss)?;
            let mut grads: Gradients = leaves
                .iter()
                .filter(|(p, _)| trainable.contains(p))
                .map(|(p, v)| {
                    let g = tape.grad(*v).map(<[f64]>::to_vec);
                    g.map(|g| (p.clone(), g))
                        .ok_or_else(|| Error::Internal(format!("no gradient reached {p}")))
                })
                .collect::<Result<_>>()?;
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            let lr = lr_at(adam.steps_taken() as usize + 1, total, peak, cfg.warmup_fraction);
            adam.step(model.parameters_mut(), &mut grads, lr)?;
            model.sync_shared();
        }
        let mean = sum / ranges.len() as f64;
        debug!("epoch {epoch}: mean loss {mean}");
        epoch_losses.push(mean);
    }
    if let Some(last) = epoch_losses.last() {
        info!("final epoch mean loss {last}");
    }
    Ok(TrainReport {
        epoch_losses,
        steps: adam.steps_taken(),
    })
}

pub fn write_loss_log(path: &Path, epoch_losses: &[f64]) -> Result<()> {
    let mut out = String::from("epoch,mean_loss\n");
    for (i, l) in epoch_losses.iter().enumerate() {
        out.push_str(&format!("{},{l}\n", i + 1));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
