//! Training loops: LoRA fine-tuning, joint multi-skill training, learned
//! CAT coefficients, MoE routers and gradient-free LoRA Hub weights.

mod compose;
mod lorahub;
mod optim;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapter::{LoraAdapter, LoraConfig};
use crate::bench::{Example, SkillDataset};
use crate::error::{Error, Result};
use crate::model::tokenizer;
use crate::model::{Attachment, Batch, ForwardOptions, ToyModel, Trainable};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub use compose::{build_mixture, mixture_size, train_cat_coefficients, train_moe_router, CatTrainConfig};
pub use lorahub::{lorahub_weights, minimize_weights, nelder_mead, LoraHubConfig, LoraHubResult, NelderMeadResult};
pub use optim::{clip_grad_norm, lr_at, AdamParams, AdamW, Schedule};

const INIT_STREAM: u64 = 1;
const VAL_STREAM: u64 = 2;
const DROPOUT_STREAM: u64 = 3;
const SHUFFLE_STREAM: u64 = 4;

pub(crate) type Pair = (Vec<usize>, Vec<usize>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Joint gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
    /// Held-out fraction used to pick the best epoch.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamParams::default();
        Self {
            epochs: 3,
            lr: 3e-4,
            warmup_steps: 100,
            schedule: Schedule::LinearDecay,
            batch_size: 8,
            grad_accum: 4,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            weight_decay: adam.weight_decay,
            max_grad_norm: Some(1.0),
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::contract(format!("learning rate {} must be positive", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.grad_accum == 0 {
            return Err(Error::contract("epochs, batch_size and grad_accum must be positive"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::contract(format!("val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        if self.max_grad_norm.is_some_and(|c| c.is_nan() || c <= 0.0) {
            return Err(Error::contract("max_grad_norm must be positive"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams { beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }

    /// Optimizer steps for `n_train` training examples.
    pub fn total_steps(&self, n_train: usize) -> usize {
        let micro = n_train.div_ceil(self.batch_size.max(1));
        self.epochs * micro.div_ceil(self.grad_accum.max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub metrics: Vec<Metric>,
    /// Epoch whose parameters were kept, when a validation split existed.
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
}

impl TrainReport {
    pub fn to_jsonl(&self) -> String {
        self.metrics.iter().map(|m| serde_json::to_string(m).expect("metric serializes") + "\n").collect()
    }

    pub fn last_train_loss(&self) -> Option<f64> {
        self.metrics.iter().rev().find(|m| m.split == Split::Train).map(|m| m.loss)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trained<T> {
    pub value: T,
    pub report: TrainReport,
}

pub(crate) fn encode_examples(examples: &[Example]) -> Result<Vec<Pair>> {
    examples.iter().map(|e| Ok((tokenizer::encode(&e.prompt)?, tokenizer::encode(&e.answer)?))).collect()
}

/// Canonical order, then a seeded held-out split. The result depends on
/// the multiset of examples and the seed, not on the input order.
pub(crate) fn split_examples(mut examples: Vec<Example>, val_fraction: f64, seed: u64) -> Result<(Vec<Pair>, Vec<Pair>)> {
    examples.sort_by(|a, b| (&a.prompt, &a.answer).cmp(&(&b.prompt, &b.answer)));
    let n_val = (val_fraction * examples.len() as f64).floor() as usize;
    let mut idx: Vec<usize> = (0..examples.len()).collect();
    Rng::seed(Rng::derive_seed(seed, VAL_STREAM)).shuffle(&mut idx);
    let mut val_idx = idx[..n_val].to_vec();
    val_idx.sort_unstable();
    let mut is_val = vec![false; examples.len()];
    val_idx.iter().for_each(|&i| is_val[i] = true);
    let pairs = encode_examples(&examples)?;
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (p, v) in pairs.into_iter().zip(is_val) {
        if v {
            val.push(p)
        } else {
            train.push(p)
        }
    }
    if train.is_empty() {
        return Err(Error::contract("no training examples left after the validation split"));
    }
    Ok((train, val))
}

/// Mean masked loss over `pairs`, weighted by supervised token count.
pub(crate) fn pairs_loss(model: &ToyModel, pairs: &[Pair], batch_size: usize) -> Result<f64> {
    let (mut total, mut count) = (0.0, 0.0);
    for chunk in pairs.chunks(batch_size.max(1)) {
        let batch = Batch::from_pairs(chunk)?;
        let n: f64 = batch.mask.iter().sum();
        total += model.masked_loss(&batch)? * n;
        count += n;
    }
    if count == 0.0 {
        return Err(Error::DegenerateBatch);
    }
    Ok(total / count)
}

/// Masked loss of `model` on a whole dataset.
pub fn dataset_loss(model: &ToyModel, dataset: &SkillDataset, batch_size: usize) -> Result<f64> {
    pairs_loss(model, &encode_examples(&dataset.examples)?, batch_size)
}

fn at_step(e: Error, step: usize, epoch: usize) -> Error {
    match e {
        Error::Divergence(msg) => Error::Divergence(format!("step {step} (epoch {epoch}): {msg}")),
        other => other,
    }
}

/// Optimizes the `which` parameters of `model` in place. With a validation
/// split, the parameters from the epoch with the lowest held-out loss are
/// restored at the end.
pub(crate) fn fit(
    model: &mut ToyModel,
    which: Trainable,
    train: &[Pair],
    val: &[Pair],
    cfg: &TrainConfig,
    dropout: f64,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::contract("empty training set"));
    }
    if model.params(which).is_empty() {
        return Err(Error::contract(format!("model has no {which:?} parameters to train")));
    }
    let total = cfg.total_steps(train.len());
    if cfg.schedule == Schedule::LinearDecay && cfg.warmup_steps >= total {
        return Err(Error::contract(format!("warmup_steps {} must be below total steps {total}", cfg.warmup_steps)));
    }
    let mut opt = AdamW::new(cfg.adam());
    let mut report = TrainReport::default();
    let mut best: Option<Vec<Tensor>> = None;
    let mut step = 0;
    let mut micro_index = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        Rng::seed(Rng::derive_seed(Rng::derive_seed(cfg.seed, SHUFFLE_STREAM), epoch as u64)).shuffle(&mut order);
        let micro: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for group in micro.chunks(cfg.grad_accum) {
            let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
            let mut loss_sum = 0.0;
            for idx in group {
                let pairs: Vec<Pair> = idx.iter().map(|&i| train[i].clone()).collect();
                let batch = Batch::from_pairs(&pairs)?;
                let opts = ForwardOptions {
                    lora_dropout: (dropout > 0.0)
                        .then(|| (dropout, Rng::derive_seed(Rng::derive_seed(cfg.seed, DROPOUT_STREAM), micro_index))),
                };
                micro_index += 1;
                let (loss, grads) = model.loss_and_grads(&batch, which, &opts).map_err(|e| at_step(e, step, epoch))?;
                loss_sum += loss;
                for (name, g) in grads {
                    match acc.get_mut(&name) {
                        Some(a) => a.axpy(1.0, &g)?,
                        None => {
                            acc.insert(name, g);
                        }
                    }
                }
            }
            let inv = 1.0 / group.len() as f64;
            acc.values_mut().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= inv));
            if let Some(c) = cfg.max_grad_norm {
                clip_grad_norm(&mut acc, c);
            }
            let lr = lr_at(cfg.schedule, step, total, cfg.warmup_steps, cfg.lr);
            opt.step(lr, model.params_mut(which), &acc)?;
            if let Some((name, _)) = model.params(which).into_iter().find(|(_, t)| !t.is_finite()) {
                return Err(Error::Divergence(format!("step {step} (epoch {epoch}): parameter {name} became non-finite")));
            }
            let loss = loss_sum * inv;
            log::debug!("step {step} epoch {epoch} lr {lr:.3e} loss {loss:.5}");
            report.metrics.push(Metric { step, epoch, lr, loss, split: Split::Train });
            step += 1;
        }
        if !val.is_empty() {
            let loss = pairs_loss(model, val, cfg.batch_size)?;
            report.metrics.push(Metric { step, epoch, lr: 0.0, loss, split: Split::Val });
            if report.best_val_loss.is_none_or(|b| loss < b) {
                report.best_val_loss = Some(loss);
                report.best_epoch = Some(epoch);
                best = Some(model.params(which).into_iter().map(|(_, t)| t.clone()).collect());
            }
        }
    }
    if let Some(snapshot) = best {
        for ((_, slot), saved) in model.params_mut(which).into_iter().zip(snapshot) {
            *slot = saved;
        }
    }
    report.steps = step;
    Ok(report)
}

fn pooled(datasets: &[&SkillDataset]) -> Vec<Example> {
    datasets.iter().flat_map(|d| d.examples.iter().cloned()).collect()
}

fn train_adapter(model: &ToyModel, examples: Vec<Example>, lora: &LoraConfig, cfg: &TrainConfig) -> Result<Trained<LoraAdapter>> {
    cfg.validate()?;
    let adapter = model.new_adapter(lora.clone(), Rng::derive_seed(cfg.seed, INIT_STREAM))?;
    let mut m = model.with_attachment(Attachment::Adapter(adapter))?;
    let (train, val) = split_examples(examples, cfg.val_fraction, cfg.seed)?;
    let report = fit(&mut m, Trainable::Lora, &train, &val, cfg, lora.lora_dropout)?;
    match m.detach() {
        Attachment::Adapter(a) => Ok(Trained { value: a, report }),
        _ => unreachable!("attachment set above"),
    }
}

/// Fine-tunes a fresh rank-`lora.r` adapter on one skill; `W₀` stays frozen.
pub fn train_skill(
    model: &ToyModel,
    dataset: &SkillDataset,
    lora: &LoraConfig,
    cfg: &TrainConfig,
) -> Result<Trained<LoraAdapter>> {
    train_adapter(model, dataset.examples.clone(), lora, cfg)
}

/// The joint-training config for `k` skills: rank `k·r` with the same
/// `alpha / r` scaling as each single-skill adapter.
pub fn datamix_config(lora: &LoraConfig, k: usize) -> LoraConfig {
    LoraConfig { r: lora.r * k, lora_alpha: lora.lora_alpha * k as f64, ..lora.clone() }
}

/// One adapter of rank `k·r` trained on the union of `k` skill datasets.
pub fn train_datamix(
    model: &ToyModel,
    datasets: &[&SkillDataset],
    lora: &LoraConfig,
    cfg: &TrainConfig,
) -> Result<Trained<LoraAdapter>> {
    if datasets.is_empty() {
        return Err(Error::contract("DATA-MIX needs at least one dataset"));
    }
    train_adapter(model, pooled(datasets), &datamix_config(lora, datasets.len()), cfg)
}

/// Result of two-stage continual training.
#[derive(Debug, Clone)]
pub struct Continual {
    /// Base with the first-stage update folded into `W₀`.
    pub model: ToyModel,
    pub stage1: TrainReport,
    pub adapter: Trained<LoraAdapter>,
}

/// Continual variant of joint training for datasets whose masking schemes
/// differ: train on `knowledge` for `cfg.epochs`, fold the update into
/// `W₀`, then train a fresh adapter on `instruction` for one epoch.
pub fn train_datamix_continual(
    model: &ToyModel,
    knowledge: &[&SkillDataset],
    instruction: &[&SkillDataset],
    lora: &LoraConfig,
    cfg: &TrainConfig,
) -> Result<Continual> {
    if knowledge.is_empty() || instruction.is_empty() {
        return Err(Error::contract("continual training needs datasets for both stages"));
    }
    let rank_cfg = datamix_config(lora, knowledge.len() + instruction.len());
    let first = train_adapter(model, pooled(knowledge), &rank_cfg, cfg)?;
    let mut folded = model.with_attachment(Attachment::Adapter(first.value))?;
    folded.fold_attachment()?;
    let cfg2 = TrainConfig { epochs: 1, seed: Rng::derive_seed(cfg.seed, 99), ..cfg.clone() };
    let adapter = train_adapter(&folded, pooled(instruction), &rank_cfg, &cfg2)?;
    Ok(Continual { model: folded, stage1: first.report, adapter })
}

/// Full-parameter training of the base model, e.g. on an unmasked corpus.
pub fn pretrain_base(model: &mut ToyModel, datasets: &[&SkillDataset], cfg: &TrainConfig) -> Result<TrainReport> {
    if !matches!(model.attachment, Attachment::None) {
        return Err(Error::contract("detach adapters before training the base"));
    }
    let (train, val) = split_examples(pooled(datasets), cfg.val_fraction, cfg.seed)?;
    fit(model, Trainable::Base, &train, &val, cfg, 0.0)
}

#[cfg(test)]
mod tests;
