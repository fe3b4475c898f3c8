use serde::{Deserialize, Serialize};

use super::{fit, split_examples, Schedule, TrainConfig, Trained};
use crate::adapter::LoraAdapter;
use crate::bench::{Example, SkillDataset};
use crate::error::{Error, Result};
use crate::model::{Attachment, CatBundle, Granularity, MoeBundle, ToyModel, Trainable};
use crate::rng::Rng;

/// Settings for learning mixing coefficients (CAT) or routers (MoE) over
/// frozen adapters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CatTrainConfig {
    pub mixture_fraction: f64,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub schedule: Schedule,
    pub warmup_steps: usize,
    pub init: f64,
    pub granularity: Granularity,
    pub val_fraction: f64,
}

impl Default for CatTrainConfig {
    fn default() -> Self {
        Self {
            mixture_fraction: 0.05,
            epochs: 1,
            lr: 1e-4,
            seed: 0,
            batch_size: 8,
            grad_accum: 1,
            schedule: Schedule::Constant,
            warmup_steps: 0,
            init: 0.5,
            granularity: Granularity::Module,
            val_fraction: 0.1,
        }
    }
}

impl CatTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mixture_fraction > 0.0 && self.mixture_fraction <= 1.0) {
            return Err(Error::contract(format!("mixture_fraction {} outside (0, 1]", self.mixture_fraction)));
        }
        self.train_config().validate()
    }

    /// Loop settings; coefficients and routers get no weight decay.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            warmup_steps: self.warmup_steps,
            schedule: self.schedule,
            batch_size: self.batch_size,
            grad_accum: self.grad_accum,
            weight_decay: 0.0,
            val_fraction: self.val_fraction,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

/// Examples drawn from each dataset: `ceil(min_i fraction·|D_i|)`.
pub fn mixture_size(sizes: &[usize], fraction: f64) -> usize {
    let min = sizes.iter().copied().min().unwrap_or(0);
    ((fraction * min as f64) - 1e-9).ceil().max(0.0) as usize
}

/// The same number of examples sampled without replacement from every
/// dataset.
pub fn build_mixture(datasets: &[&SkillDataset], fraction: f64, seed: u64) -> Result<Vec<Example>> {
    let sizes: Vec<usize> = datasets.iter().map(|d| d.len()).collect();
    let m = mixture_size(&sizes, fraction);
    if m == 0 {
        return Err(Error::contract("empty training mixture"));
    }
    let mut out = Vec::with_capacity(m * datasets.len());
    for (i, d) in datasets.iter().enumerate() {
        let mut idx: Vec<usize> = (0..d.len()).collect();
        Rng::seed(Rng::derive_seed(seed, i as u64)).shuffle(&mut idx);
        out.extend(idx[..m].iter().map(|&j| d.examples[j].clone()));
    }
    Ok(out)
}

fn train_on_mixture(
    model: &ToyModel,
    attachment: Attachment,
    which: Trainable,
    datasets: &[&SkillDataset],
    cfg: &CatTrainConfig,
) -> Result<(Attachment, super::TrainReport)> {
    cfg.validate()?;
    let mixture = build_mixture(datasets, cfg.mixture_fraction, cfg.seed)?;
    let tc = cfg.train_config();
    let mut m = model.with_attachment(attachment)?;
    let (train, val) = split_examples(mixture, tc.val_fraction, tc.seed)?;
    let report = fit(&mut m, which, &train, &val, &tc, 0.0)?;
    Ok((m.detach(), report))
}

/// Learns per-layer coefficients over frozen `adapters`, starting from
/// `cfg.init` for every adapter.
pub fn train_cat_coefficients(
    model: &ToyModel,
    adapters: &[LoraAdapter],
    datasets: &[&SkillDataset],
    cfg: &CatTrainConfig,
) -> Result<Trained<CatBundle>> {
    let bundle = CatBundle::new(adapters.to_vec(), cfg.init, cfg.granularity)?;
    match train_on_mixture(model, Attachment::Cat(bundle), Trainable::Coefficients, datasets, cfg)? {
        (Attachment::Cat(b), report) => Ok(Trained { value: b, report }),
        _ => unreachable!("CAT attachment round-trips"),
    }
}

/// Learns per-layer softmax routers over frozen `adapters`, starting from
/// zero (uniform mixing).
pub fn train_moe_router(
    model: &ToyModel,
    adapters: &[LoraAdapter],
    datasets: &[&SkillDataset],
    cfg: &CatTrainConfig,
) -> Result<Trained<MoeBundle>> {
    let bundle = MoeBundle::new(adapters.to_vec())?;
    match train_on_mixture(model, Attachment::Moe(bundle), Trainable::Routers, datasets, cfg)? {
        (Attachment::Moe(b), report) => Ok(Trained { value: b, report }),
        _ => unreachable!("MoE attachment round-trips"),
    }
}
