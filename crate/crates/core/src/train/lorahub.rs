use serde::{Deserialize, Serialize};

use super::{encode_examples, pairs_loss};
use crate::adapter::LoraAdapter;
use crate::bench::Example;
use crate::error::{Error, Result};
use crate::merge::Alphas;
use crate::model::{Attachment, CatBundle, Granularity, ToyModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraHubConfig {
    /// Maximum objective evaluations.
    pub budget: usize,
    /// Weight of the `Σ wᵢ²` penalty.
    pub l2: f64,
    /// Start value for every weight.
    pub start: f64,
    /// Edge length of the initial simplex.
    pub step: f64,
    pub min_examples: usize,
}

impl Default for LoraHubConfig {
    fn default() -> Self {
        Self { budget: 100, l2: 0.05, start: 0.5, step: 0.25, min_examples: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub fx: f64,
    pub evals: usize,
}

/// Nelder-Mead simplex minimization with a hard cap on evaluations; returns
/// the best point evaluated. Non-finite values rank as `+∞`.
pub fn nelder_mead(mut f: impl FnMut(&[f64]) -> f64, start: &[f64], step: f64, budget: usize) -> NelderMeadResult {
    let n = start.len();
    let mut evals = 0;
    let mut best = NelderMeadResult { x: start.to_vec(), fx: f64::INFINITY, evals: 0 };
    let mut eval = |x: &[f64], evals: &mut usize, best: &mut NelderMeadResult| -> Option<f64> {
        if *evals >= budget {
            return None;
        }
        *evals += 1;
        let v = f(x);
        let v = if v.is_finite() { v } else { f64::INFINITY };
        if v < best.fx {
            best.x = x.to_vec();
            best.fx = v;
        }
        Some(v)
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    'outer: {
        for i in 0..=n {
            let mut x = start.to_vec();
            if i > 0 {
                x[i - 1] += step;
            }
            let Some(v) = eval(&x, &mut evals, &mut best) else { break 'outer };
            simplex.push((x, v));
        }
        loop {
            simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
            let centroid: Vec<f64> = (0..n).map(|j| simplex[..n].iter().map(|(x, _)| x[j]).sum::<f64>() / n as f64).collect();
            let worst = simplex[n].clone();
            let along = |c: f64| -> Vec<f64> { (0..n).map(|j| centroid[j] + c * (worst.0[j] - centroid[j])).collect() };
            let xr = along(-1.0);
            let Some(fr) = eval(&xr, &mut evals, &mut best) else { break 'outer };
            if fr < simplex[0].1 {
                let xe = along(-2.0);
                let Some(fe) = eval(&xe, &mut evals, &mut best) else { break 'outer };
                simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
                continue;
            }
            if fr < simplex[n - 1].1 {
                simplex[n] = (xr, fr);
                continue;
            }
            let (xc, fc_ref) = if fr < worst.1 { (along(-0.5), fr) } else { (along(0.5), worst.1) };
            let Some(fc) = eval(&xc, &mut evals, &mut best) else { break 'outer };
            if fc < fc_ref {
                simplex[n] = (xc, fc);
                continue;
            }
            let x0 = simplex[0].0.clone();
            for s in simplex.iter_mut().skip(1) {
                let xs: Vec<f64> = (0..n).map(|j| x0[j] + 0.5 * (s.0[j] - x0[j])).collect();
                let Some(v) = eval(&xs, &mut evals, &mut best) else { break 'outer };
                *s = (xs, v);
            }
        }
    }
    best.evals = evals;
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraHubResult {
    pub weights: Vec<f64>,
    /// Regularized objective at `weights`.
    pub objective: f64,
    pub evals: usize,
}

/// Minimizes `loss(w) + l2·‖w‖²` over `k` global weights from the
/// configured start.
pub fn minimize_weights(k: usize, mut loss: impl FnMut(&[f64]) -> f64, cfg: &LoraHubConfig) -> Result<LoraHubResult> {
    if k == 0 || cfg.budget == 0 {
        return Err(Error::contract("LoRA Hub needs at least one weight and one evaluation"));
    }
    let start = vec![cfg.start; k];
    let res = nelder_mead(|w| loss(w) + cfg.l2 * w.iter().map(|x| x * x).sum::<f64>(), &start, cfg.step, cfg.budget);
    if !res.fx.is_finite() {
        return Err(Error::Divergence(format!("all {} LoRA Hub evaluations were non-finite", res.evals)));
    }
    Ok(LoraHubResult { weights: res.x, objective: res.fx, evals: res.evals })
}

/// Global CAT weights for `adapters` fitted to few-shot target examples
/// without gradients.
pub fn lorahub_weights(
    model: &ToyModel,
    adapters: &[LoraAdapter],
    examples: &[Example],
    cfg: &LoraHubConfig,
) -> Result<LoraHubResult> {
    if examples.len() < cfg.min_examples {
        return Err(Error::contract(format!("LoRA Hub needs at least {} examples, got {}", cfg.min_examples, examples.len())));
    }
    let pairs = encode_examples(examples)?;
    let probe = CatBundle::new(adapters.to_vec(), cfg.start, Granularity::Block)?;
    let mut m = model.with_attachment(Attachment::Cat(probe))?;
    minimize_weights(
        adapters.len(),
        |w| {
            let bundle = CatBundle::from_alphas(adapters.to_vec(), &Alphas::Global(w.to_vec()), Granularity::Block);
            bundle
                .and_then(|b| m.attach(Attachment::Cat(b)))
                .and_then(|_| pairs_loss(&m, &pairs, pairs.len()))
                .unwrap_or(f64::NAN)
        },
        cfg,
    )
}
