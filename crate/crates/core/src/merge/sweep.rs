use serde::{Deserialize, Serialize};

use super::{merge, Alphas, MergeMethod, MergeSpec, MergedDelta};
use crate::adapter::LoraAdapter;
use crate::error::{Error, Result};

/// Grid axes. `densities` is ignored for methods without a density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub densities: Vec<f64>,
    pub alpha1: Vec<f64>,
    pub alpha2: Vec<f64>,
}

/// λ ∈ {0, 0.2, …, 1}, α₁, α₂ ∈ {1, 1.2, …, 2}.
pub fn default_grid() -> SweepGrid {
    SweepGrid {
        densities: (0..=5).map(|i| i as f64 / 5.0).collect(),
        alpha1: (0..=5).map(|i| 1.0 + i as f64 / 5.0).collect(),
        alpha2: (0..=5).map(|i| 1.0 + i as f64 / 5.0).collect(),
    }
}

impl SweepGrid {
    /// Specs in lexicographic `(λ, α₁, α₂)` order.
    pub fn specs(&self, method: MergeMethod, seed: u64) -> Result<Vec<MergeSpec>> {
        let uses_density = matches!(method, MergeMethod::Ties | MergeMethod::Dare);
        if method == MergeMethod::Slerp {
            return Err(Error::contract("slerp has no (λ, α) grid"));
        }
        let sorted = |v: &[f64]| {
            let mut v = v.to_vec();
            v.sort_by(f64::total_cmp);
            v
        };
        let densities = if uses_density { sorted(&self.densities) } else { vec![f64::NAN] };
        let (alpha1, alpha2) = (sorted(&self.alpha1), sorted(&self.alpha2));
        if densities.is_empty() || alpha1.is_empty() || alpha2.is_empty() {
            return Err(Error::contract("empty sweep grid"));
        }
        let mut out = Vec::with_capacity(densities.len() * alpha1.len() * alpha2.len());
        for &d in &densities {
            for &w1 in &alpha1 {
                for &w2 in &alpha2 {
                    out.push(MergeSpec {
                        method,
                        alphas: Alphas::pair(w1, w2),
                        density: uses_density.then_some(d),
                        t: None,
                        seed: (method == MergeMethod::Dare).then_some(seed),
                        dare_b_only: false,
                    });
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub spec: MergeSpec,
    /// `None` when the merge or the evaluation failed (e.g. DARE at λ = 0).
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub best: MergeSpec,
    pub best_score: f64,
    pub rows: Vec<SweepRow>,
}

/// Exhaustive sweep maximizing `eval`. Ties go to the lexicographically
/// smallest `(λ, α₁, α₂)`; invalid grid points are kept in the table with
/// their error. Points are split across `workers` threads; the result does
/// not depend on the worker count.
pub fn sweep_grid<F>(
    method: MergeMethod,
    grid: &SweepGrid,
    a1: &LoraAdapter,
    a2: &LoraAdapter,
    seed: u64,
    workers: usize,
    eval: F,
) -> Result<SweepResult>
where
    F: Fn(&MergedDelta) -> Result<f64> + Sync,
{
    let specs = grid.specs(method, seed)?;
    let run = |spec: &MergeSpec| -> SweepRow {
        match merge(spec, a1, a2).and_then(|m| eval(&m)) {
            Ok(s) if s.is_finite() => SweepRow { spec: spec.clone(), score: Some(s), error: None },
            Ok(s) => SweepRow { spec: spec.clone(), score: None, error: Some(format!("non-finite score {s}")) },
            Err(e) => SweepRow { spec: spec.clone(), score: None, error: Some(e.to_string()) },
        }
    };
    let workers = workers.clamp(1, specs.len());
    let rows: Vec<SweepRow> = if workers == 1 {
        specs.iter().map(run).collect()
    } else {
        let chunk = specs.len().div_ceil(workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = specs.chunks(chunk).map(|c| scope.spawn(|| c.iter().map(run).collect::<Vec<_>>())).collect();
            handles.into_iter().flat_map(|h| h.join().expect("sweep worker panicked")).collect()
        })
    };
    let mut best: Option<(usize, f64)> = None;
    for (i, row) in rows.iter().enumerate() {
        if let Some(s) = row.score {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
    }
    let (i, best_score) = best.ok_or_else(|| Error::Merge("every sweep point failed".into()))?;
    Ok(SweepResult { best: rows[i].spec.clone(), best_score, rows })
}
