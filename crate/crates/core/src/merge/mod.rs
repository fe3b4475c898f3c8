//! Merging two (or, for CAT, k) adapters into one per-layer update.
//!
//! Every function here is pure: identical inputs, including the DARE seed,
//! give bit-identical outputs.

mod cat;
mod dare;
mod linear;
mod slerp;
mod sweep;
mod ties;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{LoraAdapter, LoraPair};
use crate::container::TensorFile;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use cat::{cat_concat_form, merge_cat, merge_cat_static};
pub use dare::{dare_preprocess, merge_dare};
pub use linear::{combine_factors, merge_linear};
pub use slerp::{merge_slerp, slerp_coefficients, SLERP_PARALLEL_EPS};
pub use sweep::{default_grid, sweep_grid, SweepGrid, SweepResult, SweepRow};
pub use ties::{merge_ties, ties_elect_merge, ties_preprocess, ties_trim};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    CatStatic,
    CatLearned,
    Linear,
    Ties,
    Dare,
    Slerp,
}

impl MergeMethod {
    pub fn name(self) -> &'static str {
        match self {
            MergeMethod::CatStatic => "cat_static",
            MergeMethod::CatLearned => "cat_learned",
            MergeMethod::Linear => "linear",
            MergeMethod::Ties => "ties",
            MergeMethod::Dare => "dare",
            MergeMethod::Slerp => "slerp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "cat" | "cat_static" | "cat-static" => MergeMethod::CatStatic,
            "cat_learned" | "cat-learned" => MergeMethod::CatLearned,
            "linear" => MergeMethod::Linear,
            "ties" => MergeMethod::Ties,
            "dare" => MergeMethod::Dare,
            "slerp" => MergeMethod::Slerp,
            _ => return None,
        })
    }
}

/// Merging weights, one entry per source adapter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alphas {
    Global(Vec<f64>),
    /// Keyed by layer-id (`layers.{i}.{module}`) or, for block granularity,
    /// by block id (`layers.{i}`).
    PerLayer(BTreeMap<String, Vec<f64>>),
}

impl Alphas {
    pub fn pair(a1: f64, a2: f64) -> Self {
        Alphas::Global(vec![a1, a2])
    }

    /// Weights for `layer`, falling back from the full layer-id to its block.
    pub fn for_layer(&self, layer: &str) -> Result<&[f64]> {
        match self {
            Alphas::Global(v) => Ok(v),
            Alphas::PerLayer(map) => map
                .get(layer)
                .or_else(|| layer.rsplit_once('.').and_then(|(block, _)| map.get(block)))
                .map(Vec::as_slice)
                .ok_or_else(|| Error::Merge(format!("no merge coefficients for layer {layer}"))),
        }
    }

    fn values(&self) -> Box<dyn Iterator<Item = &[f64]> + '_> {
        match self {
            Alphas::Global(v) => Box::new(std::iter::once(v.as_slice())),
            Alphas::PerLayer(map) => Box::new(map.values().map(Vec::as_slice)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeSpec {
    pub method: MergeMethod,
    pub alphas: Alphas,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// DARE: weight only the `B` factors, summing `A` factors unweighted.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub dare_b_only: bool,
}

impl MergeSpec {
    pub fn cat(a1: f64, a2: f64) -> Self {
        Self::with_alphas(MergeMethod::CatStatic, Alphas::pair(a1, a2))
    }

    pub fn linear(a1: f64, a2: f64) -> Self {
        Self::with_alphas(MergeMethod::Linear, Alphas::pair(a1, a2))
    }

    pub fn ties(density: f64, a1: f64, a2: f64) -> Self {
        Self { density: Some(density), ..Self::with_alphas(MergeMethod::Ties, Alphas::pair(a1, a2)) }
    }

    pub fn dare(density: f64, a1: f64, a2: f64, seed: u64) -> Self {
        Self { density: Some(density), seed: Some(seed), ..Self::with_alphas(MergeMethod::Dare, Alphas::pair(a1, a2)) }
    }

    pub fn slerp(t: f64) -> Self {
        Self { t: Some(t), ..Self::with_alphas(MergeMethod::Slerp, Alphas::pair(1.0, 1.0)) }
    }

    fn with_alphas(method: MergeMethod, alphas: Alphas) -> Self {
        Self { method, alphas, density: None, t: None, seed: None, dare_b_only: false }
    }

    pub fn validate(&self) -> Result<()> {
        for a in self.alphas.values() {
            if a.iter().any(|x| !x.is_finite()) {
                return Err(Error::contract("merge coefficients must be finite"));
            }
            if self.method == MergeMethod::CatStatic && a.iter().any(|x| !(0.0..=1.0).contains(x)) {
                return Err(Error::contract(format!("static CAT coefficients {a:?} must lie in [0, 1]")));
            }
        }
        match self.method {
            MergeMethod::Ties => {
                let d = self.density.ok_or_else(|| Error::contract("ties requires a density"))?;
                if !(0.0..=1.0).contains(&d) {
                    return Err(Error::contract(format!("density {d} outside [0, 1]")));
                }
            }
            MergeMethod::Dare => {
                let d = self.density.ok_or_else(|| Error::contract("dare requires a density"))?;
                if !(d > 0.0 && d <= 1.0) {
                    return Err(Error::InvalidDensity(d));
                }
                if self.seed.is_none() {
                    return Err(Error::contract("dare requires a seed"));
                }
            }
            MergeMethod::Slerp => {
                let t = self.t.ok_or_else(|| Error::contract("slerp requires t"))?;
                if !(0.0..=1.0).contains(&t) {
                    return Err(Error::contract(format!("slerp t = {t} outside [0, 1]")));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub spec: MergeSpec,
    pub sources: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

/// Per-layer dense updates `[d_out × d_in]` plus how they were produced.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedDelta {
    pub layers: BTreeMap<String, Tensor>,
    pub provenance: Provenance,
}

pub const MERGE_SPEC_METADATA_KEY: &str = "merge_spec";
pub const DELTA_KEY_SUFFIX: &str = ".delta.weight";

impl MergedDelta {
    pub fn max_abs_diff(&self, other: &MergedDelta) -> Result<f64> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::Merge("layer sets differ".into()));
        }
        let mut m = 0.0f64;
        for (id, t) in &self.layers {
            let o = other.layers.get(id).ok_or_else(|| Error::Merge(format!("missing layer {id}")))?;
            m = m.max(t.max_abs_diff(o)?);
        }
        Ok(m)
    }

    /// Dense-delta checkpoint: one tensor per layer, provenance in metadata.
    pub fn to_tensor_file(&self) -> Result<TensorFile> {
        let mut file = TensorFile::new();
        for (id, t) in &self.layers {
            file.insert(format!("{}{id}{DELTA_KEY_SUFFIX}", crate::adapter::KEY_PREFIX), t.clone());
        }
        file.metadata.insert(MERGE_SPEC_METADATA_KEY.into(), serde_json::to_string(&self.provenance)?);
        Ok(file)
    }

    pub fn from_tensor_file(file: TensorFile) -> Result<Self> {
        let raw = file
            .metadata
            .get(MERGE_SPEC_METADATA_KEY)
            .ok_or_else(|| Error::Merge("dense-delta checkpoint has no merge_spec metadata".into()))?;
        let provenance: Provenance = serde_json::from_str(raw)?;
        let mut layers = BTreeMap::new();
        for (name, t) in file.tensors {
            let id = name
                .strip_prefix(crate::adapter::KEY_PREFIX)
                .and_then(|s| s.strip_suffix(DELTA_KEY_SUFFIX))
                .ok_or_else(|| Error::Merge(format!("unexpected tensor {name:?} in dense-delta checkpoint")))?;
            layers.insert(id.to_string(), t);
        }
        Ok(Self { layers, provenance })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_tensor_file()?.write(path)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tensor_file(TensorFile::read(path)?)
    }
}

/// Applies `spec` to two adapters.
pub fn merge(spec: &MergeSpec, a1: &LoraAdapter, a2: &LoraAdapter) -> Result<MergedDelta> {
    spec.validate()?;
    match spec.method {
        MergeMethod::CatStatic | MergeMethod::CatLearned => {
            let mut out = merge_cat(&[a1, a2], &spec.alphas)?;
            out.provenance.spec = spec.clone();
            Ok(out)
        }
        MergeMethod::Linear => {
            let (w1, w2) = global_pair(&spec.alphas)?;
            merge_linear(a1, a2, w1, w2)
        }
        MergeMethod::Ties => {
            let (w1, w2) = global_pair(&spec.alphas)?;
            merge_ties(a1, a2, spec.density.expect("validated"), w1, w2)
        }
        MergeMethod::Dare => {
            let (w1, w2) = global_pair(&spec.alphas)?;
            merge_dare(a1, a2, spec.density.expect("validated"), spec.seed.expect("validated"), w1, w2, spec.dare_b_only)
        }
        MergeMethod::Slerp => merge_slerp(a1, a2, spec.t.expect("validated")),
    }
}

pub(crate) fn global_pair(alphas: &Alphas) -> Result<(f64, f64)> {
    match alphas {
        Alphas::Global(v) if v.len() == 2 => Ok((v[0], v[1])),
        Alphas::Global(v) => Err(Error::Merge(format!("expected two merge weights, got {}", v.len()))),
        Alphas::PerLayer(_) => Err(Error::Merge("linear-family merges use global weights".into())),
    }
}

/// Checks that all adapters cover the same layers with matching base dims.
pub(crate) fn check_compatible(adapters: &[&LoraAdapter]) -> Result<()> {
    let Some(first) = adapters.first() else {
        return Err(Error::Merge("no adapters to merge".into()));
    };
    let ids = first.layer_ids();
    for other in &adapters[1..] {
        let other_ids = other.layer_ids();
        if other_ids != ids {
            let diff: BTreeSet<_> = ids.symmetric_difference(&other_ids).collect();
            return Err(Error::Merge(format!("layer sets differ; symmetric difference: {diff:?}")));
        }
        for id in &ids {
            let (p, q) = (&first.layers[*id], &other.layers[*id]);
            if p.d_in() != q.d_in() || p.d_out() != q.d_out() {
                return Err(Error::Merge(format!(
                    "layer {id}: base dims [{} x {}] vs [{} x {}]",
                    p.d_out(),
                    p.d_in(),
                    q.d_out(),
                    q.d_in()
                )));
            }
        }
    }
    Ok(())
}

pub(crate) fn provenance(spec: MergeSpec, adapters: &[&LoraAdapter], notes: Vec<String>) -> Provenance {
    let sources = adapters.iter().enumerate().map(|(i, a)| format!("adapter{}:r={}", i + 1, a.config.r)).collect();
    Provenance { spec, sources, notes }
}

/// Factor pairs with `sqrt(scaling)` folded into both factors so that
/// `B'A'` is the scaled update; ranks padded to the larger of the two.
pub(crate) fn folded_pairs(
    a1: &LoraAdapter,
    a2: &LoraAdapter,
    notes: &mut Vec<String>,
) -> Result<BTreeMap<String, (LoraPair, LoraPair)>> {
    check_compatible(&[a1, a2])?;
    let r = a1.config.r.max(a2.config.r);
    if a1.config.r != a2.config.r {
        notes.push(format!("ranks {} and {} zero-padded to {r}", a1.config.r, a2.config.r));
    }
    let (s1, s2) = (a1.scaling().sqrt(), a2.scaling().sqrt());
    let fold = |p: &LoraPair, s: f64| -> Result<LoraPair> {
        let p = p.padded_to_rank(r)?;
        Ok(LoraPair { a: p.a.scale(s), b: p.b.scale(s) })
    };
    a1.layers.iter().map(|(id, p1)| Ok((id.clone(), (fold(p1, s1)?, fold(&a2.layers[id], s2)?)))).collect()
}
