//! Low-rank adapters and their checkpoint form.
//!
//! A [`LoraPair`] stores `A: [r × d_in]` and `B: [d_out × r]`; its update is
//! `scaling · B · A` with `scaling = lora_alpha / r`. Checkpoint keys follow
//! `base_model.model.layers.{i}.{module}.lora_{A,B}.weight`, and the config
//! lives in an `adapter_config.json` sidecar (mirrored into the header
//! metadata so a single file is self-describing).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::container::TensorFile;
use crate::error::{Error, FormatError, Result};
use crate::tensor::{DType, Tensor};
use crate::Rng;

pub const KEY_PREFIX: &str = "base_model.model.";
pub const CONFIG_FILE: &str = "adapter_config.json";
pub const WEIGHTS_FILE: &str = "adapter_model.safetensors";
const CONFIG_METADATA_KEY: &str = "adapter_config";

/// Projections that carry adapters, in the order the toy model applies them.
pub const DEFAULT_TARGET_MODULES: [&str; 5] = ["q_proj", "v_proj", "k_proj", "up_proj", "down_proj"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub r: usize,
    pub lora_alpha: f64,
    pub lora_dropout: f64,
    pub target_modules: Vec<String>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            r: 32,
            lora_alpha: 64.0,
            lora_dropout: 0.05,
            target_modules: DEFAULT_TARGET_MODULES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl LoraConfig {
    /// Config at rank `r` keeping the default `alpha = 2r` ratio.
    pub fn with_rank(r: usize) -> Self {
        Self { r, lora_alpha: 2.0 * r as f64, ..Self::default() }
    }

    pub fn scaling(&self) -> f64 {
        self.lora_alpha / self.r as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0 {
            return Err(Error::contract("lora rank must be positive"));
        }
        let s = self.scaling();
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::contract(format!("lora scaling {s} must be finite and positive")));
        }
        if !(0.0..1.0).contains(&self.lora_dropout) {
            return Err(Error::contract(format!("lora dropout {} outside [0, 1)", self.lora_dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    /// `[r × d_in]`
    pub a: Tensor,
    /// `[d_out × r]`
    pub b: Tensor,
}

impl LoraPair {
    pub fn new(a: Tensor, b: Tensor) -> Result<Self> {
        let (r, _) = a.dims2()?;
        let (_, rb) = b.dims2()?;
        if a.shape().len() != 2 || b.shape().len() != 2 || r != rb {
            return Err(Error::shape("LoraPair", a.shape(), b.shape()));
        }
        Ok(Self { a, b })
    }

    /// Standard initialization: `A ~ N(0, std)`, `B = 0`.
    pub fn init(rank: usize, d_in: usize, d_out: usize, std: f64, rng: &mut Rng) -> Self {
        Self { a: Tensor::randn(vec![rank, d_in], std, rng), b: Tensor::zeros(vec![d_out, rank]) }
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn d_in(&self) -> usize {
        self.a.cols()
    }

    pub fn d_out(&self) -> usize {
        self.b.rows()
    }

    pub fn num_params(&self) -> usize {
        self.a.numel() + self.b.numel()
    }

    /// Zero-pads both factors to rank `r`.
    pub fn padded_to_rank(&self, r: usize) -> Result<Self> {
        Ok(Self { a: self.a.padded(r, self.d_in())?, b: self.b.padded(self.d_out(), r)? })
    }
}

/// `scaling · B · A`, shape `[d_out × d_in]`.
pub fn delta(pair: &LoraPair, scaling: f64) -> Result<Tensor> {
    Ok(pair.b.matmul(&pair.a)?.scale(scaling))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub config: LoraConfig,
    pub layers: BTreeMap<String, LoraPair>,
    /// Tensors found in a checkpoint that are not adapter factors. Kept for
    /// round-tripping, ignored by merging.
    pub extra: BTreeMap<String, Tensor>,
}

/// Splits `layers.{i}.{module}` into `(i, module)`.
pub fn parse_layer_id(id: &str) -> Option<(usize, &str)> {
    let rest = id.strip_prefix("layers.")?;
    let (idx, module) = rest.split_once('.')?;
    Some((idx.parse().ok()?, module))
}

pub fn layer_id(block: usize, module: &str) -> String {
    format!("layers.{block}.{module}")
}

impl LoraAdapter {
    pub fn new(config: LoraConfig) -> Self {
        Self { config, layers: BTreeMap::new(), extra: BTreeMap::new() }
    }

    pub fn scaling(&self) -> f64 {
        self.config.scaling()
    }

    pub fn num_params(&self) -> usize {
        self.layers.values().map(LoraPair::num_params).sum()
    }

    pub fn layer_ids(&self) -> BTreeSet<&str> {
        self.layers.keys().map(String::as_str).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        for (id, pair) in &self.layers {
            if pair.rank() != self.config.r {
                return Err(Error::contract(format!(
                    "layer {id}: rank {} differs from config r = {}",
                    pair.rank(),
                    self.config.r
                )));
            }
            let module = parse_layer_id(id).map(|(_, m)| m);
            if !module.is_some_and(|m| self.config.target_modules.iter().any(|t| t == m)) {
                return Err(Error::contract(format!("layer {id} is not one of the target modules")));
            }
            if pair.rank() > pair.d_in().min(pair.d_out()) {
                return Err(Error::contract(format!("layer {id}: rank exceeds min(d_in, d_out)")));
            }
        }
        Ok(())
    }

    /// Dense update of every layer.
    pub fn deltas(&self) -> Result<BTreeMap<String, Tensor>> {
        let s = self.scaling();
        self.layers.iter().map(|(id, p)| Ok((id.clone(), delta(p, s)?))).collect()
    }

    /// An adapter with the same layout whose `B` factors are zero.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for pair in out.layers.values_mut() {
            pair.b = Tensor::zeros(pair.b.shape().to_vec());
        }
        out
    }

    /// Re-tags every factor with a storage dtype (values rounded to it).
    pub fn narrowed(mut self, dtype: DType) -> Self {
        for pair in self.layers.values_mut() {
            pair.a = pair.a.clone().narrowed(dtype);
            pair.b = pair.b.clone().narrowed(dtype);
        }
        self
    }

    pub fn to_tensor_file(&self) -> Result<TensorFile> {
        let mut file = TensorFile::new();
        for (id, pair) in &self.layers {
            file.insert(format!("{KEY_PREFIX}{id}.lora_A.weight"), pair.a.clone());
            file.insert(format!("{KEY_PREFIX}{id}.lora_B.weight"), pair.b.clone());
        }
        for (name, t) in &self.extra {
            file.insert(name.clone(), t.clone());
        }
        file.metadata.insert(CONFIG_METADATA_KEY.into(), serde_json::to_string(&self.config)?);
        Ok(file)
    }

    /// Builds an adapter from container contents; `config` overrides any
    /// config found in the metadata.
    pub fn from_tensor_file(file: TensorFile, config: Option<LoraConfig>) -> Result<Self> {
        let config = match config {
            Some(c) => c,
            None => {
                let raw = file
                    .metadata
                    .get(CONFIG_METADATA_KEY)
                    .ok_or_else(|| FormatError::Config(format!("no {CONFIG_FILE} sidecar and no embedded config")))?;
                serde_json::from_str(raw).map_err(|e| FormatError::Config(e.to_string()))?
            }
        };
        let mut a_parts = BTreeMap::new();
        let mut b_parts = BTreeMap::new();
        let mut extra = BTreeMap::new();
        for (name, t) in file.tensors {
            let id = name.strip_prefix(KEY_PREFIX);
            if let Some(id) = id.and_then(|s| s.strip_suffix(".lora_A.weight")) {
                a_parts.insert(id.to_string(), t);
            } else if let Some(id) = id.and_then(|s| s.strip_suffix(".lora_B.weight")) {
                b_parts.insert(id.to_string(), t);
            } else {
                warn!("checkpoint tensor {name:?} is not an adapter factor; preserving it unmerged");
                extra.insert(name, t);
            }
        }
        if let Some(orphan) = a_parts.keys().find(|k| !b_parts.contains_key(*k)) {
            return Err(FormatError::MissingPartner(format!("{KEY_PREFIX}{orphan}.lora_A.weight")).into());
        }
        if let Some(orphan) = b_parts.keys().find(|k| !a_parts.contains_key(*k)) {
            return Err(FormatError::MissingPartner(format!("{KEY_PREFIX}{orphan}.lora_B.weight")).into());
        }
        let mut layers = BTreeMap::new();
        for (id, a) in a_parts {
            let b = b_parts.remove(&id).expect("partner checked");
            layers.insert(id, LoraPair::new(a, b)?);
        }
        let adapter = Self { config, layers, extra };
        adapter.validate()?;
        Ok(adapter)
    }
}

/// Writes `adapter` to a container file at `path`.
pub fn write_checkpoint(adapter: &LoraAdapter, path: impl AsRef<Path>) -> Result<()> {
    adapter.validate()?;
    adapter.to_tensor_file()?.write(path)
}

/// Reads an adapter from a container file or from a directory holding
/// `adapter_model.safetensors` + `adapter_config.json`.
///
/// For a directory the sidecar config wins; for a bare file the embedded
/// config wins and a sibling `adapter_config.json` is only a fallback.
pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<LoraAdapter> {
    let path = path.as_ref();
    let (weights, sidecar, prefer_sidecar): (PathBuf, PathBuf, bool) = if path.is_dir() {
        (path.join(WEIGHTS_FILE), path.join(CONFIG_FILE), true)
    } else {
        (path.to_path_buf(), path.with_file_name(CONFIG_FILE), false)
    };
    let file = TensorFile::read(&weights)?;
    let embedded = file.metadata.contains_key(CONFIG_METADATA_KEY);
    let config = if sidecar.is_file() && (prefer_sidecar || !embedded) { Some(read_config(&sidecar)?) } else { None };
    LoraAdapter::from_tensor_file(file, config)
}

/// Writes the ecosystem directory layout: weights plus `adapter_config.json`.
pub fn save_adapter_dir(adapter: &LoraAdapter, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    write_checkpoint(adapter, dir.join(WEIGHTS_FILE))?;
    write_config(&adapter.config, dir.join(CONFIG_FILE))
}

pub fn read_config(path: impl AsRef<Path>) -> Result<LoraConfig> {
    let text = fs::read_to_string(path)?;
    let config: LoraConfig = serde_json::from_str(&text).map_err(|e| FormatError::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

pub fn write_config(config: &LoraConfig, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(config)? + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_config(r: usize) -> LoraConfig {
        LoraConfig { r, lora_alpha: r as f64, lora_dropout: 0.0, target_modules: vec!["q_proj".into()] }
    }

    #[test]
    fn delta_by_hand() {
        let pair =
            LoraPair::new(Tensor::from_rows(&[&[2.0, 3.0]]).unwrap(), Tensor::from_rows(&[&[1.0], &[0.0]]).unwrap()).unwrap();
        assert_eq!(delta(&pair, 1.0).unwrap().data(), &[2.0, 3.0, 0.0, 0.0]);
        assert_eq!(delta(&pair, 2.0).unwrap().data(), &[4.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn identity_factors_give_identity_delta() {
        let pair = LoraPair::new(Tensor::eye(3), Tensor::eye(3)).unwrap();
        assert_eq!(delta(&pair, 1.0).unwrap(), Tensor::eye(3));
    }

    #[test]
    fn default_config_matches_reported_recipe() {
        let c = LoraConfig::default();
        assert_eq!(c.r, 32);
        assert_eq!(c.lora_alpha, 64.0);
        assert_eq!(c.scaling(), 2.0);
        assert_eq!(c.lora_dropout, 0.05);
        assert_eq!(c.target_modules, ["q_proj", "v_proj", "k_proj", "up_proj", "down_proj"]);
    }

    #[test]
    fn config_sidecar_uses_ecosystem_field_names() {
        let json = serde_json::to_value(LoraConfig::default()).unwrap();
        let obj = json.as_object().unwrap();
        for key in ["r", "lora_alpha", "lora_dropout", "target_modules"] {
            assert!(obj.contains_key(key), "{key}");
        }
    }

    #[test]
    fn keys_follow_naming_convention() {
        let mut rng = Rng::seed(0);
        let mut adapter = LoraAdapter::new(unit_config(1));
        adapter.layers.insert("layers.3.q_proj".into(), LoraPair::init(1, 4, 4, 0.1, &mut rng));
        let file = adapter.to_tensor_file().unwrap();
        let names: Vec<_> = file.tensors.keys().cloned().collect();
        assert_eq!(names, ["base_model.model.layers.3.q_proj.lora_A.weight", "base_model.model.layers.3.q_proj.lora_B.weight"]);
    }

    #[test]
    fn missing_partner_is_reported() {
        let mut file = TensorFile::new();
        file.insert("base_model.model.layers.0.q_proj.lora_A.weight", Tensor::zeros(vec![1, 2]));
        let err = LoraAdapter::from_tensor_file(file, Some(unit_config(1))).unwrap_err();
        assert!(matches!(err, Error::Format(FormatError::MissingPartner(_))));
    }

    #[test]
    fn extra_tensors_survive_round_trip() {
        let mut rng = Rng::seed(2);
        let mut adapter = LoraAdapter::new(unit_config(1));
        adapter.layers.insert("layers.0.q_proj".into(), LoraPair::init(1, 3, 3, 0.1, &mut rng));
        adapter.extra.insert("base_model.model.score.weight".into(), Tensor::vector(vec![1.0, 2.0]));
        let back = LoraAdapter::from_tensor_file(adapter.to_tensor_file().unwrap(), None).unwrap();
        assert_eq!(back, adapter);
    }

    #[test]
    fn validation_rejects_foreign_modules_and_rank_drift() {
        let mut rng = Rng::seed(3);
        let mut adapter = LoraAdapter::new(unit_config(2));
        adapter.layers.insert("layers.0.o_proj".into(), LoraPair::init(2, 4, 4, 0.1, &mut rng));
        assert!(adapter.validate().is_err());
        let mut adapter = LoraAdapter::new(unit_config(2));
        adapter.layers.insert("layers.0.q_proj".into(), LoraPair::init(1, 4, 4, 0.1, &mut rng));
        assert!(adapter.validate().is_err());
    }

    #[test]
    fn layer_id_parsing() {
        assert_eq!(parse_layer_id("layers.12.up_proj"), Some((12, "up_proj")));
        assert_eq!(parse_layer_id("blocks.1.q"), None);
        assert_eq!(layer_id(1, "k_proj"), "layers.1.k_proj");
    }
}
