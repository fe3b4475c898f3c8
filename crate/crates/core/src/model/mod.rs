//! A small decoder-only transformer with adapter injection.
//!
//! Block layout (pre-norm): `x += o_proj(attn(q_proj, k_proj, v_proj)(ln1(x)))`,
//! then `x += down_proj(gelu(up_proj(ln2(x))))`; a final layer norm feeds an
//! untied `lm_head`. Linear weights are stored `[d_out × d_in]` without
//! biases. Positions use learned absolute embeddings.

mod forward;
pub(crate) mod generate;
pub mod tokenizer;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{layer_id, parse_layer_id, LoraAdapter, LoraConfig, LoraPair, DEFAULT_TARGET_MODULES};
use crate::container::TensorFile;
use crate::error::{Error, FormatError, Result};
use crate::merge::{Alphas, MergedDelta};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub use forward::{moe_coefficients, Batch, ForwardOptions};
pub use generate::GenOptions;

pub const CONFIG_FILE: &str = "toy_config.json";
pub const WEIGHTS_FILE: &str = "model.safetensors";
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self { vocab_size: tokenizer::VOCAB_SIZE, d_model: 64, n_layers: 2, n_heads: 2, d_ff: 128, max_seq_len: 128 }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.vocab_size, self.d_model, self.n_layers, self.n_heads, self.d_ff, self.max_seq_len];
        if dims.contains(&0) {
            return Err(Error::contract(format!("toy config has a zero dimension: {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::contract(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads)));
        }
        Ok(())
    }

    /// `(d_out, d_in)` of a target module.
    pub fn module_dims(&self, module: &str) -> Option<(usize, usize)> {
        match module {
            "q_proj" | "k_proj" | "v_proj" | "o_proj" => Some((self.d_model, self.d_model)),
            "up_proj" => Some((self.d_ff, self.d_model)),
            "down_proj" => Some((self.d_model, self.d_ff)),
            _ => None,
        }
    }

    /// Every adapter-eligible layer id, block-major.
    pub fn target_layers(&self, modules: &[String]) -> Vec<String> {
        (0..self.n_layers).flat_map(|i| modules.iter().map(move |m| layer_id(i, m))).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub q_proj: Tensor,
    pub k_proj: Tensor,
    pub v_proj: Tensor,
    pub o_proj: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub up_proj: Tensor,
    pub down_proj: Tensor,
}

impl Block {
    fn fields(&self) -> [(&'static str, &Tensor); 10] {
        [
            ("ln1.weight", &self.ln1_gamma),
            ("ln1.bias", &self.ln1_beta),
            ("q_proj.weight", &self.q_proj),
            ("k_proj.weight", &self.k_proj),
            ("v_proj.weight", &self.v_proj),
            ("o_proj.weight", &self.o_proj),
            ("ln2.weight", &self.ln2_gamma),
            ("ln2.bias", &self.ln2_beta),
            ("up_proj.weight", &self.up_proj),
            ("down_proj.weight", &self.down_proj),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut Tensor); 10] {
        [
            ("ln1.weight", &mut self.ln1_gamma),
            ("ln1.bias", &mut self.ln1_beta),
            ("q_proj.weight", &mut self.q_proj),
            ("k_proj.weight", &mut self.k_proj),
            ("v_proj.weight", &mut self.v_proj),
            ("o_proj.weight", &mut self.o_proj),
            ("ln2.weight", &mut self.ln2_gamma),
            ("ln2.bias", &mut self.ln2_beta),
            ("up_proj.weight", &mut self.up_proj),
            ("down_proj.weight", &mut self.down_proj),
        ]
    }

    pub fn module(&self, name: &str) -> Option<&Tensor> {
        Some(match name {
            "q_proj" => &self.q_proj,
            "k_proj" => &self.k_proj,
            "v_proj" => &self.v_proj,
            "o_proj" => &self.o_proj,
            "up_proj" => &self.up_proj,
            "down_proj" => &self.down_proj,
            _ => return None,
        })
    }

    fn module_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        Some(match name {
            "q_proj" => &mut self.q_proj,
            "k_proj" => &mut self.k_proj,
            "v_proj" => &mut self.v_proj,
            "o_proj" => &mut self.o_proj,
            "up_proj" => &mut self.up_proj,
            "down_proj" => &mut self.down_proj,
            _ => return None,
        })
    }
}

/// The frozen (or pretraining) weights `W₀`.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseWeights {
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<Block>,
    pub lnf_gamma: Tensor,
    pub lnf_beta: Tensor,
    pub lm_head: Tensor,
}

impl BaseWeights {
    pub fn init(config: &ToyConfig, rng: &mut Rng) -> Self {
        let (d, f) = (config.d_model, config.d_ff);
        let mut randn = |shape: [usize; 2]| Tensor::randn(shape.to_vec(), INIT_STD, rng);
        let tok_emb = randn([config.vocab_size, d]);
        let pos_emb = randn([config.max_seq_len, d]);
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                ln1_gamma: Tensor::full([d], 1.0),
                ln1_beta: Tensor::zeros([d]),
                q_proj: randn([d, d]),
                k_proj: randn([d, d]),
                v_proj: randn([d, d]),
                o_proj: randn([d, d]),
                ln2_gamma: Tensor::full([d], 1.0),
                ln2_beta: Tensor::zeros([d]),
                up_proj: randn([f, d]),
                down_proj: randn([d, f]),
            })
            .collect();
        let lm_head = randn([config.vocab_size, d]);
        Self { tok_emb, pos_emb, blocks, lnf_gamma: Tensor::full([d], 1.0), lnf_beta: Tensor::zeros([d]), lm_head }
    }

    /// `(name, tensor)` for every weight, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("tok_emb.weight".to_string(), &self.tok_emb), ("pos_emb.weight".to_string(), &self.pos_emb)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.fields().into_iter().map(|(n, t)| (format!("layers.{i}.{n}"), t)));
        }
        out.push(("norm.weight".into(), &self.lnf_gamma));
        out.push(("norm.bias".into(), &self.lnf_beta));
        out.push(("lm_head.weight".into(), &self.lm_head));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![("tok_emb.weight".to_string(), &mut self.tok_emb), ("pos_emb.weight".to_string(), &mut self.pos_emb)];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(b.fields_mut().into_iter().map(|(n, t)| (format!("layers.{i}.{n}"), t)));
        }
        out.push(("norm.weight".into(), &mut self.lnf_gamma));
        out.push(("norm.bias".into(), &mut self.lnf_beta));
        out.push(("lm_head.weight".into(), &mut self.lm_head));
        out
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// How learned mixing coefficients are shared inside a transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// One coefficient vector per block, shared by its target modules.
    Block,
    /// One coefficient vector per target module.
    #[default]
    Module,
}

impl Granularity {
    pub fn key(self, layer: &str) -> String {
        match self {
            Granularity::Module => layer.to_string(),
            Granularity::Block => parse_layer_id(layer).map_or_else(|| layer.to_string(), |(i, _)| format!("layers.{i}")),
        }
    }
}

/// Frozen adapters combined per layer as `Σₖ αₖ · sₖ · Bₖ(Aₖx)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CatBundle {
    pub adapters: Vec<LoraAdapter>,
    /// `[1 × k]` coefficient rows keyed by [`Granularity::key`].
    pub coefficients: BTreeMap<String, Tensor>,
    pub granularity: Granularity,
}

impl CatBundle {
    /// Coefficients initialized to `init` everywhere.
    pub fn new(adapters: Vec<LoraAdapter>, init: f64, granularity: Granularity) -> Result<Self> {
        let k = adapters.len();
        let first = adapters.first().ok_or_else(|| Error::contract("CAT bundle needs at least one adapter"))?;
        let keys: std::collections::BTreeSet<String> = first.layers.keys().map(|id| granularity.key(id)).collect();
        let coefficients = keys.into_iter().map(|key| (key, Tensor::full([1, k], init))).collect();
        Ok(Self { adapters, coefficients, granularity })
    }

    pub fn from_alphas(adapters: Vec<LoraAdapter>, alphas: &Alphas, granularity: Granularity) -> Result<Self> {
        let mut bundle = Self::new(adapters, 0.0, granularity)?;
        for (key, row) in bundle.coefficients.iter_mut() {
            let w = alphas.for_layer(key).or_else(|_| match alphas {
                Alphas::PerLayer(map) => map
                    .iter()
                    .find(|(id, _)| granularity.key(id) == *key)
                    .map(|(_, v)| v.as_slice())
                    .ok_or_else(|| Error::Merge(format!("no merge coefficients for {key}"))),
                Alphas::Global(v) => Ok(v.as_slice()),
            })?;
            if w.len() != row.numel() {
                return Err(Error::Merge(format!("{key}: {} coefficients for {} adapters", w.len(), row.numel())));
            }
            *row = Tensor::new(vec![1, w.len()], w.to_vec())?;
        }
        Ok(bundle)
    }

    pub fn alphas(&self) -> Alphas {
        Alphas::PerLayer(self.coefficients.iter().map(|(k, t)| (k.clone(), t.data().to_vec())).collect())
    }

    fn coefficients_for(&self, layer: &str) -> Option<(String, &Tensor)> {
        let key = self.granularity.key(layer);
        self.coefficients.get(&key).map(|t| (key, t))
    }
}

/// Frozen adapters mixed per token by a softmax router `W_r: [d_in × k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeBundle {
    pub adapters: Vec<LoraAdapter>,
    pub routers: BTreeMap<String, Tensor>,
}

impl MoeBundle {
    /// Zero routers, i.e. uniform mixing.
    pub fn new(adapters: Vec<LoraAdapter>) -> Result<Self> {
        let k = adapters.len();
        let first = adapters.first().ok_or_else(|| Error::contract("MoE bundle needs at least one adapter"))?;
        let routers = first.layers.iter().map(|(id, p)| (id.clone(), Tensor::zeros([p.d_in(), k]))).collect();
        Ok(Self { adapters, routers })
    }
}

/// What, if anything, sits on top of `W₀`.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Attachment {
    #[default]
    None,
    Adapter(LoraAdapter),
    Dense(MergedDelta),
    Cat(CatBundle),
    Moe(MoeBundle),
}

/// Which tensors receive gradients in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    None,
    Base,
    Lora,
    Coefficients,
    Routers,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub config: ToyConfig,
    pub base: BaseWeights,
    pub attachment: Attachment,
}

impl ToyModel {
    pub fn init(config: ToyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::seed(seed);
        let base = BaseWeights::init(&config, &mut rng);
        Ok(Self { config, base, attachment: Attachment::None })
    }

    /// Replaces the attachment after checking it fits the model; returns the
    /// previous one.
    pub fn attach(&mut self, attachment: Attachment) -> Result<Attachment> {
        self.check_attachment(&attachment)?;
        Ok(std::mem::replace(&mut self.attachment, attachment))
    }

    pub fn detach(&mut self) -> Attachment {
        std::mem::take(&mut self.attachment)
    }

    pub fn with_attachment(&self, attachment: Attachment) -> Result<Self> {
        let mut m = Self { config: self.config.clone(), base: self.base.clone(), attachment: Attachment::None };
        m.attach(attachment)?;
        Ok(m)
    }

    fn check_layer(&self, id: &str, d_out: usize, d_in: usize) -> Result<()> {
        let (block, module) = parse_layer_id(id).ok_or_else(|| Error::contract(format!("malformed layer id {id:?}")))?;
        if block >= self.config.n_layers || !DEFAULT_TARGET_MODULES.contains(&module) {
            return Err(Error::contract(format!("layer {id} is not a target layer of this model")));
        }
        let dims = self.config.module_dims(module).expect("target module");
        if dims != (d_out, d_in) {
            return Err(Error::contract(format!(
                "layer {id}: update is [{d_out} x {d_in}] but the weight is [{} x {}]",
                dims.0, dims.1
            )));
        }
        Ok(())
    }

    fn check_adapter(&self, a: &LoraAdapter) -> Result<()> {
        a.validate()?;
        a.layers.iter().try_for_each(|(id, p)| self.check_layer(id, p.d_out(), p.d_in()))
    }

    fn check_attachment(&self, attachment: &Attachment) -> Result<()> {
        match attachment {
            Attachment::None => Ok(()),
            Attachment::Adapter(a) => self.check_adapter(a),
            Attachment::Dense(d) => d.layers.iter().try_for_each(|(id, t)| {
                let (o, i) = t.dims2()?;
                self.check_layer(id, o, i)
            }),
            Attachment::Cat(c) => {
                c.adapters.iter().try_for_each(|a| self.check_adapter(a))?;
                let refs: Vec<&LoraAdapter> = c.adapters.iter().collect();
                crate::merge::check_compatible(&refs)?;
                for id in c.adapters[0].layers.keys() {
                    let (_, row) = c
                        .coefficients_for(id)
                        .ok_or_else(|| Error::contract(format!("CAT bundle lacks coefficients for {id}")))?;
                    if row.shape() != [1, c.adapters.len()] {
                        return Err(Error::shape("cat coefficients", &[1, c.adapters.len()], row.shape()));
                    }
                }
                Ok(())
            }
            Attachment::Moe(m) => {
                m.adapters.iter().try_for_each(|a| self.check_adapter(a))?;
                let refs: Vec<&LoraAdapter> = m.adapters.iter().collect();
                crate::merge::check_compatible(&refs)?;
                for (id, p) in &m.adapters[0].layers {
                    let r = m.routers.get(id).ok_or_else(|| Error::contract(format!("MoE bundle lacks a router for {id}")))?;
                    if r.shape() != [p.d_in(), m.adapters.len()] {
                        return Err(Error::shape("moe router", &[p.d_in(), m.adapters.len()], r.shape()));
                    }
                }
                Ok(())
            }
        }
    }

    /// A fresh adapter (`A ~ N(0, 0.02)`, `B = 0`) on this model's target layers.
    pub fn new_adapter(&self, config: LoraConfig, seed: u64) -> Result<LoraAdapter> {
        config.validate()?;
        let mut rng = Rng::seed(seed);
        let mut adapter = LoraAdapter::new(config.clone());
        for id in self.config.target_layers(&config.target_modules) {
            let module = parse_layer_id(&id).expect("well-formed").1;
            let (d_out, d_in) =
                self.config.module_dims(module).ok_or_else(|| Error::contract(format!("unknown target module {module:?}")))?;
            adapter.layers.insert(id, LoraPair::init(config.r, d_in, d_out, INIT_STD, &mut rng));
        }
        adapter.validate()?;
        Ok(adapter)
    }

    /// Dense per-layer update of the current attachment, where it has one
    /// independent of the input (MoE has none).
    pub fn attachment_deltas(&self) -> Result<BTreeMap<String, Tensor>> {
        match &self.attachment {
            Attachment::None => Ok(BTreeMap::new()),
            Attachment::Adapter(a) => a.deltas(),
            Attachment::Dense(d) => Ok(d.layers.clone()),
            Attachment::Cat(c) => {
                let refs: Vec<&LoraAdapter> = c.adapters.iter().collect();
                Ok(crate::merge::merge_cat(&refs, &c.alphas())?.layers)
            }
            Attachment::Moe(_) => Err(Error::contract("MoE updates depend on the input and have no dense form")),
        }
    }

    /// Adds the attachment's dense update into `W₀` and detaches it.
    pub fn fold_attachment(&mut self) -> Result<()> {
        let deltas = self.attachment_deltas()?;
        for (id, d) in deltas {
            let (block, module) = parse_layer_id(&id).expect("validated on attach");
            let w = self.base.blocks[block].module_mut(module).expect("validated on attach");
            w.axpy(1.0, &d)?;
        }
        self.attachment = Attachment::None;
        Ok(())
    }

    /// `(name, tensor)` pairs updated by an optimizer for `which`.
    pub fn params(&self, which: Trainable) -> Vec<(String, &Tensor)> {
        match (which, &self.attachment) {
            (Trainable::Base, _) => self.base.named(),
            (Trainable::Lora, Attachment::Adapter(a)) => lora_names(a).into_iter().zip(lora_tensors(a)).collect(),
            (Trainable::Coefficients, Attachment::Cat(c)) => c.coefficients.iter().map(|(k, t)| (coef_name(k), t)).collect(),
            (Trainable::Routers, Attachment::Moe(m)) => m.routers.iter().map(|(k, t)| (router_name(k), t)).collect(),
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self, which: Trainable) -> Vec<(String, &mut Tensor)> {
        match (which, &mut self.attachment) {
            (Trainable::Base, _) => self.base.named_mut(),
            (Trainable::Lora, Attachment::Adapter(a)) => {
                let names = lora_names(a);
                names.into_iter().zip(a.layers.values_mut().flat_map(|p| [&mut p.a, &mut p.b])).collect()
            }
            (Trainable::Coefficients, Attachment::Cat(c)) => c.coefficients.iter_mut().map(|(k, t)| (coef_name(k), t)).collect(),
            (Trainable::Routers, Attachment::Moe(m)) => m.routers.iter_mut().map(|(k, t)| (router_name(k), t)).collect(),
            _ => Vec::new(),
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut file = TensorFile::new();
        for (name, t) in self.base.named() {
            file.insert(name, t.clone());
        }
        file.metadata.insert("toy_config".into(), serde_json::to_string(&self.config)?);
        file.write(dir.join(WEIGHTS_FILE))?;
        fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(&self.config)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let config: ToyConfig =
            serde_json::from_str(&fs::read_to_string(dir.join(CONFIG_FILE))?).map_err(|e| FormatError::Config(e.to_string()))?;
        config.validate()?;
        let mut file = TensorFile::read(dir.join(WEIGHTS_FILE))?;
        let mut base = BaseWeights::init(&config, &mut Rng::seed(0));
        for (name, slot) in base.named_mut() {
            let t = file
                .tensors
                .remove(&name)
                .ok_or_else(|| FormatError::Config(format!("model checkpoint lacks tensor {name:?}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::shape("load model", slot.shape(), t.shape()));
            }
            *slot = t;
        }
        if let Some(name) = file.tensors.keys().next() {
            return Err(FormatError::Config(format!("unexpected tensor {name:?} in model checkpoint")).into());
        }
        Ok(Self { config, base, attachment: Attachment::None })
    }
}

fn lora_names(a: &LoraAdapter) -> Vec<String> {
    a.layers.keys().flat_map(|id| [format!("lora.{id}.A"), format!("lora.{id}.B")]).collect()
}

fn lora_tensors(a: &LoraAdapter) -> Vec<&Tensor> {
    a.layers.values().flat_map(|p| [&p.a, &p.b]).collect()
}

pub(crate) fn coef_name(key: &str) -> String {
    format!("cat.{key}")
}

pub(crate) fn router_name(key: &str) -> String {
    format!("router.{key}")
}

pub(crate) fn lora_name(id: &str, factor: char) -> String {
    format!("lora.{id}.{factor}")
}

#[cfg(test)]
mod tests;
