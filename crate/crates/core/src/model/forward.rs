use std::collections::{BTreeMap, HashMap};

use super::tokenizer::{BOS, EOS, PAD};
use super::{coef_name, lora_name, router_name, Attachment, ToyModel, Trainable};
use crate::adapter::{layer_id, LoraAdapter};
use crate::autodiff::{AttnGeom, Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Right-padded next-token batch: `n_seq` rows of `seq_len` positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub n_seq: usize,
    pub seq_len: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<f64>,
}

impl Batch {
    /// Sequences `BOS prompt answer EOS`; the loss covers the answer tokens
    /// and the closing `EOS`.
    pub fn from_pairs(pairs: &[(Vec<usize>, Vec<usize>)]) -> Result<Self> {
        let rows: Vec<(Vec<usize>, usize)> = pairs
            .iter()
            .map(|(p, a)| {
                let mut s = Vec::with_capacity(p.len() + a.len() + 2);
                s.push(BOS);
                s.extend_from_slice(p);
                s.extend_from_slice(a);
                s.push(EOS);
                (s, p.len() + 1)
            })
            .collect();
        Self::from_sequences(&rows)
    }

    /// `(tokens, first supervised index)`: targets at indices
    /// `>= first` contribute to the loss.
    pub fn from_sequences(rows: &[(Vec<usize>, usize)]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::DegenerateBatch);
        }
        let seq_len = rows.iter().map(|(s, _)| s.len().saturating_sub(1)).max().unwrap_or(0).max(1);
        let n_seq = rows.len();
        let mut inputs = vec![PAD; n_seq * seq_len];
        let mut targets = vec![PAD; n_seq * seq_len];
        let mut mask = vec![0.0; n_seq * seq_len];
        for (r, (s, first)) in rows.iter().enumerate() {
            for t in 0..s.len().saturating_sub(1) {
                inputs[r * seq_len + t] = s[t];
                targets[r * seq_len + t] = s[t + 1];
                if t + 1 >= *first {
                    mask[r * seq_len + t] = 1.0;
                }
            }
        }
        Ok(Self { n_seq, seq_len, inputs, targets, mask })
    }

    /// Inference batch over token prefixes, right-padded.
    pub fn from_prefixes(prefixes: &[Vec<usize>]) -> Result<Self> {
        let seq_len = prefixes.iter().map(Vec::len).max().unwrap_or(0);
        if seq_len == 0 {
            return Err(Error::contract("empty inference batch"));
        }
        let mut inputs = vec![PAD; prefixes.len() * seq_len];
        for (r, p) in prefixes.iter().enumerate() {
            inputs[r * seq_len..r * seq_len + p.len()].copy_from_slice(p);
        }
        let n = inputs.len();
        Ok(Self { n_seq: prefixes.len(), seq_len, inputs, targets: vec![PAD; n], mask: vec![0.0; n] })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ForwardOptions {
    /// `(rate, seed)` for dropout on the adapter input path.
    pub lora_dropout: Option<(f64, u64)>,
}

/// Binds model tensors to graph leaves, once per name.
struct Binder {
    trainable: Trainable,
    vars: HashMap<String, Var>,
    params: Vec<(String, Var)>,
}

impl Binder {
    fn bind(&mut self, g: &mut Graph, name: String, t: &Tensor, is_param: bool) -> Var {
        if let Some(&v) = self.vars.get(&name) {
            return v;
        }
        let v = g.leaf(t.clone(), is_param);
        if is_param {
            self.params.push((name.clone(), v));
        }
        self.vars.insert(name, v);
        v
    }

    fn base(&mut self, g: &mut Graph, name: String, t: &Tensor) -> Var {
        let p = self.trainable == Trainable::Base;
        self.bind(g, name, t, p)
    }
}

/// `softmax(xᵀ W_r)`, the per-token mixing weights of an MoE router.
pub fn moe_coefficients(router: &Tensor, x: &Tensor) -> Result<Vec<f64>> {
    let (d, k) = router.dims2()?;
    if x.numel() != d {
        return Err(Error::shape("moe_coefficients", router.shape(), x.shape()));
    }
    let mut logits: Vec<f64> = (0..k).map(|j| (0..d).fold(0.0, |acc, i| acc + x.data()[i] * router.data()[i * k + j])).collect();
    crate::autodiff::softmax_in_place(&mut logits);
    Ok(logits)
}

struct Pass<'a> {
    model: &'a ToyModel,
    binder: Binder,
    dropout: Option<(f64, Rng)>,
    routes: Option<Vec<(String, Var)>>,
}

impl Pass<'_> {
    /// Adapter path `s · B(A · drop(x))` for one adapter on one layer.
    fn lora_path(&mut self, g: &mut Graph, x: Var, a: &LoraAdapter, id: &str, trainable: bool, tag: &str) -> Result<Option<Var>> {
        let Some(pair) = a.layers.get(id) else {
            return Ok(None);
        };
        let x_in = match (&mut self.dropout, trainable) {
            (Some((p, rng)), true) if *p > 0.0 => {
                let keep = 1.0 - *p;
                let mask: Vec<f64> =
                    (0..g.value(x).numel()).map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 }).collect();
                let m = g.constant(Tensor::new(g.value(x).shape().to_vec(), mask)?);
                g.mul(x, m)?
            }
            _ => x,
        };
        let (an, bn) = if tag.is_empty() {
            (lora_name(id, 'A'), lora_name(id, 'B'))
        } else {
            (format!("{tag}.{id}.A"), format!("{tag}.{id}.B"))
        };
        let av = self.binder.bind(g, an, &pair.a, trainable);
        let bv = self.binder.bind(g, bn, &pair.b, trainable);
        let h = g.matmul_t(x_in, av)?;
        let o = g.matmul_t(h, bv)?;
        Ok(Some(g.scale(o, a.scaling())))
    }

    fn linear(&mut self, g: &mut Graph, x: Var, block: usize, module: &str) -> Result<Var> {
        let model = self.model;
        let id = layer_id(block, module);
        let w0 = model.base.blocks[block].module(module).expect("known module");
        let trainable = self.binder.trainable;
        let w = match &model.attachment {
            Attachment::Dense(d) if d.layers.contains_key(&id) => {
                let delta = &d.layers[&id];
                if trainable == Trainable::Base {
                    let wv = self.binder.base(g, format!("{id}.weight"), w0);
                    let dv = g.constant(delta.clone());
                    g.add(wv, dv)?
                } else {
                    g.constant(w0.add(delta)?)
                }
            }
            _ => self.binder.base(g, format!("{id}.weight"), w0),
        };
        let mut y = g.matmul_t(x, w)?;
        match &model.attachment {
            Attachment::None | Attachment::Dense(_) => {}
            Attachment::Adapter(a) => {
                if let Some(o) = self.lora_path(g, x, a, &id, trainable == Trainable::Lora, "")? {
                    y = g.add(y, o)?;
                }
            }
            Attachment::Cat(c) => {
                if let Some((key, row)) = c.coefficients_for(&id) {
                    let coef = self.binder.bind(g, coef_name(&key), row, trainable == Trainable::Coefficients);
                    for (k, a) in c.adapters.iter().enumerate() {
                        if let Some(o) = self.lora_path(g, x, a, &id, false, &format!("cat{k}"))? {
                            let alpha = g.select_col(coef, k)?;
                            let o = g.scale_by(o, alpha)?;
                            y = g.add(y, o)?;
                        }
                    }
                }
            }
            Attachment::Moe(m) => {
                if let Some(router) = m.routers.get(&id) {
                    let r = self.binder.bind(g, router_name(&id), router, trainable == Trainable::Routers);
                    let h = g.matmul(x, r)?;
                    let probs = g.softmax(h)?;
                    if let Some(routes) = &mut self.routes {
                        routes.push((id.clone(), probs));
                    }
                    for (k, a) in m.adapters.iter().enumerate() {
                        if let Some(o) = self.lora_path(g, x, a, &id, false, &format!("moe{k}"))? {
                            let col = g.select_col(probs, k)?;
                            let o = g.scale_rows(o, col)?;
                            y = g.add(y, o)?;
                        }
                    }
                }
            }
        }
        Ok(y)
    }

    fn run(&mut self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        let model = self.model;
        let cfg = &model.config;
        if batch.seq_len > cfg.max_seq_len {
            return Err(Error::contract(format!("sequence length {} exceeds max_seq_len {}", batch.seq_len, cfg.max_seq_len)));
        }
        let base = &model.base;
        let tok = self.binder.base(g, "tok_emb.weight".into(), &base.tok_emb);
        let pos = self.binder.base(g, "pos_emb.weight".into(), &base.pos_emb);
        let positions: Vec<usize> = (0..batch.n_seq).flat_map(|_| 0..batch.seq_len).collect();
        let te = g.embedding(tok, &batch.inputs)?;
        let pe = g.embedding(pos, &positions)?;
        let mut x = g.add(te, pe)?;
        let geom = AttnGeom { n_seq: batch.n_seq, seq_len: batch.seq_len, n_heads: cfg.n_heads };
        for (i, blk) in base.blocks.iter().enumerate() {
            let g1 = self.binder.base(g, format!("layers.{i}.ln1.weight"), &blk.ln1_gamma);
            let b1 = self.binder.base(g, format!("layers.{i}.ln1.bias"), &blk.ln1_beta);
            let h = g.layernorm(x, g1, b1)?;
            let q = self.linear(g, h, i, "q_proj")?;
            let k = self.linear(g, h, i, "k_proj")?;
            let v = self.linear(g, h, i, "v_proj")?;
            let att = g.causal_attention(q, k, v, geom)?;
            let o = self.linear(g, att, i, "o_proj")?;
            x = g.add(x, o)?;
            let g2 = self.binder.base(g, format!("layers.{i}.ln2.weight"), &blk.ln2_gamma);
            let b2 = self.binder.base(g, format!("layers.{i}.ln2.bias"), &blk.ln2_beta);
            let h = g.layernorm(x, g2, b2)?;
            let up = self.linear(g, h, i, "up_proj")?;
            let act = g.gelu(up);
            let down = self.linear(g, act, i, "down_proj")?;
            x = g.add(x, down)?;
        }
        let gf = self.binder.base(g, "norm.weight".into(), &base.lnf_gamma);
        let bf = self.binder.base(g, "norm.bias".into(), &base.lnf_beta);
        let h = g.layernorm(x, gf, bf)?;
        let head = self.binder.base(g, "lm_head.weight".into(), &base.lm_head);
        g.matmul_t(h, head)
    }
}

impl ToyModel {
    /// Builds the forward pass on `g`; returns the logits node and the
    /// trainable leaves by name.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        batch: &Batch,
        trainable: Trainable,
        opts: &ForwardOptions,
    ) -> Result<(Var, Vec<(String, Var)>)> {
        if let Some(&bad) = batch.inputs.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::contract(format!("token id {bad} out of range for vocab {}", self.config.vocab_size)));
        }
        let mut pass = Pass {
            model: self,
            binder: Binder { trainable, vars: HashMap::new(), params: Vec::new() },
            dropout: opts.lora_dropout.map(|(p, seed)| (p, Rng::seed(seed))),
            routes: None,
        };
        let logits = pass.run(g, batch)?;
        Ok((logits, pass.binder.params))
    }

    /// Per-layer MoE mixing weights `[n_seq·seq_len × k]` for every position
    /// of `batch` (padding included). Empty unless an MoE bundle is attached.
    pub fn moe_routing(&self, batch: &Batch) -> Result<BTreeMap<String, Tensor>> {
        let mut g = Graph::new();
        let mut pass = Pass {
            model: self,
            binder: Binder { trainable: Trainable::None, vars: HashMap::new(), params: Vec::new() },
            dropout: None,
            routes: Some(Vec::new()),
        };
        pass.run(&mut g, batch)?;
        Ok(pass.routes.unwrap_or_default().into_iter().map(|(id, v)| (id, g.value(v).clone())).collect())
    }

    /// Logits `[n_seq·seq_len × vocab]`.
    pub fn logits(&self, batch: &Batch) -> Result<Tensor> {
        let mut g = Graph::new();
        let (logits, _) = self.forward_graph(&mut g, batch, Trainable::None, &ForwardOptions::default())?;
        let out = g.value(logits).clone();
        out.ensure_finite("logits")?;
        Ok(out)
    }

    /// Logits for a single unpadded token sequence, `[len × vocab]`.
    pub fn forward(&self, tokens: &[usize]) -> Result<Tensor> {
        self.logits(&Batch::from_prefixes(&[tokens.to_vec()])?)
    }

    /// Mean cross-entropy over the supervised positions.
    pub fn masked_loss(&self, batch: &Batch) -> Result<f64> {
        let mut g = Graph::new();
        let (logits, _) = self.forward_graph(&mut g, batch, Trainable::None, &ForwardOptions::default())?;
        let loss = g.masked_cross_entropy(logits, &batch.targets, &batch.mask)?;
        Ok(g.value(loss).data()[0])
    }

    /// Loss and gradients for the `which` parameters, keyed by parameter name.
    pub fn loss_and_grads(
        &self,
        batch: &Batch,
        which: Trainable,
        opts: &ForwardOptions,
    ) -> Result<(f64, BTreeMap<String, Tensor>)> {
        let mut g = Graph::new();
        let (logits, params) = self.forward_graph(&mut g, batch, which, opts)?;
        let loss = g.masked_cross_entropy(logits, &batch.targets, &batch.mask)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Divergence(format!("loss is {value}")));
        }
        let mut grads = g.backward(loss)?;
        let mut out = BTreeMap::new();
        for (name, v) in params {
            let grad = grads.take(v).unwrap_or_else(|| Tensor::zeros(g.value(v).shape().to_vec()));
            out.insert(name, grad);
        }
        Ok((value, out))
    }
}
