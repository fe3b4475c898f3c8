#![allow(dead_code)]

use skillmerge_core::autodiff::AttnGeom;
use skillmerge_core::model::{
    tokenizer, Attachment, Batch, CatBundle, ForwardOptions, Granularity, MoeBundle, ToyConfig, ToyModel, Trainable,
};
use skillmerge_core::{Graph, LoraAdapter, LoraConfig, Result, Rng, Tensor, Var};

const H: f64 = 1e-5;
const H_MODEL: f64 = 1e-4;

/// Relative error `‖g − fd‖ / max(‖g‖, ‖fd‖)`, 0 when both vanish.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-300 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

/// Checks `build` on `inputs` against central differences of
/// `⟨build(x), R⟩` for a fixed random `R`. Returns the worst relative error
/// over the inputs.
pub fn check_op(build: &Build, inputs: &[Tensor], seed: u64) -> f64 {
    let probe = |xs: &[Tensor]| -> (Graph, Var, Vec<Var>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
        let out = build(&mut g, &vars).expect("op builds");
        (g, out, vars)
    };
    let (g0, out0, _) = probe(inputs);
    let shape = g0.value(out0).shape().to_vec();
    let weights = Tensor::randn(shape, 1.0, &mut Rng::seed(seed));
    let objective = |xs: &[Tensor]| -> (Graph, Var, Vec<Var>) {
        let (mut g, out, vars) = probe(xs);
        let w = g.constant(weights.clone());
        let prod = g.mul(out, w).expect("same shape");
        let loss = g.sum(prod);
        (g, loss, vars)
    };
    let (g, loss, vars) = objective(inputs);
    let grads = g.backward(loss).expect("backward");
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let numeric: Vec<f64> = (0..inputs[i].numel())
            .map(|j| {
                let eval = |delta: f64| {
                    let mut xs = inputs.to_vec();
                    xs[i].data_mut()[j] += delta;
                    let (g, l, _) = objective(&xs);
                    g.value(l).data()[0]
                };
                (eval(H) - eval(-H)) / (2.0 * H)
            })
            .collect();
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: Box<Build>,
}

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// Values bounded away from 0 so the ReLU kink is never straddled.
fn away_from_zero(shape: &[usize], rng: &mut Rng) -> Tensor {
    randn(shape, rng).map(|v| if v.abs() < 0.1 { v.signum() * 0.1 + v } else { v })
}

/// One case per autodiff op, on random inputs drawn from `seed`.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = Rng::seed(seed);
    let r = &mut rng;
    let geom = AttnGeom { n_seq: 2, seq_len: 3, n_heads: 2 };
    let ids = vec![0, 3, 1, 3, 4];
    let targets = vec![1, 0, 4, 2, 3, 1];
    let mask = vec![1.0, 0.0, 1.0, 1.0, 0.5, 0.0];
    vec![
        OpCase {
            name: "matmul",
            inputs: vec![randn(&[3, 4], r), randn(&[4, 2], r)],
            build: Box::new(|g, v| g.matmul(v[0], v[1])),
        },
        OpCase {
            name: "matmul_t",
            inputs: vec![randn(&[3, 4], r), randn(&[5, 4], r)],
            build: Box::new(|g, v| g.matmul_t(v[0], v[1])),
        },
        OpCase { name: "add", inputs: vec![randn(&[2, 3], r), randn(&[2, 3], r)], build: Box::new(|g, v| g.add(v[0], v[1])) },
        OpCase {
            name: "add_row",
            inputs: vec![randn(&[3, 4], r), randn(&[4], r)],
            build: Box::new(|g, v| g.add_row(v[0], v[1])),
        },
        OpCase { name: "mul", inputs: vec![randn(&[2, 3], r), randn(&[2, 3], r)], build: Box::new(|g, v| g.mul(v[0], v[1])) },
        OpCase { name: "scale", inputs: vec![randn(&[2, 3], r)], build: Box::new(|g, v| Ok(g.scale(v[0], -1.7))) },
        OpCase {
            name: "scale_by",
            inputs: vec![randn(&[2, 3], r), randn(&[1], r)],
            build: Box::new(|g, v| g.scale_by(v[0], v[1])),
        },
        OpCase {
            name: "scale_rows",
            inputs: vec![randn(&[3, 2], r), randn(&[3, 1], r)],
            build: Box::new(|g, v| g.scale_rows(v[0], v[1])),
        },
        OpCase { name: "select_col", inputs: vec![randn(&[3, 4], r)], build: Box::new(|g, v| g.select_col(v[0], 2)) },
        OpCase { name: "relu", inputs: vec![away_from_zero(&[3, 4], r)], build: Box::new(|g, v| Ok(g.relu(v[0]))) },
        OpCase { name: "gelu", inputs: vec![randn(&[3, 4], r)], build: Box::new(|g, v| Ok(g.gelu(v[0]))) },
        OpCase { name: "softmax", inputs: vec![randn(&[3, 5], r)], build: Box::new(|g, v| g.softmax(v[0])) },
        OpCase {
            name: "layernorm",
            inputs: vec![randn(&[3, 5], r), randn(&[5], r), randn(&[5], r)],
            build: Box::new(|g, v| g.layernorm(v[0], v[1], v[2])),
        },
        OpCase { name: "embedding", inputs: vec![randn(&[5, 3], r)], build: Box::new(move |g, v| g.embedding(v[0], &ids)) },
        OpCase {
            name: "causal_attention",
            inputs: vec![randn(&[6, 4], r), randn(&[6, 4], r), randn(&[6, 4], r)],
            build: Box::new(move |g, v| g.causal_attention(v[0], v[1], v[2], geom)),
        },
        OpCase {
            name: "masked_cross_entropy",
            inputs: vec![randn(&[6, 5], r)],
            build: Box::new(move |g, v| g.masked_cross_entropy(v[0], &targets, &mask)),
        },
        OpCase { name: "sum", inputs: vec![randn(&[2, 3], r)], build: Box::new(|g, v| Ok(g.sum(v[0]))) },
    ]
}

pub fn small_config() -> ToyConfig {
    ToyConfig { vocab_size: tokenizer::VOCAB_SIZE, d_model: 8, n_layers: 2, n_heads: 2, d_ff: 16, max_seq_len: 16 }
}

/// Adapter with random non-zero `B`, so every factor receives gradient.
pub fn loud_adapter(model: &ToyModel, r: usize, std: f64, seed: u64) -> LoraAdapter {
    let mut a = model.new_adapter(LoraConfig::with_rank(r), seed).expect("adapter");
    let mut rng = Rng::seed(seed ^ 0x5eed);
    for p in a.layers.values_mut() {
        p.b = Tensor::randn(p.b.shape().to_vec(), std, &mut rng);
    }
    a
}

pub fn tiny_batch() -> Batch {
    let enc = |s: &str| tokenizer::encode(s).expect("encodable");
    Batch::from_pairs(&[(enc("ab+c"), enc("12")), (enc("x="), enc("yz"))]).expect("batch")
}

/// Model-level check of the `which` parameter gradients, concatenated into
/// one vector, against central differences of the masked loss.
pub fn check_model_grads(model: &mut ToyModel, which: Trainable, batch: &Batch) -> f64 {
    let opts = ForwardOptions::default();
    let (_, grads) = model.loss_and_grads(batch, which, &opts).expect("grads");
    let names: Vec<String> = model.params(which).into_iter().map(|(n, _)| n).collect();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for name in names {
        analytic.extend_from_slice(grads[&name].data());
        for j in 0..grads[&name].numel() {
            let mut eval = |delta: f64| {
                let mut orig = 0.0;
                for (pn, t) in model.params_mut(which) {
                    if pn == name {
                        orig = t.data()[j];
                        t.data_mut()[j] = orig + delta;
                    }
                }
                let l = model.masked_loss(batch).expect("loss");
                for (pn, t) in model.params_mut(which) {
                    if pn == name {
                        t.data_mut()[j] = orig;
                    }
                }
                l
            };
            numeric.push((eval(H_MODEL) - eval(-H_MODEL)) / (2.0 * H_MODEL));
        }
    }
    rel_err(&analytic, &numeric)
}

/// A small model with a two-adapter CAT bundle whose coefficients sit away
/// from the initial 0.5, for the α-gradient check.
pub fn cat_model(seed: u64) -> ToyModel {
    let base = ToyModel::init(small_config(), seed).expect("model");
    let adapters = vec![loud_adapter(&base, 2, 0.5, seed + 1), loud_adapter(&base, 2, 0.5, seed + 2)];
    let mut bundle = CatBundle::new(adapters, 0.5, Granularity::Module).expect("bundle");
    let mut rng = Rng::seed(seed + 3);
    for t in bundle.coefficients.values_mut() {
        for v in t.data_mut() {
            *v += 0.3 * rng.normal();
        }
    }
    base.with_attachment(Attachment::Cat(bundle)).expect("attach")
}

pub fn moe_model(seed: u64) -> ToyModel {
    let base = ToyModel::init(small_config(), seed).expect("model");
    let adapters = vec![loud_adapter(&base, 2, 0.5, seed + 1), loud_adapter(&base, 2, 0.5, seed + 2)];
    let mut bundle = MoeBundle::new(adapters).expect("bundle");
    let mut rng = Rng::seed(seed + 4);
    for t in bundle.routers.values_mut() {
        *t = Tensor::randn(t.shape().to_vec(), 0.5, &mut rng);
    }
    base.with_attachment(Attachment::Moe(bundle)).expect("attach")
}

const MODULES: [&str; 5] = ["q_proj", "v_proj", "k_proj", "up_proj", "down_proj"];

/// Layer layout `(layer-id, d_in, d_out)` shared by a family of adapters.
pub fn random_layout(rng: &mut Rng) -> Vec<(String, usize, usize)> {
    let n = 1 + rng.below(3);
    let mut ids: Vec<String> = (0..2).flat_map(|b| MODULES.iter().map(move |m| format!("layers.{b}.{m}"))).collect();
    rng.shuffle(&mut ids);
    ids.truncate(n);
    ids.into_iter().map(|id| (id, 2 + rng.below(5), 2 + rng.below(5))).collect()
}

/// Adapter over `layout` with Gaussian factors, rank `r` clipped to each
/// layer's `min(d_in, d_out)` by choosing `r` no larger than the smallest.
pub fn random_adapter(layout: &[(String, usize, usize)], r: usize, alpha: f64, rng: &mut Rng) -> LoraAdapter {
    let mut a = LoraAdapter::new(LoraConfig {
        r,
        lora_alpha: alpha,
        lora_dropout: 0.05,
        target_modules: MODULES.iter().map(|m| m.to_string()).collect(),
    });
    for (id, d_in, d_out) in layout {
        let pair =
            skillmerge_core::LoraPair::new(Tensor::randn(vec![r, *d_in], 1.0, rng), Tensor::randn(vec![*d_out, r], 1.0, rng))
                .expect("pair");
        a.layers.insert(id.clone(), pair);
    }
    a
}

pub fn max_rank(layout: &[(String, usize, usize)]) -> usize {
    layout.iter().map(|(_, i, o)| (*i).min(*o)).min().expect("non-empty layout")
}

/// `s · B · A` by explicit loops.
pub fn naive_delta(pair: &skillmerge_core::LoraPair, s: f64) -> Vec<f64> {
    let (r, d_in) = (pair.a.rows(), pair.a.cols());
    let d_out = pair.b.rows();
    let mut out = vec![0.0; d_out * d_in];
    for i in 0..d_out {
        for j in 0..d_in {
            let mut acc = 0.0;
            for k in 0..r {
                acc += pair.b.get2(i, k) * pair.a.get2(k, j);
            }
            out[i * d_in + j] = s * acc;
        }
    }
    out
}
