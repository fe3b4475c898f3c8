//! Shared fixtures for the benchmarks.

use skillmerge_core::bench::{gen_math_skill, Example};
use skillmerge_core::model::{tokenizer, ToyConfig, ToyModel};
use skillmerge_core::{LoraAdapter, LoraConfig, Rng, Tensor};

/// Default-size toy model with a rank-`r` adapter whose factors are both
/// random, so every merge method sees nonzero deltas.
pub fn model_and_adapter(r: usize, seed: u64) -> (ToyModel, LoraAdapter) {
    let model = ToyModel::init(ToyConfig::default(), seed).expect("default config is valid");
    let mut adapter = model.new_adapter(LoraConfig::with_rank(r), seed + 1).expect("adapter fits the model");
    let mut rng = Rng::seed(seed + 2);
    for p in adapter.layers.values_mut() {
        p.a = Tensor::randn(p.a.shape().to_vec(), 0.02, &mut rng);
        p.b = Tensor::randn(p.b.shape().to_vec(), 0.02, &mut rng);
    }
    (model, adapter)
}

/// Encoded `(prompt, answer)` pairs from the math generator.
pub fn math_pairs(n: usize, seed: u64) -> Vec<(Vec<usize>, Vec<usize>)> {
    let ds = gen_math_skill(n, seed).expect("n > 0");
    ds.examples.iter().map(|e: &Example| (tokenizer::encode(&e.prompt).unwrap(), tokenizer::encode(&e.answer).unwrap())).collect()
}
