use std::collections::BTreeMap;

use super::{combine_factors, folded_pairs, provenance, MergeSpec, MergedDelta};
use crate::adapter::{LoraAdapter, LoraPair};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

fn drop_and_rescale(t: &Tensor, lambda: f64, seed: u64) -> Tensor {
    let mut rng = Rng::seed(seed);
    let data = t.data().iter().map(|&x| if rng.uniform() < lambda { x / lambda } else { 0.0 }).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

/// Keeps each entry of `A` and `B` independently with probability `lambda`
/// and rescales survivors by `1/lambda`.
pub fn dare_preprocess(pair: &LoraPair, lambda: f64, seed: u64) -> Result<LoraPair> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::InvalidDensity(lambda));
    }
    LoraPair::new(
        drop_and_rescale(&pair.a, lambda, Rng::derive_seed(seed, 0)),
        drop_and_rescale(&pair.b, lambda, Rng::derive_seed(seed, 1)),
    )
}

fn layer_stream(id: &str) -> u64 {
    // FNV-1a, so each layer's mask is independent of iteration order.
    id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// DARE followed by linear merging.
///
/// By default the weights apply to both factors,
/// `ΔW = (α₁B₁′ + α₂B₂′)(α₁A₁′ + α₂A₂′)`; with `b_only` the `A` factors are
/// summed unweighted, `ΔW = (α₁B₁′ + α₂B₂′)(A₁′ + A₂′)`.
pub fn merge_dare(
    a1: &LoraAdapter,
    a2: &LoraAdapter,
    lambda: f64,
    seed: u64,
    w1: f64,
    w2: f64,
    b_only: bool,
) -> Result<MergedDelta> {
    let spec = MergeSpec { dare_b_only: b_only, ..MergeSpec::dare(lambda, w1, w2, seed) };
    spec.validate()?;
    let mut notes = Vec::new();
    let pairs = folded_pairs(a1, a2, &mut notes)?;
    let mut layers = BTreeMap::new();
    for (id, (p1, p2)) in pairs {
        let stream = layer_stream(&id);
        let d1 = dare_preprocess(&p1, lambda, Rng::derive_seed(Rng::derive_seed(seed, 1), stream))?;
        let d2 = dare_preprocess(&p2, lambda, Rng::derive_seed(Rng::derive_seed(seed, 2), stream))?;
        let a_weights = if b_only { (1.0, 1.0) } else { (w1, w2) };
        let merged = combine_factors(&d1, &d2, a_weights, (w1, w2))?;
        layers.insert(id, merged.b.matmul(&merged.a)?);
    }
    Ok(MergedDelta { layers, provenance: provenance(spec, &[a1, a2], notes) })
}
