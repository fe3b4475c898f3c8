use std::collections::BTreeMap;

use super::{folded_pairs, provenance, MergeSpec, MergedDelta};
use crate::adapter::{LoraAdapter, LoraPair};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of entries kept at density `lambda`: `⌈λ·n⌉`, with a small guard
/// so grid values like `0.6 · 5 = 3.0000000000000004` keep 3, not 4.
pub(crate) fn kept_count(lambda: f64, n: usize) -> usize {
    ((lambda * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Keeps the `⌈λ·n⌉` largest-magnitude entries of `t`, zeroing the rest.
/// Equal magnitudes are ranked by lower flat index.
pub fn ties_trim(t: &Tensor, lambda: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::contract(format!("density {lambda} outside [0, 1]")));
    }
    let data = t.data();
    let keep = kept_count(lambda, data.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by(|&i, &j| data[j].abs().total_cmp(&data[i].abs()).then(i.cmp(&j)));
    let mut out = vec![0.0; data.len()];
    for &i in &order[..keep] {
        out[i] = data[i];
    }
    Tensor::new(t.shape().to_vec(), out)
}

/// Trims both factors of a pair independently.
pub fn ties_preprocess(pair: &LoraPair, lambda: f64) -> Result<LoraPair> {
    LoraPair::new(ties_trim(&pair.a, lambda)?, ties_trim(&pair.b, lambda)?)
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Elect + disjoint merge over already-trimmed tensors.
///
/// Per position the elected sign is the sign of the plain sum of the trimmed
/// values (0 when the sum is 0). The result is the mean of `αₖ·vₖ` over the
/// adapters whose entry carries the elected sign; positions with elected
/// sign 0 are 0.
pub fn ties_elect_merge(trimmed: &[&Tensor], alphas: &[f64]) -> Result<Tensor> {
    let first = trimmed.first().ok_or_else(|| Error::Merge("nothing to merge".into()))?;
    if trimmed.len() != alphas.len() {
        return Err(Error::Merge(format!("{} tensors but {} weights", trimmed.len(), alphas.len())));
    }
    for t in trimmed {
        if t.shape() != first.shape() {
            return Err(Error::shape("ties_elect_merge", first.shape(), t.shape()));
        }
    }
    let n = first.numel();
    let mut out = vec![0.0; n];
    for (i, slot) in out.iter_mut().enumerate() {
        let total = trimmed.iter().fold(0.0, |acc, t| acc + t.data()[i]);
        let elected = sign(total);
        if elected == 0 {
            continue;
        }
        let mut sum = 0.0;
        let mut count = 0usize;
        for (t, &alpha) in trimmed.iter().zip(alphas) {
            let v = t.data()[i];
            if sign(v) == elected {
                sum += alpha * v;
                count += 1;
            }
        }
        *slot = sum / count as f64;
    }
    Tensor::new(first.shape().to_vec(), out)
}

/// TIES in factor space: trim each `Aₖ`, `Bₖ`, elect and disjoint-merge the
/// `A`s and the `B`s separately, then densify `ΔW = B_m · A_m`.
pub fn merge_ties(a1: &LoraAdapter, a2: &LoraAdapter, lambda: f64, w1: f64, w2: f64) -> Result<MergedDelta> {
    let spec = MergeSpec::ties(lambda, w1, w2);
    spec.validate()?;
    let mut notes = vec!["disjoint merge performed on factors, densified afterwards".to_string()];
    let pairs = folded_pairs(a1, a2, &mut notes)?;
    let mut layers = BTreeMap::new();
    for (id, (p1, p2)) in pairs {
        let (t1, t2) = (ties_preprocess(&p1, lambda)?, ties_preprocess(&p2, lambda)?);
        let a = ties_elect_merge(&[&t1.a, &t2.a], &[w1, w2])?;
        let b = ties_elect_merge(&[&t1.b, &t2.b], &[w1, w2])?;
        layers.insert(id, b.matmul(&a)?);
    }
    Ok(MergedDelta { layers, provenance: provenance(spec, &[a1, a2], notes) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::merge::tests_support::unit_adapter;

    #[test]
    fn worked_three_entry_example() {
        let v1 = Tensor::vector(vec![2.0, -1.0, 0.5]);
        let v2 = Tensor::vector(vec![1.0, 1.0, -0.5]);
        let t1 = ties_trim(&v1, 2.0 / 3.0).unwrap();
        let t2 = ties_trim(&v2, 2.0 / 3.0).unwrap();
        assert_eq!(t1.data(), &[2.0, -1.0, 0.0]);
        assert_eq!(t2.data(), &[1.0, 1.0, 0.0]);
        let m = ties_elect_merge(&[&t1, &t2], &[1.0, 1.0]).unwrap();
        assert_eq!(m.data(), &[1.5, 0.0, 0.0]);
    }

    #[test]
    fn magnitude_ties_prefer_lower_index() {
        let t = ties_trim(&Tensor::vector(vec![1.0, -1.0, 1.0, 0.5]), 0.5).unwrap();
        assert_eq!(t.data(), &[1.0, -1.0, 0.0, 0.0]);
    }

    #[test]
    fn grid_densities_keep_the_intended_count() {
        assert_eq!(kept_count(0.6, 5), 3);
        assert_eq!(kept_count(0.2, 10), 2);
        assert_eq!(kept_count(0.0, 10), 0);
        assert_eq!(kept_count(1.0, 7), 7);
        assert_eq!(kept_count(0.25, 3), 1);
    }

    #[test]
    fn zero_density_gives_zero_delta() {
        let a1 = unit_adapter(&[&[1.0, 2.0]], &[&[1.0], &[3.0]]);
        let a2 = unit_adapter(&[&[-1.0, 0.5]], &[&[2.0], &[1.0]]);
        let m = merge_ties(&a1, &a2, 0.0, 1.0, 1.0).unwrap();
        assert!(m.layers["layers.0.q_proj"].data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn full_density_sign_agreement_is_weighted_mean() {
        let a1 = unit_adapter(&[&[1.0, 2.0]], &[&[1.0], &[3.0]]);
        let a2 = unit_adapter(&[&[3.0, 4.0]], &[&[2.0], &[1.0]]);
        let m = merge_ties(&a1, &a2, 1.0, 1.0, 1.0).unwrap();
        // mean factors: A = [2, 3], B = [1.5, 2]
        assert_eq!(m.layers["layers.0.q_proj"].data(), &[3.0, 4.5, 4.0, 6.0]);
    }
}
