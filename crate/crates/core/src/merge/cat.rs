use std::collections::BTreeMap;

use super::{check_compatible, provenance, Alphas, MergeMethod, MergeSpec, MergedDelta};
use crate::adapter::{delta, LoraAdapter, LoraConfig, LoraPair};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `ΔWˡ = Σ_k αₖˡ · sₖ · Bₖ Aₖ` over any number of adapters.
///
/// Coefficients are unconstrained here (the learned variant); see
/// [`merge_cat_static`] for the validated `[0, 1]` path.
pub fn merge_cat(adapters: &[&LoraAdapter], alphas: &Alphas) -> Result<MergedDelta> {
    check_compatible(adapters)?;
    let mut layers = BTreeMap::new();
    for id in adapters[0].layers.keys() {
        let w = alphas.for_layer(id)?;
        if w.len() != adapters.len() {
            return Err(Error::Merge(format!("layer {id}: {} coefficients for {} adapters", w.len(), adapters.len())));
        }
        let mut acc: Option<Tensor> = None;
        for (adapter, &alpha) in adapters.iter().zip(w) {
            let d = delta(&adapter.layers[id], adapter.scaling())?.scale(alpha);
            acc = Some(match acc {
                None => d,
                Some(mut sum) => {
                    sum.axpy(1.0, &d)?;
                    sum
                }
            });
        }
        layers.insert(id.clone(), acc.expect("at least one adapter"));
    }
    let spec = MergeSpec {
        method: MergeMethod::CatLearned,
        alphas: alphas.clone(),
        density: None,
        t: None,
        seed: None,
        dare_b_only: false,
    };
    Ok(MergedDelta { layers, provenance: provenance(spec, adapters, Vec::new()) })
}

/// Static CAT with coefficients validated to `[0, 1]`.
pub fn merge_cat_static(adapters: &[&LoraAdapter], alphas: &Alphas) -> Result<MergedDelta> {
    let spec = MergeSpec { method: MergeMethod::CatStatic, ..MergeSpec::cat(0.5, 0.5) };
    let spec = MergeSpec { alphas: alphas.clone(), ..spec };
    spec.validate()?;
    let mut out = merge_cat(adapters, alphas)?;
    out.provenance.spec = spec;
    Ok(out)
}

/// The rank-`Σrₖ` adapter whose update equals [`merge_cat`]:
/// `B_cat = [α₁s₁B₁, α₂s₂B₂, …]`, `A_cat` the row-stack of the `Aₖ`, and
/// scaling 1.
pub fn cat_concat_form(adapters: &[&LoraAdapter], alphas: &Alphas) -> Result<LoraAdapter> {
    check_compatible(adapters)?;
    let rank: usize = adapters.iter().map(|a| a.config.r).sum();
    let config = LoraConfig {
        r: rank,
        lora_alpha: rank as f64,
        lora_dropout: adapters[0].config.lora_dropout,
        target_modules: adapters[0].config.target_modules.clone(),
    };
    let mut out = LoraAdapter::new(config);
    for id in adapters[0].layers.keys() {
        let w = alphas.for_layer(id)?;
        if w.len() != adapters.len() {
            return Err(Error::Merge(format!("layer {id}: {} coefficients for {} adapters", w.len(), adapters.len())));
        }
        let bs: Vec<Tensor> = adapters.iter().zip(w).map(|(a, &alpha)| a.layers[id].b.scale(alpha * a.scaling())).collect();
        let a_cat = Tensor::vstack(&adapters.iter().map(|a| &a.layers[id].a).collect::<Vec<_>>())?;
        let b_cat = Tensor::hstack(&bs.iter().collect::<Vec<_>>())?;
        out.layers.insert(id.clone(), LoraPair::new(a_cat, b_cat)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::merge::tests_support::unit_adapter;

    fn two_by_two() -> (LoraAdapter, LoraAdapter) {
        (unit_adapter(&[&[1.0, 0.0]], &[&[1.0], &[0.0]]), unit_adapter(&[&[0.0, 1.0]], &[&[0.0], &[1.0]]))
    }

    #[test]
    fn hand_computed_weighted_sum() {
        let (a1, a2) = two_by_two();
        let m = merge_cat(&[&a1, &a2], &Alphas::pair(2.0, 3.0)).unwrap();
        assert_eq!(m.layers["layers.0.q_proj"].data(), &[2.0, 0.0, 0.0, 3.0]);
    }

    #[test]
    fn endpoint_recovers_first_adapter() {
        let (a1, a2) = two_by_two();
        let m = merge_cat(&[&a1, &a2], &Alphas::pair(1.0, 0.0)).unwrap();
        assert_eq!(m.layers["layers.0.q_proj"], a1.deltas().unwrap()["layers.0.q_proj"]);
    }

    #[test]
    fn static_average_equals_half_weights() {
        let (a1, a2) = two_by_two();
        let s = merge_cat_static(&[&a1, &a2], &Alphas::pair(0.5, 0.5)).unwrap();
        assert_eq!(s.layers["layers.0.q_proj"].data(), &[0.5, 0.0, 0.0, 0.5]);
        assert!(merge_cat_static(&[&a1, &a2], &Alphas::pair(1.5, 0.5)).is_err());
    }

    #[test]
    fn concat_form_matches_dense() {
        let (a1, a2) = two_by_two();
        let alphas = Alphas::pair(2.0, 3.0);
        let cat = cat_concat_form(&[&a1, &a2], &alphas).unwrap();
        assert_eq!(cat.config.r, 2);
        assert_eq!(cat.deltas().unwrap()["layers.0.q_proj"].data(), &[2.0, 0.0, 0.0, 3.0]);
    }

    #[test]
    fn layer_mismatch_lists_symmetric_difference() {
        let (a1, mut a2) = two_by_two();
        let pair = a2.layers.remove("layers.0.q_proj").unwrap();
        a2.layers.insert("layers.1.q_proj".into(), pair);
        let err = merge_cat(&[&a1, &a2], &Alphas::pair(1.0, 1.0)).unwrap_err().to_string();
        assert!(err.contains("layers.0.q_proj") && err.contains("layers.1.q_proj"), "{err}");
    }
}
