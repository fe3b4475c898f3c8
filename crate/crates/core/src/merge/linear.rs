use std::collections::BTreeMap;

use super::{folded_pairs, provenance, MergeSpec, MergedDelta};
use crate::adapter::{LoraAdapter, LoraPair};
use crate::error::Result;

/// `(wb₁B₁ + wb₂B₂, wa₁A₁ + wa₂A₂)`.
pub fn combine_factors(p1: &LoraPair, p2: &LoraPair, (wa1, wa2): (f64, f64), (wb1, wb2): (f64, f64)) -> Result<LoraPair> {
    let mut a = p1.a.scale(wa1);
    a.axpy(wa2, &p2.a)?;
    let mut b = p1.b.scale(wb1);
    b.axpy(wb2, &p2.b)?;
    LoraPair::new(a, b)
}

/// `ΔW = (α₁B₁ + α₂B₂)(α₁A₁ + α₂A₂)` with each adapter's scaling folded into
/// its factors as `sqrt(s)`, so equal scalings give `s · (…)(…)`.
pub fn merge_linear(a1: &LoraAdapter, a2: &LoraAdapter, w1: f64, w2: f64) -> Result<MergedDelta> {
    let mut notes = Vec::new();
    let pairs = folded_pairs(a1, a2, &mut notes)?;
    let mut layers = BTreeMap::new();
    for (id, (p1, p2)) in pairs {
        let merged = combine_factors(&p1, &p2, (w1, w2), (w1, w2))?;
        layers.insert(id, merged.b.matmul(&merged.a)?);
    }
    Ok(MergedDelta { layers, provenance: provenance(MergeSpec::linear(w1, w2), &[a1, a2], notes) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::merge::tests_support::unit_adapter;

    #[test]
    fn all_ones_for_unit_weights() {
        let a1 = unit_adapter(&[&[1.0, 0.0]], &[&[1.0], &[0.0]]);
        let a2 = unit_adapter(&[&[0.0, 1.0]], &[&[0.0], &[1.0]]);
        let m = merge_linear(&a1, &a2, 1.0, 1.0).unwrap();
        assert_eq!(m.layers["layers.0.q_proj"].data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn endpoint_drops_cross_terms() {
        let a1 = unit_adapter(&[&[1.0, 2.0]], &[&[3.0], &[-1.0]]);
        let a2 = unit_adapter(&[&[0.5, 1.0]], &[&[2.0], &[1.0]]);
        let m = merge_linear(&a1, &a2, 1.0, 0.0).unwrap();
        assert_eq!(m.layers["layers.0.q_proj"], a1.deltas().unwrap()["layers.0.q_proj"]);
    }

    #[test]
    fn rank_mismatch_is_padded_and_noted() {
        let a1 = unit_adapter(&[&[1.0, 0.0, 0.0]], &[&[1.0], &[0.0], &[0.0]]);
        let a2 = unit_adapter(&[&[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]], &[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let m = merge_linear(&a1, &a2, 1.0, 1.0).unwrap();
        assert!(m.provenance.notes.iter().any(|n| n.contains("zero-padded")));
        assert_eq!(m.layers["layers.0.q_proj"].shape(), &[3, 3]);
    }
}
