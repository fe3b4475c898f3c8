use std::collections::BTreeMap;

use super::{check_compatible, provenance, MergeSpec, MergedDelta};
use crate::adapter::{delta, LoraAdapter};
use crate::error::{Error, Result};

/// Below this angle (or this far from π) SLERP falls back to `(1−t, t)`.
pub const SLERP_PARALLEL_EPS: f64 = 1e-6;

/// `(α₁, α₂, θ)` for a raw cosine; the cosine is clamped to `[−1, 1]`.
pub fn slerp_coefficients(cosine: f64, t: f64) -> (f64, f64, f64) {
    let theta = cosine.clamp(-1.0, 1.0).acos();
    if theta < SLERP_PARALLEL_EPS || std::f64::consts::PI - theta < SLERP_PARALLEL_EPS {
        return (1.0 - t, t, theta);
    }
    let s = theta.sin();
    (((1.0 - t) * theta).sin() / s, (t * theta).sin() / s, theta)
}

/// Per layer: `θ = arccos⟨Δ₁/‖Δ₁‖, Δ₂/‖Δ₂‖⟩_F`, then
/// `ΔW = sin((1−t)θ)/sin θ · Δ₁ + sin(tθ)/sin θ · Δ₂` on the unnormalized
/// (scaled) deltas.
pub fn merge_slerp(a1: &LoraAdapter, a2: &LoraAdapter, t: f64) -> Result<MergedDelta> {
    let spec = MergeSpec::slerp(t);
    spec.validate()?;
    check_compatible(&[a1, a2])?;
    let mut layers = BTreeMap::new();
    let mut notes = Vec::new();
    for (id, p1) in &a1.layers {
        let d1 = delta(p1, a1.scaling())?;
        let d2 = delta(&a2.layers[id], a2.scaling())?;
        let (n1, n2) = (d1.frobenius_norm(), d2.frobenius_norm());
        if n1 == 0.0 || n2 == 0.0 {
            return Err(Error::Merge(format!("layer {id}: cannot normalize a zero delta for slerp")));
        }
        let cosine = d1.dot(&d2)? / (n1 * n2);
        let (w1, w2, theta) = slerp_coefficients(cosine, t);
        if theta < SLERP_PARALLEL_EPS || std::f64::consts::PI - theta < SLERP_PARALLEL_EPS {
            notes.push(format!("layer {id}: near-(anti)parallel deltas, linear interpolation used"));
        }
        let mut out = d1.scale(w1);
        out.axpy(w2, &d2)?;
        layers.insert(id.clone(), out);
    }
    Ok(MergedDelta { layers, provenance: provenance(spec, &[a1, a2], notes) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::merge::tests_support::unit_adapter;

    #[test]
    fn orthogonal_midpoint() {
        let (w1, w2, theta) = slerp_coefficients(0.0, 0.5);
        assert!((theta - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        assert!((w1 - 0.5f64.sqrt()).abs() < 1e-12);
        assert!((w2 - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn endpoints_are_exact() {
        let a1 = unit_adapter(&[&[1.0, 2.0]], &[&[1.0], &[3.0]]);
        let a2 = unit_adapter(&[&[3.0, -4.0]], &[&[2.0], &[1.0]]);
        let m0 = merge_slerp(&a1, &a2, 0.0).unwrap();
        let m1 = merge_slerp(&a1, &a2, 1.0).unwrap();
        assert_eq!(m0.layers["layers.0.q_proj"], a1.deltas().unwrap()["layers.0.q_proj"]);
        assert_eq!(m1.layers["layers.0.q_proj"], a2.deltas().unwrap()["layers.0.q_proj"]);
    }

    #[test]
    fn cosine_overshoot_is_clamped() {
        let (w1, w2, theta) = slerp_coefficients(1.0 + 1e-15, 0.3);
        assert_eq!(theta, 0.0);
        assert_eq!((w1, w2), (0.7, 0.3));
    }

    #[test]
    fn zero_delta_is_a_normalization_error() {
        let a1 = unit_adapter(&[&[1.0, 2.0]], &[&[0.0], &[0.0]]);
        let a2 = unit_adapter(&[&[3.0, -4.0]], &[&[2.0], &[1.0]]);
        assert!(matches!(merge_slerp(&a1, &a2, 0.5), Err(Error::Merge(_))));
    }
}
