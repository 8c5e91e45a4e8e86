use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::types::Magnification;

/// Uniform weights over (×5, ×10, ×20).
pub const UNIFORM_WEIGHTS: [f64; 3] = [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];

/// Convex combination of per-scale probabilities. Weights are indexed
/// (×5, ×10, ×20) and renormalized over the scales present.
pub fn multiscale_ensemble(scale_probs: &BTreeMap<Magnification, f64>, weights: &[f64; 3]) -> Result<f64> {
    if scale_probs.is_empty() {
        return Err(Error::invalid("ensemble needs at least one scale"));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::invalid(format!("ensemble weights must be non-negative: {weights:?}")));
    }
    let total: f64 = scale_probs.keys().map(|m| weights[m.index()]).sum();
    if total <= 0.0 {
        return Err(Error::invalid("ensemble weights are zero on every present scale"));
    }
    let p = scale_probs
        .iter()
        .map(|(m, p)| weights[m.index()] * p)
        .sum::<f64>()
        / total;
    // guard against rounding just outside the input range
    let lo = scale_probs.values().copied().fold(f64::INFINITY, f64::min);
    let hi = scale_probs.values().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(p.clamp(lo, hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn probs(v: [f64; 3]) -> BTreeMap<Magnification, f64> {
        Magnification::ALL.iter().copied().zip(v).collect()
    }

    #[test]
    fn consensus_and_mean() {
        assert!((multiscale_ensemble(&probs([0.7; 3]), &[0.1, 0.3, 0.6]).unwrap() - 0.7).abs() < 1e-15);
        assert!((multiscale_ensemble(&probs([0.2, 0.5, 0.8]), &UNIFORM_WEIGHTS).unwrap() - 0.5).abs() < 1e-15);
        assert!((multiscale_ensemble(&probs([0.2, 0.5, 0.8]), &[0.5, 0.25, 0.25]).unwrap() - 0.425).abs() < 1e-15);
    }

    #[test]
    fn renormalizes_over_present_scales() {
        let mut m = BTreeMap::new();
        m.insert(Magnification::X10, 0.2);
        m.insert(Magnification::X20, 0.6);
        assert!((multiscale_ensemble(&m, &[0.5, 0.25, 0.25]).unwrap() - 0.4).abs() < 1e-15);
        assert!(multiscale_ensemble(&BTreeMap::new(), &UNIFORM_WEIGHTS).is_err());
        assert!(multiscale_ensemble(&m, &[1.0, 0.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn stays_within_input_range(p in proptest::array::uniform3(0.0f64..=1.0), w in proptest::array::uniform3(0.0f64..1.0)) {
            prop_assume!(w.iter().sum::<f64>() > 1e-9);
            let out = multiscale_ensemble(&probs(p), &w).unwrap();
            let lo = p.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out >= lo && out <= hi);
        }
    }
}
