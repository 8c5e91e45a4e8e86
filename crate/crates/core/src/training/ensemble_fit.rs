use std::collections::BTreeMap;

use crate::error::Result;
use crate::evaluation::auc_counts;
use crate::model::{multiscale_ensemble, UNIFORM_WEIGHTS};
use crate::types::Magnification;

/// Grid steps per unit of weight (resolution 0.05).
pub const GRID_STEPS: u32 = 20;

/// Weights on the simplex grid maximizing validation AUC of the ensemble.
/// Exact uniform weights join the grid as an extra candidate. Among
/// equally good weights the one closest to uniform wins, then the first in
/// (×5, ×10, ×20) lexicographic order. Labels lacking a class
/// give uniform weights.
pub fn fit_ensemble_weights(val_probs: &[BTreeMap<Magnification, f64>], labels: &[bool]) -> Result<[f64; 3]> {
    let pos = labels.iter().filter(|l| **l).count();
    if val_probs.len() != labels.len() {
        return Err(crate::Error::invalid("fit_ensemble_weights: predictions and labels differ in length"));
    }
    if labels.len() < 2 || pos == 0 || pos == labels.len() {
        log::warn!("ensemble weights: validation labels lack a class, using uniform weights");
        return Ok(UNIFORM_WEIGHTS);
    }
    let n = GRID_STEPS as i64;
    // (weights, squared distance to uniform in units of 1/(3 * GRID_STEPS))
    let mut candidates = vec![(UNIFORM_WEIGHTS, 0i64)];
    for i in 0..=GRID_STEPS {
        for j in 0..=GRID_STEPS - i {
            let k = GRID_STEPS - i - j;
            let w = [i, j, k].map(|x| f64::from(x) / f64::from(GRID_STEPS));
            let dist: i64 = [i, j, k].iter().map(|&x| (3 * x as i64 - n).pow(2)).sum();
            candidates.push((w, dist));
        }
    }
    let mut best: Option<(u128, i64, [f64; 3])> = None;
    for (w, dist) in candidates {
        let scores: Result<Vec<f64>> = val_probs.iter().map(|p| multiscale_ensemble(p, &w)).collect();
        let Ok(scores) = scores else {
            // zero weight on every scale some patient has
            continue;
        };
        let (num, _) = auc_counts(&scores, labels)?;
        let better = match &best {
            None => true,
            Some((b_num, b_dist, _)) => num > *b_num || (num == *b_num && dist < *b_dist),
        };
        if better {
            best = Some((num, dist, w));
        }
    }
    Ok(best.map_or(UNIFORM_WEIGHTS, |b| b.2))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn maps(rows: &[[f64; 3]]) -> Vec<BTreeMap<Magnification, f64>> {
        rows.iter().map(|r| Magnification::ALL.iter().copied().zip(*r).collect()).collect()
    }

    #[test]
    fn identical_scales_give_uniform() {
        let rows: Vec<[f64; 3]> = (0..10).map(|i| [i as f64 / 10.0; 3]).collect();
        let labels: Vec<bool> = (0..10).map(|i| i % 3 == 0).collect();
        assert_eq!(fit_ensemble_weights(&maps(&rows), &labels).unwrap(), UNIFORM_WEIGHTS);
    }

    #[test]
    fn dominant_scale_gets_the_mass() {
        let labels: Vec<bool> = (0..12).map(|i| i % 2 == 0).collect();
        let rows: Vec<[f64; 3]> = (0..12)
            .map(|i| {
                let noise = ((i * 5) % 7) as f64 / 7.0;
                [noise, if labels[i] { 0.9 } else { 0.1 }, 1.0 - noise]
            })
            .collect();
        let w = fit_ensemble_weights(&maps(&rows), &labels).unwrap();
        let s: Vec<f64> = maps(&rows).iter().map(|p| multiscale_ensemble(p, &w).unwrap()).collect();
        assert_eq!(crate::evaluation::roc_auc(&s, &labels).unwrap(), 1.0);
    }

    #[test]
    fn single_class_falls_back_to_uniform() {
        let w = fit_ensemble_weights(&maps(&[[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]]), &[true, true]).unwrap();
        assert_eq!(w, UNIFORM_WEIGHTS);
    }
}
