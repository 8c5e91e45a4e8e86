use serde::{Deserialize, Serialize};

use super::survival::normal_two_sided_p;
use crate::error::{Error, Result};

/// Exact enumeration is used when `n_a * n_b` is at most this.
pub const EXACT_PAIR_LIMIT: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// U statistic of sample a: pairs (a_i > b_j) plus half the ties.
    pub u: f64,
    /// Two-sided.
    pub p_value: f64,
    pub exact: bool,
}

/// Midranks (1-based) of the pooled sample, doubled so they are integers.
fn doubled_midranks(pooled: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&a, &b| pooled[a].total_cmp(&pooled[b]));
    let mut ranks = vec![0u64; pooled.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && pooled[order[j]] == pooled[order[i]] {
            j += 1;
        }
        // positions i+1 ..= j share rank (i + 1 + j) / 2
        let r2 = (i + 1 + j) as u64;
        for &k in &order[i..j] {
            ranks[k] = r2;
        }
        i = j;
    }
    ranks
}

pub fn mann_whitney_u(sample_a: &[f64], sample_b: &[f64]) -> Result<MannWhitney> {
    if sample_a.is_empty() || sample_b.is_empty() {
        return Err(Error::invalid("mann_whitney_u: both samples must be non-empty"));
    }
    if sample_a.iter().chain(sample_b).any(|v| v.is_nan()) {
        return Err(Error::invalid("mann_whitney_u: NaN value"));
    }
    let (na, nb) = (sample_a.len(), sample_b.len());
    let n = na + nb;
    let pooled: Vec<f64> = sample_a.iter().chain(sample_b).copied().collect();
    let r2 = doubled_midranks(&pooled);
    let r2_a: u64 = r2[..na].iter().sum();
    // 2U = 2R_a - n_a (n_a + 1)
    let u2 = r2_a as i64 - (na * (na + 1)) as i64;
    let u = u2 as f64 / 2.0;

    if na * nb <= EXACT_PAIR_LIMIT {
        let p = exact_p(&r2, na, r2_a);
        return Ok(MannWhitney { u, p_value: p, exact: true });
    }

    let mean = (na * nb) as f64 / 2.0;
    let mut tie_term = 0.0;
    let mut sorted = pooled.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    let nf = n as f64;
    let var = (na * nb) as f64 / 12.0 * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)));
    let p = if var <= 0.0 {
        1.0
    } else {
        let z = ((u - mean).abs() - 0.5).max(0.0) / var.sqrt();
        normal_two_sided_p(z)
    };
    Ok(MannWhitney { u, p_value: p, exact: false })
}

/// Two-sided permutation p-value of the doubled rank sum over all
/// C(n, n_a) assignments, counted by dynamic programming.
fn exact_p(r2: &[u64], na: usize, observed: u64) -> f64 {
    let max_sum: u64 = r2.iter().sum();
    let width = max_sum as usize + 1;
    // ways[c][s]: subsets of size c with doubled rank sum s
    let mut ways = vec![vec![0f64; width]; na + 1];
    ways[0][0] = 1.0;
    for &r in r2 {
        let r = r as usize;
        for c in (1..=na).rev() {
            let (lo, hi) = ways.split_at_mut(c);
            let prev = &lo[c - 1];
            let cur = &mut hi[0];
            for s in (r..width).rev() {
                cur[s] += prev[s - r];
            }
        }
    }
    // expected doubled rank sum 2 E[R_a] = n_a (n + 1)
    let center = (na * (r2.len() + 1)) as i64;
    let dev_obs = (observed as i64 - center).abs();
    let total: f64 = ways[na].iter().sum();
    let extreme: f64 = ways[na]
        .iter()
        .enumerate()
        .filter(|(s, _)| (*s as i64 - center).abs() >= dev_obs)
        .map(|(_, w)| w)
        .sum();
    (extreme / total).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated_samples() {
        let r = mann_whitney_u(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(r.u, 0.0);
        assert!(r.exact);
        assert!((r.p_value - 1.0 / 3.0).abs() < 1e-15);
        let r = mann_whitney_u(&[3.0, 4.0], &[1.0, 2.0]).unwrap();
        assert_eq!(r.u, 4.0);
    }

    #[test]
    fn identical_samples() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let r = mann_whitney_u(&a, &a).unwrap();
        assert_eq!(r.u, 12.5);
        assert!((r.p_value - 1.0).abs() < 1e-12);
        let big: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let r = mann_whitney_u(&big, &big).unwrap();
        assert!(!r.exact);
        assert_eq!(r.u, 450.0);
        assert!(r.p_value > 0.99);
    }

    #[test]
    fn large_separated_is_significant() {
        let a: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..30).map(|i| 100.0 + i as f64).collect();
        let r = mann_whitney_u(&a, &b).unwrap();
        assert_eq!(r.u, 0.0);
        assert!(r.p_value < 1e-8);
    }
}
