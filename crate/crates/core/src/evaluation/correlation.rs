use crate::error::{Error, Result};

/// Pearson product-moment correlation.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::invalid("pearson_r: length mismatch"));
    }
    if x.len() < 2 {
        return Err(Error::invalid("pearson_r needs at least 2 pairs"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedMetric("pearson_r: zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Transfer a TMB cutoff to a total-mutation-count cutoff by matching the
/// fraction called high. Returns the smallest integer `c` for which the
/// fraction of counts strictly above `c` is closest to the fraction of TMB
/// values strictly above `tmb_cutoff`.
pub fn derive_count_cutoff(tmb_values: &[f64], counts: &[i64], tmb_cutoff: f64) -> Result<i64> {
    if tmb_values.is_empty() || counts.is_empty() {
        return Err(Error::invalid("derive_count_cutoff: empty input"));
    }
    if tmb_values.len() != counts.len() {
        return Err(Error::invalid("derive_count_cutoff: unpaired input"));
    }
    if tmb_values.len() < 2 {
        return Err(Error::invalid("derive_count_cutoff needs at least 2 samples"));
    }
    if tmb_values.iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("derive_count_cutoff: NaN TMB"));
    }
    let high = tmb_values.iter().filter(|&&v| v > tmb_cutoff).count() as i128;

    let mut sorted = counts.to_vec();
    sorted.sort_unstable();
    // Exceedance only changes at observed counts; the smallest c in each
    // constant stretch is (previous count value), or min - 1 for the first.
    let mut candidates = vec![sorted[0] - 1];
    candidates.extend(sorted.iter().copied());
    candidates.dedup();

    let mut best: Option<(i128, i64)> = None;
    for c in candidates {
        let above = (sorted.len() - sorted.partition_point(|&v| v <= c)) as i128;
        let diff = (above - high).abs();
        if best.is_none_or(|(d, _)| diff < d) {
            best = Some((diff, c));
        }
    }
    Ok(best.expect("non-empty").1)
}
