//! Kaplan-Meier, two-group log-rank and a univariate Cox model with a
//! binary group covariate (Breslow ties).

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::types::TmbLabel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub patient_id: String,
    /// Months from diagnosis to event or censoring.
    pub time: f64,
    /// True when the event (death) was observed.
    pub event: bool,
    pub group: TmbLabel,
}

fn check_times(records: &[SurvivalRecord]) -> Result<()> {
    if let Some(r) = records.iter().find(|r| !r.time.is_finite() || r.time < 0.0) {
        return Err(Error::invalid(format!("patient {}: invalid survival time {}", r.patient_id, r.time)));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmStep {
    pub time: f64,
    pub survival: f64,
    pub at_risk: usize,
    pub events: usize,
}

/// Product-limit survival curve. `steps` holds one entry per distinct
/// event time; survival is 1 before the first step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    pub steps: Vec<KmStep>,
}

impl KmCurve {
    /// S(t), right-continuous.
    pub fn survival_at(&self, t: f64) -> f64 {
        self.steps
            .iter()
            .take_while(|s| s.time <= t)
            .last()
            .map_or(1.0, |s| s.survival)
    }
}

/// Distinct event times with (events, at risk) per group, ascending.
struct RiskTable {
    rows: Vec<RiskRow>,
}

struct RiskRow {
    time: f64,
    /// events in group 0 / group 1
    d: [usize; 2],
    /// at risk in group 0 / group 1
    n: [usize; 2],
}

fn risk_table(times: &[(f64, bool, usize)]) -> RiskTable {
    let mut sorted = times.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut at_risk = [0usize; 2];
    for t in &sorted {
        at_risk[t.2] += 1;
    }
    let mut rows = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        let mut d = [0usize; 2];
        let mut leaving = [0usize; 2];
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1 {
                d[sorted[i].2] += 1;
            }
            leaving[sorted[i].2] += 1;
            i += 1;
        }
        if d[0] + d[1] > 0 {
            rows.push(RiskRow { time: t, d, n: at_risk });
        }
        at_risk[0] -= leaving[0];
        at_risk[1] -= leaving[1];
    }
    RiskTable { rows }
}

pub fn kaplan_meier(records: &[SurvivalRecord]) -> Result<KmCurve> {
    if records.is_empty() {
        return Err(Error::invalid("kaplan_meier: no records"));
    }
    check_times(records)?;
    let table = risk_table(&records.iter().map(|r| (r.time, r.event, 0)).collect::<Vec<_>>());
    let mut s = 1.0;
    let steps = table
        .rows
        .iter()
        .map(|row| {
            let (d, n) = (row.d[0], row.n[0]);
            s *= 1.0 - d as f64 / n as f64;
            KmStep {
                time: row.time,
                survival: s,
                at_risk: n,
                events: d,
            }
        })
        .collect();
    Ok(KmCurve { steps })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRank {
    pub chi_square: f64,
    pub p_value: f64,
    pub observed_a: f64,
    pub expected_a: f64,
}

/// Survival function of chi-square with one degree of freedom.
pub fn chi2_1df_sf(x: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else {
        erfc((x / 2.0).sqrt())
    }
}

/// Two-sided p-value of a standard normal statistic.
pub fn normal_two_sided_p(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0)
}

pub fn log_rank(group_a: &[SurvivalRecord], group_b: &[SurvivalRecord]) -> Result<LogRank> {
    if group_a.is_empty() || group_b.is_empty() {
        return Err(Error::invalid("log_rank: both groups must be non-empty"));
    }
    check_times(group_a)?;
    check_times(group_b)?;
    let pooled: Vec<(f64, bool, usize)> = group_a
        .iter()
        .map(|r| (r.time, r.event, 0))
        .chain(group_b.iter().map(|r| (r.time, r.event, 1)))
        .collect();
    let table = risk_table(&pooled);
    if table.rows.is_empty() {
        return Err(Error::UndefinedMetric("log_rank: no events observed".into()));
    }
    let (mut o, mut e, mut v) = (0.0, 0.0, 0.0);
    for row in &table.rows {
        let d = (row.d[0] + row.d[1]) as f64;
        let n = (row.n[0] + row.n[1]) as f64;
        let na = row.n[0] as f64;
        o += row.d[0] as f64;
        e += d * na / n;
        if n > 1.0 {
            v += d * (na / n) * (1.0 - na / n) * (n - d) / (n - 1.0);
        }
    }
    let diff = o - e;
    let chi_square = if v > 0.0 { diff * diff / v } else { 0.0 };
    Ok(LogRank {
        chi_square,
        p_value: chi2_1df_sf(chi_square),
        observed_a: o,
        expected_a: e,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoxResult {
    /// Log hazard ratio of TMB-H relative to TMB-L.
    pub beta: f64,
    pub se: f64,
    pub hazard_ratio: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// Wald test.
    pub p_value: f64,
    pub iterations: usize,
    /// Score U(beta) at the solution.
    pub score: f64,
}

/// Breslow partial log-likelihood of the binary-covariate model, with its
/// score and observed information.
struct PartialLikelihood {
    rows: Vec<RiskRow>,
}

impl PartialLikelihood {
    fn eval(&self, beta: f64) -> (f64, f64, f64) {
        let eb = beta.exp();
        let (mut ll, mut u, mut info) = (0.0, 0.0, 0.0);
        for row in &self.rows {
            let d = (row.d[0] + row.d[1]) as f64;
            let s0 = row.n[0] as f64 + row.n[1] as f64 * eb;
            let frac = row.n[1] as f64 * eb / s0;
            ll += beta * row.d[1] as f64 - d * s0.ln();
            u += row.d[1] as f64 - d * frac;
            info += d * frac * (1.0 - frac);
        }
        (ll, u, info)
    }
}

pub const COX_TOL: f64 = 1e-10;
pub const COX_MAX_ITER: usize = 50;

/// Univariate Cox fit of the group indicator (TMB-H = 1) by Newton's
/// method with step halving. HR < 1 means TMB-H survives longer.
pub fn cox_hr(records: &[SurvivalRecord]) -> Result<CoxResult> {
    check_times(records)?;
    let group = |r: &SurvivalRecord| usize::from(r.group.is_high());
    let table = risk_table(&records.iter().map(|r| (r.time, r.event, group(r))).collect::<Vec<_>>());
    if table.rows.is_empty() {
        return Err(Error::UndefinedMetric("cox_hr: no events observed".into()));
    }
    // Limits of the score as beta -> +inf / -inf decide whether a finite
    // maximum exists.
    let (mut u_pos, mut u_neg) = (0i64, 0i64);
    for row in &table.rows {
        let d = (row.d[0] + row.d[1]) as i64;
        u_pos += row.d[1] as i64 - d * i64::from(row.n[1] > 0);
        u_neg += row.d[1] as i64 - d * i64::from(row.n[0] == 0);
    }
    if u_pos >= 0 || u_neg <= 0 {
        let events: [usize; 2] = table.rows.iter().fold([0, 0], |acc, r| [acc[0] + r.d[0], acc[1] + r.d[1]]);
        return Err(Error::Divergence(format!(
            "cox_hr: monotone partial likelihood (events TMB_L={}, TMB_H={}); the coefficient has no finite maximum",
            events[0], events[1]
        )));
    }
    let pl = PartialLikelihood { rows: table.rows };
    let mut beta = 0.0;
    let (mut ll, mut u, mut info) = pl.eval(beta);
    let mut iterations = 0;
    while iterations < COX_MAX_ITER {
        iterations += 1;
        if info <= 0.0 {
            return Err(Error::Divergence("cox_hr: information vanished".into()));
        }
        let mut step = u / info;
        let mut next = pl.eval(beta + step);
        let mut halvings = 0;
        while next.0 < ll && halvings < 30 {
            step /= 2.0;
            next = pl.eval(beta + step);
            halvings += 1;
        }
        beta += step;
        (ll, u, info) = next;
        if step.abs() < COX_TOL {
            break;
        }
    }
    if !beta.is_finite() || info <= 0.0 {
        return Err(Error::Divergence(format!("cox_hr: Newton iteration diverged (beta={beta})")));
    }
    let se = 1.0 / info.sqrt();
    Ok(CoxResult {
        beta,
        se,
        hazard_ratio: beta.exp(),
        ci_lo: (beta - 1.96 * se).exp(),
        ci_hi: (beta + 1.96 * se).exp(),
        p_value: normal_two_sided_p(beta / se),
        iterations,
        score: u,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: usize, time: f64, event: bool, high: bool) -> SurvivalRecord {
        SurvivalRecord {
            patient_id: format!("p{id}"),
            time,
            event,
            group: TmbLabel::from_high(high),
        }
    }

    #[test]
    fn km_all_censored() {
        let r: Vec<_> = (0..4).map(|i| rec(i, i as f64 + 1.0, false, false)).collect();
        let km = kaplan_meier(&r).unwrap();
        assert!(km.steps.is_empty());
        assert_eq!(km.survival_at(100.0), 1.0);
    }

    #[test]
    fn km_two_events() {
        let km = kaplan_meier(&[rec(0, 1.0, true, false), rec(1, 2.0, true, false)]).unwrap();
        assert_eq!(km.survival_at(0.5), 1.0);
        assert_eq!(km.survival_at(1.0), 0.5);
        assert_eq!(km.survival_at(1.99), 0.5);
        assert_eq!(km.survival_at(2.0), 0.0);
    }

    #[test]
    fn km_mixed_censoring_table() {
        // t: 2 (event), 3 (censored), 5 (event), 7 (event)
        // S(2) = 3/4, S(5) = 3/4 * (1 - 1/2) = 3/8, S(7) = 0
        let r = [rec(0, 2.0, true, false), rec(1, 3.0, false, false), rec(2, 5.0, true, false), rec(3, 7.0, true, false)];
        let km = kaplan_meier(&r).unwrap();
        let s: Vec<(f64, f64, usize)> = km.steps.iter().map(|s| (s.time, s.survival, s.at_risk)).collect();
        assert_eq!(s, vec![(2.0, 0.75, 4), (5.0, 0.375, 2), (7.0, 0.0, 1)]);
    }

    #[test]
    fn log_rank_identical_groups() {
        let a = [rec(0, 1.0, true, false), rec(1, 3.0, false, false), rec(2, 4.0, true, false)];
        let lr = log_rank(&a, &a).unwrap();
        assert_eq!(lr.chi_square, 0.0);
        assert_eq!(lr.p_value, 1.0);
    }

    #[test]
    fn log_rank_six_subjects_by_hand() {
        // A: 1 event, 3 event, 5 censored; B: 2 event, 4 event, 6 event
        let a = [rec(0, 1.0, true, false), rec(1, 3.0, true, false), rec(2, 5.0, false, false)];
        let b = [rec(3, 2.0, true, true), rec(4, 4.0, true, true), rec(5, 6.0, true, true)];
        // event times with (n_a, n, d_a, d):
        // t=1 (3,6,1,1) t=2 (2,5,0,1) t=3 (2,4,1,1) t=4 (1,3,0,1) t=6 (0,1,0,1)
        let rows = [(3.0, 6.0, 1.0), (2.0, 5.0, 0.0), (2.0, 4.0, 1.0), (1.0, 3.0, 0.0), (0.0, 1.0, 0.0)];
        let (mut o, mut e, mut v) = (0.0, 0.0, 0.0);
        for (na, n, da) in rows {
            o += da;
            e += na / n;
            if n > 1.0 {
                v += (na / n) * (1.0 - na / n) * (n - 1.0) / (n - 1.0);
            }
        }
        let lr = log_rank(&a, &b).unwrap();
        assert!((lr.observed_a - o).abs() < 1e-15);
        assert!((lr.expected_a - e).abs() < 1e-15);
        assert!((lr.chi_square - (o - e) * (o - e) / v).abs() < 1e-12);
        let swapped = log_rank(&b, &a).unwrap();
        assert!((swapped.chi_square - lr.chi_square).abs() < 1e-12);
    }

    #[test]
    fn log_rank_needs_events() {
        let a = [rec(0, 1.0, false, false)];
        assert!(matches!(log_rank(&a, &a), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn cox_detects_monotone_likelihood() {
        // every TMB-H subject dies before any TMB-L event
        let r = [rec(0, 1.0, true, true), rec(1, 2.0, true, true), rec(2, 3.0, false, false), rec(3, 4.0, false, false)];
        assert!(matches!(cox_hr(&r), Err(Error::Divergence(_))));
    }

    #[test]
    fn cox_antisymmetry() {
        let r = [
            rec(0, 1.0, true, true),
            rec(1, 2.0, true, false),
            rec(2, 3.0, true, true),
            rec(3, 4.0, false, false),
            rec(4, 5.0, true, false),
            rec(5, 6.0, true, true),
            rec(6, 7.0, true, false),
            rec(7, 8.0, false, true),
        ];
        let flipped: Vec<_> = r
            .iter()
            .map(|x| SurvivalRecord {
                group: TmbLabel::from_high(!x.group.is_high()),
                ..x.clone()
            })
            .collect();
        let a = cox_hr(&r).unwrap();
        let b = cox_hr(&flipped).unwrap();
        assert!((a.hazard_ratio - 1.0 / b.hazard_ratio).abs() < 1e-8);
        assert!(a.score.abs() < 1e-8);
        assert!(a.ci_lo <= a.hazard_ratio && a.hazard_ratio <= a.ci_hi);
    }
}
