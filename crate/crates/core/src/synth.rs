//! Synthetic cohorts with planted, spatially clustered signal tiles.
//!
//! Background tile features are standard normal. In a TMB-H slide a
//! contiguous blob of tiles (the ones nearest a random center tile) is
//! shifted by `shift * u_m`, where `u_m` is a unit direction specific to
//! magnification `m`. Each magnification sees independent noise and an
//! independently placed blob, so the scales carry the same label through
//! different evidence.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::FeatureBag;
use crate::error::{Error, Result};
use crate::evaluation::{roc_auc, SurvivalRecord};
use crate::ingest::TILE_SIZE;
use crate::types::{CancerType, Magnification, TmbLabel};

fn d_n() -> usize {
    200
}
fn d_mix() -> [f64; 7] {
    [1.0; 7]
}
fn d_frac() -> f64 {
    0.27
}
fn d_signal() -> f64 {
    0.42
}
fn d_shift() -> f64 {
    0.298
}
fn d_tmin() -> usize {
    50
}
fn d_tmax() -> usize {
    150
}
fn d_dim() -> usize {
    4
}
fn d_hr() -> f64 {
    0.75
}
fn d_median() -> f64 {
    24.0
}
fn d_follow() -> f64 {
    240.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticCohortSpec {
    pub seed: u64,
    #[serde(default = "d_n")]
    pub n_patients: usize,
    /// Relative frequency of each cancer type, in `CancerType::ALL` order.
    #[serde(default = "d_mix")]
    pub cancer_mix: [f64; 7],
    #[serde(default = "d_frac")]
    pub tmb_h_fraction: f64,
    /// Fraction of tiles in a TMB-H slide that carry the signal.
    #[serde(default = "d_signal")]
    pub signal_fraction: f64,
    /// Length of the mean shift applied to signal tiles.
    #[serde(default = "d_shift")]
    pub shift: f64,
    #[serde(default = "d_tmin")]
    pub tiles_min: usize,
    #[serde(default = "d_tmax")]
    pub tiles_max: usize,
    #[serde(default = "d_dim")]
    pub feature_dim: usize,
    /// Hazard of TMB-H relative to TMB-L.
    #[serde(default = "d_hr")]
    pub hazard_ratio: f64,
    /// Median survival of TMB-L patients, months.
    #[serde(default = "d_median")]
    pub median_survival: f64,
    /// Censoring times are uniform on [0, follow_up], months.
    #[serde(default = "d_follow")]
    pub follow_up: f64,
}

impl SyntheticCohortSpec {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            n_patients: d_n(),
            cancer_mix: d_mix(),
            tmb_h_fraction: d_frac(),
            signal_fraction: d_signal(),
            shift: d_shift(),
            tiles_min: d_tmin(),
            tiles_max: d_tmax(),
            feature_dim: d_dim(),
            hazard_ratio: d_hr(),
            median_survival: d_median(),
            follow_up: d_follow(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic cohort: {m}")));
        if self.n_patients < 4 {
            return bad("n_patients must be >= 4");
        }
        if !(0.0..=1.0).contains(&self.tmb_h_fraction) || !(0.0..=1.0).contains(&self.signal_fraction) {
            return bad("fractions must lie in [0, 1]");
        }
        if self.cancer_mix.iter().any(|w| !(*w >= 0.0)) || self.cancer_mix.iter().sum::<f64>() <= 0.0 {
            return bad("cancer_mix needs non-negative weights with a positive sum");
        }
        if !(self.shift >= 0.0 && self.shift.is_finite()) {
            return bad("shift must be finite and >= 0");
        }
        if self.tiles_min == 0 || self.tiles_min > self.tiles_max {
            return bad("need 1 <= tiles_min <= tiles_max");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be >= 1");
        }
        if !(self.hazard_ratio > 0.0 && self.median_survival > 0.0 && self.follow_up > 0.0) {
            return bad("hazard_ratio, median_survival and follow_up must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPatient {
    pub patient_id: String,
    pub cancer_type: CancerType,
    pub label: TmbLabel,
    pub tmb: f64,
    pub total_mutation_count: i64,
    pub survival: SurvivalRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSlide {
    pub bag: FeatureBag,
    /// Ground-truth signal flag per tile.
    pub signal: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCohort {
    pub spec: SyntheticCohortSpec,
    /// Unit shift direction per magnification, indexed by `Magnification::index`.
    pub directions: [Vec<f64>; 3],
    pub patients: Vec<SyntheticPatient>,
    /// One slide per patient per magnification, patient-major.
    pub slides: Vec<SyntheticSlide>,
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Row-major grid positions of `n` tiles in a roughly square layout.
fn grid_coords(n: usize) -> Vec<[i32; 2]> {
    let cols = (n as f64).sqrt().ceil() as usize;
    (0..n)
        .map(|i| [((i % cols) as u32 * TILE_SIZE) as i32, ((i / cols) as u32 * TILE_SIZE) as i32])
        .collect()
}

/// The `k` tiles nearest to `center` by (squared distance, index).
fn blob(coords: &[[i32; 2]], center: usize, k: usize) -> Vec<bool> {
    let c = coords[center];
    let mut order: Vec<(i64, usize)> = coords
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let dx = (p[0] - c[0]) as i64;
            let dy = (p[1] - c[1]) as i64;
            (dx * dx + dy * dy, i)
        })
        .collect();
    order.sort_unstable();
    let mut flags = vec![false; coords.len()];
    for &(_, i) in order.iter().take(k) {
        flags[i] = true;
    }
    flags
}

/// Member lists of the blob around every possible center.
fn all_blobs(coords: &[[i32; 2]], signal_fraction: f64) -> Vec<Vec<usize>> {
    let n = coords.len();
    let k = ((signal_fraction * n as f64).round() as usize).clamp(1, n);
    (0..n)
        .map(|c| {
            let flags = blob(coords, c, k);
            (0..n).filter(|&i| flags[i]).collect()
        })
        .collect()
}

/// log( mean over centers of prod over the blob of exp(delta * proj - delta^2 / 2) )
fn blob_llr(proj: &[f64], blobs: &[Vec<usize>], delta: f64) -> f64 {
    let terms: Vec<f64> = blobs
        .iter()
        .map(|b| b.iter().map(|&i| delta * proj[i] - delta * delta / 2.0).sum())
        .collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + (terms.iter().map(|t| (t - max).exp()).sum::<f64>() / terms.len() as f64).ln()
}

/// TMB-H flags with the cohort-wide count fixed at `round(fraction * n)`
/// and split across cancer types by largest remainder, so every type carries
/// (up to rounding) the same prevalence.
fn assign_labels(rng: &mut ChaCha8Rng, types: &[CancerType], fraction: f64) -> Vec<bool> {
    let n = types.len();
    let n_high = (fraction * n as f64).round() as usize;
    let members: Vec<Vec<usize>> = CancerType::ALL
        .iter()
        .map(|ct| (0..n).filter(|&i| types[i] == *ct).collect())
        .collect();
    let quota: Vec<f64> = members.iter().map(|m| fraction * m.len() as f64).collect();
    let mut counts: Vec<usize> = quota.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..members.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quota[a] - quota[a].floor(), quota[b] - quota[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = n_high.saturating_sub(counts.iter().sum());
    for &t in order.iter().cycle().take(order.len() * 2) {
        if left == 0 {
            break;
        }
        if counts[t] < members[t].len() {
            counts[t] += 1;
            left -= 1;
        }
    }
    let mut high = vec![false; n];
    for (m, &c) in members.iter().zip(&counts) {
        let mut m = m.clone();
        m.shuffle(rng);
        for &i in &m[..c] {
            high[i] = true;
        }
    }
    high
}

/// Deterministic cohort for `spec`. Random draws do not depend on
/// `spec.shift`, so cohorts differing only in shift share their noise.
pub fn generate_synthetic_cohort(spec: &SyntheticCohortSpec) -> Result<SyntheticCohort> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.feature_dim;
    let directions = [unit_vector(&mut rng, d), unit_vector(&mut rng, d), unit_vector(&mut rng, d)];
    let mix_total: f64 = spec.cancer_mix.iter().sum();
    let cancer_types: Vec<CancerType> = (0..spec.n_patients)
        .map(|_| {
            let mut u = rng.random::<f64>() * mix_total;
            for (ct, w) in CancerType::ALL.iter().zip(spec.cancer_mix) {
                if u < w {
                    return *ct;
                }
                u -= w;
            }
            CancerType::ALL[6]
        })
        .collect();
    let is_high = assign_labels(&mut rng, &cancer_types, spec.tmb_h_fraction);
    let base_rate = std::f64::consts::LN_2 / spec.median_survival;

    let mut patients = Vec::with_capacity(spec.n_patients);
    let mut slides = Vec::with_capacity(spec.n_patients * 3);
    for (i, (&high, &cancer_type)) in is_high.iter().zip(&cancer_types).enumerate() {
        let patient_id = format!("SYN-{i:04}");
        let tmb = if high {
            10.0 + 0.5 + rng.random::<f64>() * 40.0
        } else {
            0.2 + rng.random::<f64>() * 9.7
        };
        let rate = base_rate * if high { spec.hazard_ratio } else { 1.0 };
        let t_event: f64 = Exp::new(rate).expect("positive rate").sample(&mut rng);
        let t_censor = rng.random::<f64>() * spec.follow_up;
        let label = TmbLabel::from_high(high);
        patients.push(SyntheticPatient {
            patient_id: patient_id.clone(),
            cancer_type,
            label,
            tmb,
            total_mutation_count: (28.0 * tmb).round() as i64,
            survival: SurvivalRecord {
                patient_id: patient_id.clone(),
                time: t_event.min(t_censor),
                event: t_event <= t_censor,
                group: label,
            },
        });

        for mag in Magnification::ALL {
            let n = rng.random_range(spec.tiles_min..=spec.tiles_max);
            let coords = grid_coords(n);
            let center = rng.random_range(0..n);
            let k = ((spec.signal_fraction * n as f64).round() as usize).clamp(1, n);
            let signal = if high { blob(&coords, center, k) } else { vec![false; n] };
            let dir = &directions[mag.index()];
            let features = Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal));
            let features = Array2::from_shape_fn((n, d), |(r, c)| {
                let v = features[[r, c]] + if signal[r] { spec.shift * dir[c] } else { 0.0 };
                // stored bags are 32-bit
                v as f32 as f64
            });
            let bag = FeatureBag::new(
                format!("{patient_id}-x{mag}"),
                &patient_id,
                cancer_type,
                mag,
                features,
                coords,
            )?;
            slides.push(SyntheticSlide { bag, signal });
        }
    }
    Ok(SyntheticCohort {
        spec: spec.clone(),
        directions,
        patients,
        slides,
    })
}

impl SyntheticCohort {
    pub fn slide(&self, patient: usize, mag: Magnification) -> &SyntheticSlide {
        &self.slides[patient * 3 + mag.index()]
    }

    /// Exact log-likelihood ratio (TMB-H against TMB-L) of one slide under
    /// the generative model, marginalizing the uniformly drawn blob center.
    pub fn slide_llr(&self, slide: &SyntheticSlide) -> f64 {
        let dir = &self.directions[slide.bag.magnification.index()];
        let proj: Vec<f64> = slide
            .bag
            .features
            .rows()
            .into_iter()
            .map(|row| row.iter().zip(dir).map(|(a, b)| a * b).sum())
            .collect();
        let blobs = all_blobs(&slide.bag.coords, self.spec.signal_fraction);
        blob_llr(&proj, &blobs, self.spec.shift)
    }

    /// Oracle score per patient: summed log-likelihood ratio over the
    /// given magnifications.
    pub fn oracle_scores(&self, mags: &[Magnification]) -> Vec<f64> {
        (0..self.patients.len())
            .map(|p| mags.iter().map(|&m| self.slide_llr(self.slide(p, m))).sum())
            .collect()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.patients.iter().map(|p| p.label.is_high()).collect()
    }

    /// AUC of the all-scale oracle score.
    pub fn oracle_auc(&self) -> Result<f64> {
        roc_auc(&self.oracle_scores(&Magnification::ALL), &self.labels())
    }
}

/// Shift at which the all-scale oracle AUC reaches `target` on a cohort
/// drawn with `spec` (bisection over [0, 8]).
pub fn calibrate_shift(spec: &SyntheticCohortSpec, target: f64, iterations: usize) -> Result<f64> {
    if !(0.5..1.0).contains(&target) {
        return Err(Error::invalid(format!("target AUC {target} outside [0.5, 1)")));
    }
    // The noise does not depend on the shift, so draw once at shift 0 and
    // add the shift to the projections of signal tiles.
    let base = generate_synthetic_cohort(&SyntheticCohortSpec {
        shift: 0.0,
        ..spec.clone()
    })?;
    let parts: Vec<(Vec<f64>, Vec<bool>, Vec<Vec<usize>>)> = base
        .slides
        .iter()
        .map(|s| {
            let dir = &base.directions[s.bag.magnification.index()];
            let proj = s.bag.features.rows().into_iter().map(|r| r.iter().zip(dir).map(|(a, b)| a * b).sum()).collect();
            (proj, s.signal.clone(), all_blobs(&s.bag.coords, spec.signal_fraction))
        })
        .collect();
    let labels = base.labels();
    let auc_at = |delta: f64| -> Result<f64> {
        let scores: Vec<f64> = parts
            .chunks(3)
            .map(|patient| {
                patient
                    .iter()
                    .map(|(proj, signal, blobs)| {
                        let shifted: Vec<f64> =
                            proj.iter().zip(signal).map(|(p, &s)| if s { p + delta } else { *p }).collect();
                        blob_llr(&shifted, blobs, delta)
                    })
                    .sum()
            })
            .collect();
        roc_auc(&scores, &labels)
    };
    let (mut lo, mut hi) = (0.0, 8.0);
    for _ in 0..iterations {
        let mid = (lo + hi) / 2.0;
        if auc_at(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((lo + hi) / 2.0)
}
