use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::SurvivalRecord;
use crate::ingest::ManifestEntry;
use crate::types::{CancerType, TmbLabel};

/// TMB cutoff in mutations per megabase.
pub const DEFAULT_TMB_CUTOFF: f64 = 10.0;

/// TMB-H iff `tmb > cutoff`.
pub fn binarize_label(tmb: f64, cutoff: f64) -> Result<TmbLabel> {
    if tmb.is_nan() || tmb < 0.0 {
        return Err(Error::invalid(format!("TMB must be non-negative, got {tmb}")));
    }
    Ok(TmbLabel::from_high(tmb > cutoff))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientLabel {
    pub patient_id: String,
    pub cancer_type: CancerType,
    pub tmb_value: Option<f64>,
    pub total_mutation_count: Option<i64>,
    pub label: TmbLabel,
    pub survival: Option<SurvivalRecord>,
}

/// One label per patient from the manifest. A TMB value decides the label
/// through `cutoff`; an explicit label must agree with it. Slides of the
/// same patient must agree on every patient-level field.
pub fn patient_labels(entries: &[ManifestEntry], cutoff: f64) -> Result<Vec<PatientLabel>> {
    let mut out: BTreeMap<&str, PatientLabel> = BTreeMap::new();
    for e in entries {
        let label = match (e.tmb, e.label) {
            (Some(t), explicit) => {
                let derived = binarize_label(t, cutoff)?;
                if explicit.is_some_and(|l| l != derived) {
                    return Err(Error::Data(format!(
                        "patient {}: label {} disagrees with TMB {t} at cutoff {cutoff}",
                        e.patient_id,
                        explicit.unwrap()
                    )));
                }
                derived
            }
            (None, Some(l)) => l,
            (None, None) => {
                return Err(Error::Data(format!("slide {}: neither tmb nor label given", e.slide_id)));
            }
        };
        let survival = match (e.survival_months, e.survival_event) {
            (Some(time), Some(event)) => Some(SurvivalRecord {
                patient_id: e.patient_id.clone(),
                time,
                event,
                group: label,
            }),
            _ => None,
        };
        let p = PatientLabel {
            patient_id: e.patient_id.clone(),
            cancer_type: e.cancer_type,
            tmb_value: e.tmb,
            total_mutation_count: e.total_mutation_count,
            label,
            survival,
        };
        match out.get(e.patient_id.as_str()) {
            Some(prev) if *prev != p => {
                return Err(Error::Data(format!("patient {} has conflicting slide annotations", e.patient_id)));
            }
            Some(_) => {}
            None => {
                out.insert(&e.patient_id, p);
            }
        }
    }
    Ok(out.into_values().collect())
}
