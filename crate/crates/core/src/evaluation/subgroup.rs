use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::report::PatientPrediction;
use super::roc::{bootstrap_ci, roc_auc, ConfidenceInterval};
use crate::error::{Error, Result};

/// Key that stratifies by cancer type instead of a metadata column.
pub const CANCER_TYPE_KEY: &str = "cancer_type";

/// AUC of one patient set. `auc` and `ci` are `None` when only one class
/// is present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucSummary {
    pub n: usize,
    pub n_positive: usize,
    pub auc: Option<f64>,
    pub ci: Option<ConfidenceInterval>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

pub fn summarize_auc(scores: &[f64], labels: &[bool], n_boot: usize, level: f64, seed: u64) -> Result<AucSummary> {
    let n_positive = labels.iter().filter(|l| **l).count();
    match roc_auc(scores, labels) {
        Ok(auc) => Ok(AucSummary {
            n: labels.len(),
            n_positive,
            auc: Some(auc),
            ci: Some(bootstrap_ci(scores, labels, n_boot, level, seed)?),
            note: None,
        }),
        Err(Error::UndefinedMetric(msg)) => Ok(AucSummary {
            n: labels.len(),
            n_positive,
            auc: None,
            ci: None,
            note: Some(msg),
        }),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub value: String,
    #[serde(flatten)]
    pub summary: AucSummary,
}

fn stratum_value<'a>(p: &'a PatientPrediction, key: &str) -> Option<&'a str> {
    if key == CANCER_TYPE_KEY {
        Some(p.cancer_type.code())
    } else {
        p.metadata.get(key).map(String::as_str)
    }
}

/// AUC with bootstrap CI within each value of `key`, ordered by value.
/// `key` is either `cancer_type` or a metadata column.
pub fn subgroup_eval(preds: &[PatientPrediction], key: &str, n_boot: usize, level: f64, seed: u64) -> Result<Vec<Stratum>> {
    if preds.is_empty() {
        return Err(Error::invalid("subgroup_eval: no predictions"));
    }
    let mut groups: BTreeMap<&str, (Vec<f64>, Vec<bool>)> = BTreeMap::new();
    for p in preds {
        let value = stratum_value(p, key).ok_or_else(|| {
            Error::invalid(format!("unknown stratification key {key:?} (missing for patient {})", p.patient_id))
        })?;
        let g = groups.entry(value).or_default();
        g.0.push(p.prob);
        g.1.push(p.label.is_high());
    }
    groups
        .into_iter()
        .map(|(value, (s, l))| {
            Ok(Stratum {
                value: value.to_string(),
                summary: summarize_auc(&s, &l, n_boot, level, seed)?,
            })
        })
        .collect()
}
