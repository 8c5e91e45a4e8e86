use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::labels::PatientLabel;
use crate::error::{Error, Result};

/// Fold index of each patient, aligned with `patients`.
///
/// Patients are grouped by (cancer type, label). Each group is sorted by
/// id, shuffled with the seeded generator and dealt round-robin; the
/// dealing position carries over from one group to the next so overall
/// fold sizes also stay within one of each other.
pub fn stratified_kfold(patients: &[PatientLabel], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::Config(format!("folds must be >= 2, got {k}")));
    }
    let mut ids = BTreeSet::new();
    for p in patients {
        if !ids.insert(p.patient_id.as_str()) {
            return Err(Error::invalid(format!("patient {} listed twice", p.patient_id)));
        }
    }
    let mut strata: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, p) in patients.iter().enumerate() {
        strata.entry((p.cancer_type.index(), p.label.class_index())).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold = vec![0usize; patients.len()];
    let mut next = 0usize;
    for mut members in strata.into_values() {
        if members.len() < k {
            log::warn!(
                "stratum ({}, {}) has {} patients, fewer than {k} folds",
                patients[members[0]].cancer_type,
                patients[members[0]].label,
                members.len()
            );
        }
        members.sort_by(|&a, &b| patients[a].patient_id.cmp(&patients[b].patient_id));
        members.shuffle(&mut rng);
        for m in members {
            fold[m] = next % k;
            next += 1;
        }
    }
    Ok(fold)
}
