use std::collections::BTreeMap;

use rayon::prelude::*;

use super::config::TrainConfig;
use super::ensemble_fit::fit_ensemble_weights;
use super::folds::stratified_kfold;
use super::labels::PatientLabel;
use super::trainer::{predict, train_fold, LabeledGraph, TrainedScale};
use crate::error::{Error, Result};
use crate::graph::SlideGraph;
use crate::model::{multiscale_ensemble, Checkpoint, UNIFORM_WEIGHTS};
use crate::types::Magnification;

/// Out-of-fold prediction for one patient.
#[derive(Debug, Clone, PartialEq)]
pub struct OofPrediction {
    pub patient_id: String,
    pub fold: usize,
    /// Mean EMA probability over the patient's slides at each scale.
    pub scale_probs: BTreeMap<Magnification, f64>,
    pub ensemble: f64,
}

#[derive(Debug, Clone)]
pub struct FoldModel {
    pub scales: BTreeMap<Magnification, TrainedScale>,
    pub ensemble_weights: [f64; 3],
}

impl FoldModel {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            scales: self.scales.iter().map(|(m, t)| (*m, t.model.clone())).collect(),
            ensemble_weights: self.ensemble_weights,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CvResult {
    /// Fold of each patient, aligned with the input patients.
    pub fold_of: Vec<usize>,
    pub folds: Vec<FoldModel>,
    /// Aligned with the input patients.
    pub predictions: Vec<OofPrediction>,
}

/// Per-patient probability at one scale: mean over that patient's slides.
pub fn patient_scale_probs(
    slides: &[&SlideGraph],
    probs: &[f64],
) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (g, p) in slides.iter().zip(probs) {
        let e = acc.entry(g.bag.patient_id.clone()).or_insert((0.0, 0));
        e.0 += p;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

/// Stratified k-fold cross-validation over patients. For every fold and
/// magnification an independent network is trained on the other folds
/// and the held-out fold is scored with its EMA parameters. Fold models
/// train in parallel; results do not depend on scheduling.
///
/// With `fit_ensemble_weights` set, each fold's ensemble weights are
/// fitted on the out-of-fold scale predictions of the patients outside
/// that fold; otherwise weights are uniform.
pub fn cross_validate(
    patients: &[PatientLabel],
    slides: &[LabeledGraph],
    mags: &[Magnification],
    cfg: &TrainConfig,
) -> Result<CvResult> {
    cfg.validate()?;
    if mags.is_empty() {
        return Err(Error::invalid("no magnifications selected"));
    }
    let fold_of = stratified_kfold(patients, cfg.folds, cfg.seed)?;
    let index: BTreeMap<&str, usize> = patients.iter().enumerate().map(|(i, p)| (p.patient_id.as_str(), i)).collect();
    for s in slides {
        let pid = s.graph.bag.patient_id.as_str();
        let &i = index
            .get(pid)
            .ok_or_else(|| Error::Data(format!("slide {} belongs to unknown patient {pid}", s.graph.bag.slide_id)))?;
        if s.label != patients[i].label {
            return Err(Error::Data(format!("slide {} label disagrees with patient {pid}", s.graph.bag.slide_id)));
        }
    }
    let fold_of_slide = |s: &LabeledGraph| fold_of[index[s.graph.bag.patient_id.as_str()]];

    let jobs: Vec<(usize, Magnification)> =
        (0..cfg.folds).flat_map(|f| mags.iter().map(move |&m| (f, m))).collect();
    let trained: Vec<(TrainedScale, BTreeMap<String, f64>)> = jobs
        .par_iter()
        .map(|&(f, m)| {
            let train: Vec<&LabeledGraph> = slides
                .iter()
                .filter(|s| s.graph.bag.magnification == m && fold_of_slide(s) != f)
                .collect();
            let held: Vec<&LabeledGraph> = slides
                .iter()
                .filter(|s| s.graph.bag.magnification == m && fold_of_slide(s) == f)
                .collect();
            let t = train_fold(&train, &held, m, cfg)
                .map_err(|e| annotate(e, &format!("fold {f}, x{m}")))?;
            let graphs: Vec<&SlideGraph> = held.iter().map(|s| &s.graph).collect();
            let probs = predict(&graphs, &t.model.ema)?;
            Ok((t, patient_scale_probs(&graphs, &probs)))
        })
        .collect::<Result<_>>()?;

    let mut scale_probs: Vec<BTreeMap<Magnification, f64>> = vec![BTreeMap::new(); patients.len()];
    let mut folds: Vec<FoldModel> = (0..cfg.folds)
        .map(|_| FoldModel {
            scales: BTreeMap::new(),
            ensemble_weights: UNIFORM_WEIGHTS,
        })
        .collect();
    for ((f, m), (t, probs)) in jobs.iter().zip(trained) {
        for (pid, p) in probs {
            scale_probs[index[pid.as_str()]].insert(*m, p);
        }
        folds[*f].scales.insert(*m, t);
    }
    if let Some(i) = scale_probs.iter().position(BTreeMap::is_empty) {
        return Err(Error::Data(format!("patient {} has no slides at the selected magnifications", patients[i].patient_id)));
    }

    if cfg.fit_ensemble_weights {
        for (f, fold) in folds.iter_mut().enumerate() {
            let (probs, labels): (Vec<_>, Vec<_>) = (0..patients.len())
                .filter(|&i| fold_of[i] != f)
                .map(|i| (scale_probs[i].clone(), patients[i].label.is_high()))
                .unzip();
            fold.ensemble_weights = fit_ensemble_weights(&probs, &labels)?;
        }
    }

    let predictions = patients
        .iter()
        .enumerate()
        .map(|(i, p)| {
            Ok(OofPrediction {
                patient_id: p.patient_id.clone(),
                fold: fold_of[i],
                ensemble: multiscale_ensemble(&scale_probs[i], &folds[fold_of[i]].ensemble_weights)?,
                scale_probs: scale_probs[i].clone(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(CvResult {
        fold_of,
        folds,
        predictions,
    })
}

fn annotate(e: Error, ctx: &str) -> Error {
    match e {
        Error::Untrainable(m) => Error::Untrainable(format!("{ctx}: {m}")),
        Error::Divergence(m) => Error::Divergence(format!("{ctx}: {m}")),
        Error::InvalidInput(m) => Error::InvalidInput(format!("{ctx}: {m}")),
        other => other,
    }
}
