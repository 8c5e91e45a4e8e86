//! Patient-level evaluation report and its file formats.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mann_whitney::{mann_whitney_u, MannWhitney};
use super::roc::{operating_point, roc_curve, OperatingPoint, RocPoint};
use super::subgroup::{subgroup_eval, summarize_auc, AucSummary, Stratum, CANCER_TYPE_KEY};
use super::survival::{cox_hr, kaplan_meier, log_rank, KmCurve, SurvivalRecord};
use crate::error::{Error, Result};
use crate::types::{CancerType, TmbLabel};

/// One row of the predictions CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientPrediction {
    pub patient_id: String,
    pub cancer_type: CancerType,
    /// `5`, `10`, `20` or `ensemble`.
    pub scale: String,
    /// Predicted probability of TMB-H.
    pub prob: f64,
    pub label: TmbLabel,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

const FIXED_COLUMNS: [&str; 5] = ["patient_id", "cancer_type", "scale", "prob", "label"];

pub fn write_predictions_csv(path: &Path, preds: &[PatientPrediction]) -> Result<()> {
    let keys: BTreeSet<&str> = preds.iter().flat_map(|p| p.metadata.keys().map(String::as_str)).collect();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let header: Vec<&str> = FIXED_COLUMNS.iter().copied().chain(keys.iter().copied()).collect();
    let werr = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    w.write_record(&header).map_err(werr)?;
    for p in preds {
        let mut row = vec![
            p.patient_id.clone(),
            p.cancer_type.code().to_string(),
            p.scale.clone(),
            format!("{:?}", p.prob),
            p.label.code().to_string(),
        ];
        row.extend(keys.iter().map(|k| p.metadata.get(*k).cloned().unwrap_or_default()));
        w.write_record(&row).map_err(werr)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads the predictions CSV. Columns beyond the fixed five become
/// metadata; empty metadata cells are dropped.
pub fn read_predictions_csv(path: &Path) -> Result<Vec<PatientPrediction>> {
    let derr = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut rdr = csv::Reader::from_path(path).map_err(derr)?;
    let header: Vec<String> = rdr.headers().map_err(derr)?.iter().map(str::to_string).collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("{}: missing column {name}", path.display())))
    };
    let idx: Vec<usize> = FIXED_COLUMNS.iter().map(|c| col(c)).collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(derr)?;
        let bad = |what: &str| Error::Data(format!("{}: row {}: bad {what}", path.display(), line + 2));
        let get = |i: usize| rec.get(idx[i]).unwrap_or("");
        let mut metadata = BTreeMap::new();
        for (j, h) in header.iter().enumerate() {
            if !FIXED_COLUMNS.contains(&h.as_str()) {
                if let Some(v) = rec.get(j).filter(|v| !v.is_empty()) {
                    metadata.insert(h.clone(), v.to_string());
                }
            }
        }
        out.push(PatientPrediction {
            patient_id: get(0).to_string(),
            cancer_type: get(1).parse().map_err(|_| bad("cancer_type"))?,
            scale: get(2).to_string(),
            prob: get(3).parse().map_err(|_| bad("prob"))?,
            label: get(4).parse().map_err(|_| bad("label"))?,
            metadata,
        });
    }
    Ok(out)
}

/// "p = 0.04321" with four significant digits, or "p < 0.0001".
pub fn format_p_value(p: f64) -> String {
    if p < 1e-4 {
        return "p < 0.0001".to_string();
    }
    let decimals = (3 - p.log10().floor() as i32).max(0) as usize;
    format!("p = {p:.decimals$}")
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub n_boot: usize,
    pub level: f64,
    pub seed: u64,
    /// Metadata keys to stratify by, in addition to cancer type.
    pub subgroup_keys: Vec<String>,
}

impl EvalConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            n_boot: 2000,
            level: 0.95,
            seed,
            subgroup_keys: Vec::new(),
        }
    }
}

/// Survival comparison of predicted TMB-H against predicted TMB-L, split
/// at the operating-point threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalSummary {
    pub n_high: usize,
    pub n_low: usize,
    pub events: usize,
    #[serde(rename = "hr")]
    pub hazard_ratio: Option<f64>,
    pub hr_ci: Option<[f64; 2]>,
    pub cox_p: Option<f64>,
    pub cox_p_text: Option<String>,
    pub log_rank_chi_square: Option<f64>,
    pub log_rank_p: Option<f64>,
    pub log_rank_p_text: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scale: String,
    pub n_patients: usize,
    pub overall: AucSummary,
    pub operating_point: OperatingPoint,
    /// Predicted probability, TMB-H patients against TMB-L patients.
    pub score_by_label: MannWhitney,
    pub score_by_label_p_text: String,
    pub per_cancer_type: Vec<Stratum>,
    pub subgroups: BTreeMap<String, Vec<Stratum>>,
    pub survival: Option<SurvivalSummary>,
}

pub struct Evaluation {
    pub report: EvalReport,
    pub roc: Vec<RocPoint>,
    /// Kaplan-Meier curves keyed by predicted group.
    pub km: Vec<(TmbLabel, KmCurve)>,
}

/// Evaluates the predictions of one scale. `survival` maps patient ids to
/// (months, event observed); patients absent from it are left out of the
/// survival analysis.
pub fn evaluate(
    preds: &[PatientPrediction],
    survival: &BTreeMap<String, (f64, bool)>,
    cfg: &EvalConfig,
) -> Result<Evaluation> {
    if preds.is_empty() {
        return Err(Error::invalid("no predictions to evaluate"));
    }
    let mut seen = BTreeSet::new();
    for p in preds {
        if !(0.0..=1.0).contains(&p.prob) {
            return Err(Error::invalid(format!("patient {}: probability {} outside [0, 1]", p.patient_id, p.prob)));
        }
        if !seen.insert(&p.patient_id) {
            return Err(Error::invalid(format!("patient {} predicted twice", p.patient_id)));
        }
    }
    let scale = preds[0].scale.clone();
    if let Some(p) = preds.iter().find(|p| p.scale != scale) {
        return Err(Error::invalid(format!("mixed scales {scale} and {} in one evaluation", p.scale)));
    }
    let scores: Vec<f64> = preds.iter().map(|p| p.prob).collect();
    let labels: Vec<bool> = preds.iter().map(|p| p.label.is_high()).collect();

    let overall = summarize_auc(&scores, &labels, cfg.n_boot, cfg.level, cfg.seed)?;
    if overall.auc.is_none() {
        return Err(Error::UndefinedMetric(overall.note.unwrap_or_default()));
    }
    let op = operating_point(&scores, &labels)?;
    let roc = roc_curve(&scores, &labels)?;
    let (hi, lo): (Vec<f64>, Vec<f64>) = {
        let hi = preds.iter().filter(|p| p.label.is_high()).map(|p| p.prob).collect();
        let lo = preds.iter().filter(|p| !p.label.is_high()).map(|p| p.prob).collect();
        (hi, lo)
    };
    let score_by_label = mann_whitney_u(&hi, &lo)?;

    let per_cancer_type = subgroup_eval(preds, CANCER_TYPE_KEY, cfg.n_boot, cfg.level, cfg.seed)?;
    let mut subgroups = BTreeMap::new();
    for key in &cfg.subgroup_keys {
        subgroups.insert(key.clone(), subgroup_eval(preds, key, cfg.n_boot, cfg.level, cfg.seed)?);
    }

    let records: Vec<SurvivalRecord> = preds
        .iter()
        .filter_map(|p| {
            survival.get(&p.patient_id).map(|&(time, event)| SurvivalRecord {
                patient_id: p.patient_id.clone(),
                time,
                event,
                group: TmbLabel::from_high(p.prob >= op.threshold),
            })
        })
        .collect();
    let (survival_summary, km) = if records.is_empty() {
        (None, Vec::new())
    } else {
        let (s, km) = survival_stats(&records)?;
        (Some(s), km)
    };

    Ok(Evaluation {
        report: EvalReport {
            scale,
            n_patients: preds.len(),
            overall,
            operating_point: op,
            score_by_label_p_text: format_p_value(score_by_label.p_value),
            score_by_label,
            per_cancer_type,
            subgroups,
            survival: survival_summary,
        },
        roc,
        km,
    })
}

fn survival_stats(records: &[SurvivalRecord]) -> Result<(SurvivalSummary, Vec<(TmbLabel, KmCurve)>)> {
    let high: Vec<SurvivalRecord> = records.iter().filter(|r| r.group.is_high()).cloned().collect();
    let low: Vec<SurvivalRecord> = records.iter().filter(|r| !r.group.is_high()).cloned().collect();
    let mut summary = SurvivalSummary {
        n_high: high.len(),
        n_low: low.len(),
        events: records.iter().filter(|r| r.event).count(),
        hazard_ratio: None,
        hr_ci: None,
        cox_p: None,
        cox_p_text: None,
        log_rank_chi_square: None,
        log_rank_p: None,
        log_rank_p_text: None,
        notes: Vec::new(),
    };
    let mut km = Vec::new();
    for (label, group) in [(TmbLabel::High, &high), (TmbLabel::Low, &low)] {
        if !group.is_empty() {
            km.push((label, kaplan_meier(group)?));
        }
    }
    if high.is_empty() || low.is_empty() {
        summary.notes.push("one predicted group is empty".into());
        return Ok((summary, km));
    }
    match log_rank(&high, &low) {
        Ok(lr) => {
            summary.log_rank_chi_square = Some(lr.chi_square);
            summary.log_rank_p = Some(lr.p_value);
            summary.log_rank_p_text = Some(format_p_value(lr.p_value));
        }
        Err(e @ Error::UndefinedMetric(_)) => summary.notes.push(e.to_string()),
        Err(e) => return Err(e),
    }
    match cox_hr(records) {
        Ok(c) => {
            summary.hazard_ratio = Some(c.hazard_ratio);
            summary.hr_ci = Some([c.ci_lo, c.ci_hi]);
            summary.cox_p = Some(c.p_value);
            summary.cox_p_text = Some(format_p_value(c.p_value));
        }
        Err(e @ (Error::UndefinedMetric(_) | Error::Divergence(_))) => summary.notes.push(e.to_string()),
        Err(e) => return Err(e),
    }
    Ok((summary, km))
}

/// Writes `report.json`, `roc.csv` and `km.csv` into `dir`.
pub fn write_evaluation(eval: &Evaluation, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, body: &str| {
        let path = dir.join(name);
        std::fs::File::create(&path)
            .and_then(|mut f| f.write_all(body.as_bytes()))
            .map_err(|e| Error::io(path, e))
    };
    let json = serde_json::to_string_pretty(&eval.report).map_err(|e| Error::Data(e.to_string()))?;
    write("report.json", &json)?;

    let mut roc = String::from("fpr,tpr,threshold\n");
    for p in &eval.roc {
        let t = if p.threshold.is_infinite() { "inf".to_string() } else { format!("{:?}", p.threshold) };
        roc.push_str(&format!("{:?},{:?},{t}\n", p.fpr, p.tpr));
    }
    write("roc.csv", &roc)?;

    let mut km = String::from("time,survival,group\n");
    for (label, curve) in &eval.km {
        km.push_str(&format!("0.0,1.0,{}\n", label.code()));
        for s in &curve.steps {
            km.push_str(&format!("{:?},{:?},{}\n", s.time, s.survival, label.code()));
        }
    }
    write("km.csv", &km)
}
