//! Patient-level statistics: ROC analysis, cutoff transfer, survival
//! analysis, rank tests and subgroup breakdowns.

pub mod correlation;
pub mod mann_whitney;
pub mod report;
pub mod roc;
pub mod subgroup;
pub mod survival;

pub use correlation::{derive_count_cutoff, pearson_r};
pub use mann_whitney::{mann_whitney_u, MannWhitney};
pub use report::{
    evaluate, format_p_value, read_predictions_csv, write_evaluation, write_predictions_csv, EvalConfig, EvalReport,
    Evaluation, PatientPrediction, SurvivalSummary,
};
pub use roc::{auc_counts, bootstrap_ci, bootstrap_indices, operating_point, roc_auc, roc_curve, ConfidenceInterval, OperatingPoint, RocPoint};
pub use subgroup::{subgroup_eval, summarize_auc, AucSummary, Stratum, CANCER_TYPE_KEY};
pub use survival::{cox_hr, kaplan_meier, log_rank, CoxResult, KmCurve, KmStep, LogRank, SurvivalRecord};
