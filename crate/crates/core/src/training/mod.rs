//! Cross-validated training of the per-magnification networks.

mod config;
mod cv;
mod ema;
mod ensemble_fit;
mod folds;
mod labels;
mod optimizer;
mod trainer;

pub use config::TrainConfig;
pub use cv::{cross_validate, patient_scale_probs, CvResult, FoldModel, OofPrediction};
pub use ema::ema_update;
pub use ensemble_fit::{fit_ensemble_weights, GRID_STEPS};
pub use folds::stratified_kfold;
pub use labels::{binarize_label, patient_labels, PatientLabel, DEFAULT_TMB_CUTOFF};
pub use optimizer::Adam;
pub use trainer::{class_weights, predict, scale_seed, train_fold, LabeledGraph, LogRow, TrainLog, TrainedScale};
