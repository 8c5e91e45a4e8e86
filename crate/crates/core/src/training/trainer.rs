use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::ema::ema_update;
use super::optimizer::Adam;
use crate::error::{Error, Result};
use crate::evaluation::roc_auc;
use crate::graph::SlideGraph;
use crate::model::{backward_single_scale, cross_entropy, forward_single_scale, ModelParams, ScaleModel};
use crate::types::{Magnification, TmbLabel};

/// A slide graph with its patient's label.
#[derive(Debug, Clone)]
pub struct LabeledGraph {
    pub graph: SlideGraph,
    pub label: TmbLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    /// `train` or `val`.
    pub split: String,
    pub loss: f64,
    pub auc_online: Option<f64>,
    pub auc_ema: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        let mut out = String::from("epoch,split,loss,auc_online,auc_ema\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:?},{},{}\n",
                r.epoch,
                r.split,
                r.loss,
                opt(r.auc_online),
                opt(r.auc_ema)
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(self.to_csv().as_bytes()))
            .map_err(|e| Error::io(path, e))
    }

    /// Training-split loss per epoch.
    pub fn train_losses(&self) -> Vec<f64> {
        self.rows.iter().filter(|r| r.split == "train").map(|r| r.loss).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainedScale {
    pub model: ScaleModel,
    pub log: TrainLog,
}

/// Generator seed for one magnification's network.
pub fn scale_seed(seed: u64, mag: Magnification) -> u64 {
    let mut z = seed ^ (u64::from(mag.value())).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Loss weights (TMB-L, TMB-H): `n / (2 n_c)` when enabled, else ones.
pub fn class_weights(labels: &[TmbLabel], enabled: bool) -> [f64; 2] {
    if !enabled {
        return [1.0, 1.0];
    }
    let n = labels.len() as f64;
    let high = labels.iter().filter(|l| l.is_high()).count() as f64;
    let low = n - high;
    [
        if low > 0.0 { n / (2.0 * low) } else { 1.0 },
        if high > 0.0 { n / (2.0 * high) } else { 1.0 },
    ]
}

/// Probability of TMB-H for each graph.
pub fn predict(graphs: &[&SlideGraph], params: &ModelParams) -> Result<Vec<f64>> {
    graphs
        .par_iter()
        .map(|g| forward_single_scale(g, params).map(|o| o.prob_tmb_high))
        .collect()
}

fn check_set(set: &[&LabeledGraph], mag: Magnification, dim: usize, what: &str) -> Result<()> {
    for s in set {
        let bag = &s.graph.bag;
        if bag.magnification != mag {
            return Err(Error::invalid(format!(
                "{what} slide {} is x{}, expected x{mag}",
                bag.slide_id, bag.magnification
            )));
        }
        if bag.dim() != dim {
            return Err(Error::invalid(format!(
                "{what} slide {} has feature width {}, model expects {dim}",
                bag.slide_id,
                bag.dim()
            )));
        }
    }
    Ok(())
}

fn auc_or_none(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    match roc_auc(scores, labels) {
        Ok(a) => Ok(Some(a)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Train one magnification's network with minibatch Adam, updating the
/// EMA shadow after every step. Per epoch the log gets a `train` row
/// (mean weighted loss over the epoch's batches, AUC of the online model
/// on those batches) and, when `val` is non-empty, a `val` row (EMA loss,
/// AUC of both models).
pub fn train_fold(
    train: &[&LabeledGraph],
    val: &[&LabeledGraph],
    mag: Magnification,
    cfg: &TrainConfig,
) -> Result<TrainedScale> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Untrainable(format!("x{mag}: empty training set")));
    }
    let labels: Vec<TmbLabel> = train.iter().map(|s| s.label).collect();
    if labels.iter().all(|l| l.is_high()) || labels.iter().all(|l| !l.is_high()) {
        return Err(Error::Untrainable(format!(
            "x{mag}: training set has only {} slides",
            labels[0]
        )));
    }
    check_set(train, mag, cfg.model.input_dim, "training")?;
    check_set(val, mag, cfg.model.input_dim, "validation")?;

    let weights = class_weights(&labels, cfg.class_weighting);
    let mut rng = ChaCha8Rng::seed_from_u64(scale_seed(cfg.seed, mag));
    let mut online = ModelParams::init(&cfg.model, &mut rng);
    let mut ema = online.clone();
    let mut adam = Adam::new(&online, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps);
    adam.weight_decay = cfg.weight_decay;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainLog::default();
    let val_graphs: Vec<&SlideGraph> = val.iter().map(|s| &s.graph).collect();
    let val_labels: Vec<bool> = val.iter().map(|s| s.label.is_high()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen_scores = Vec::with_capacity(train.len());
        let mut seen_labels = Vec::with_capacity(train.len());
        for batch in order.chunks(cfg.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| {
                    let s = train[i];
                    backward_single_scale(&s.graph, &online, s.label, weights[s.label.class_index()])
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grads = online.zeros_like();
            let scale = 1.0 / batch.len() as f64;
            for (r, &i) in results.iter().zip(batch) {
                grads.add_scaled(&r.grads, scale);
                loss_sum += r.loss;
                seen_scores.push(r.output.prob_tmb_high);
                seen_labels.push(train[i].label.is_high());
            }
            adam.step(&mut online, &grads);
            if !online.is_finite() {
                return Err(Error::Divergence(format!(
                    "x{mag}: non-finite parameters after step {} (epoch {epoch})",
                    adam.steps()
                )));
            }
            ema_update(&online, &mut ema, cfg.ema_momentum)?;
        }
        log.rows.push(LogRow {
            epoch,
            split: "train".into(),
            loss: loss_sum / train.len() as f64,
            auc_online: auc_or_none(&seen_scores, &seen_labels)?,
            auc_ema: None,
        });
        if !val.is_empty() {
            let p_online = predict(&val_graphs, &online)?;
            let outs = val_graphs
                .par_iter()
                .map(|g| forward_single_scale(g, &ema))
                .collect::<Result<Vec<_>>>()?;
            let p_ema: Vec<f64> = outs.iter().map(|o| o.prob_tmb_high).collect();
            let loss = outs
                .iter()
                .zip(val)
                .map(|(o, s)| cross_entropy(o.logits, s.label))
                .sum::<f64>()
                / val.len() as f64;
            log.rows.push(LogRow {
                epoch,
                split: "val".into(),
                loss,
                auc_online: auc_or_none(&p_online, &val_labels)?,
                auc_ema: auc_or_none(&p_ema, &val_labels)?,
            });
        }
    }
    Ok(TrainedScale {
        model: ScaleModel { online, ema },
        log,
    })
}
