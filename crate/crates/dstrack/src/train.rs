//! Fitting one component model: summed cross-entropy over labeled times,
//! full unrolling in minibatches of dialogs, fresh OOV noise per epoch,
//! global-norm clipping, ADAM, and early stopping on held-out accuracy.

use crate::error::{Error, Result};
use crate::model::ComponentModel;
use crate::nncore::{AdamConfig, Gradients};
use crate::preprocess::{
    deabstract_distribution, AbstractionAssignment, ClassSet, EncodedDialog,
};
use crate::rng::{derive_seed, seeded_rng};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Which dev-set number drives early stopping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EarlyStopMetric {
    /// Scheduled per-component accuracy (higher is better).
    Accuracy,
    /// Negated per-component L2 (higher is better).
    NegL2,
}

/// Network sizes. The defaults are the standard configuration; tests and
/// experiments may shrink them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetDims {
    pub embed: usize,
    pub input_net: usize,
    pub hidden: usize,
}

impl Default for NetDims {
    fn default() -> Self {
        NetDims {
            embed: crate::model::EMBED_DIM,
            input_net: crate::model::INPUT_NET_DIM,
            hidden: crate::model::HIDDEN_DIM,
        }
    }
}

/// Everything one training run depends on. The canonical JSON of this
/// struct is hashed into checkpoints and reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub minibatch_size: usize,
    pub alpha_oov: f64,
    pub adam: AdamConfig,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub use_scores: bool,
    pub use_transcriptions: bool,
    pub use_abstraction: bool,
    pub early_stop: EarlyStopMetric,
    #[serde(default)]
    pub dims: NetDims,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            minibatch_size: 10,
            alpha_oov: 0.1,
            adam: AdamConfig::default(),
            clip_norm: Some(5.0),
            patience: 5,
            max_epochs: 50,
            seed: 1,
            use_scores: true,
            use_transcriptions: true,
            use_abstraction: true,
            early_stop: EarlyStopMetric::Accuracy,
            dims: NetDims::default(),
        }
    }
}

impl TrainConfig {
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn sha256(&self) -> String {
        crate::sha256_hex(self.canonical_json().as_bytes())
    }
}

/// One dev-set dialog prepared for per-component evaluation.
#[derive(Debug, Clone)]
pub struct DevDialog {
    pub encoded: EncodedDialog,
    pub assignment: AbstractionAssignment,
    /// (event index, turn, concrete label value) at each labeled time.
    pub targets: Vec<(usize, usize, String)>,
    /// First turn this component is mentioned at, if ever.
    pub first_mention: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_metric: f64,
    pub wall_secs: f64,
}

/// Training history for one component model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub component: String,
    pub config_sha256: String,
    pub init_seed: u64,
    pub epochs: Vec<EpochStats>,
    pub selected_epoch: usize,
    pub best_dev_metric: f64,
}

impl TrainReport {
    /// Serialization with wall-clock timings stripped, so two runs of the
    /// same config compare bit-identically.
    pub fn canonical_json(&self) -> String {
        let mut clone = self.clone();
        for e in &mut clone.epochs {
            e.wall_secs = 0.0;
        }
        serde_json::to_string_pretty(&clone).expect("report serializes")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Negative sum over labeled times of the log-probability of the true
/// class (the summed, not averaged, form).
pub fn dialog_loss(model: &ComponentModel, encoded: &EncodedDialog) -> f64 {
    model.dialog_loss(encoded)
}

/// Replace user tokens by the OOV id with probability `alpha`; the id-level
/// twin of `preprocess::inject_oov`, drawing from the rng in the same order.
fn inject_oov_ids(enc: &mut EncodedDialog, alpha: f64, oov_id: u32, rng: &mut impl Rng) {
    for (id, &is_user) in enc.token_ids.iter_mut().zip(&enc.user) {
        if is_user && rng.gen::<f64>() < alpha {
            *id = oov_id;
        }
    }
}

// stream tags for seed derivation
const TAG_SHUFFLE: u64 = 1;
const TAG_OOV: u64 = 2;

pub struct Trainer<'a> {
    pub config: &'a TrainConfig,
    pub oov_id: u32,
}

impl Trainer<'_> {
    /// One pass over the training set. Returns the mean per-label loss.
    pub fn train_epoch(
        &self,
        model: &mut ComponentModel,
        train: &[EncodedDialog],
        epoch: usize,
    ) -> Result<f64> {
        let cfg = self.config;
        assert!(cfg.minibatch_size >= 1, "minibatch_size must be >= 1");
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut shuffle_rng = seeded_rng(derive_seed(cfg.seed, &[TAG_SHUFFLE, epoch as u64]));
        order.shuffle(&mut shuffle_rng);

        let mut grads = Gradients::zeros_like(&model.params);
        let mut loss_sum = 0.0;
        let mut label_sum = 0usize;
        for batch in order.chunks(cfg.minibatch_size) {
            let batch_labels: usize = batch.iter().map(|&i| train[i].labels.len()).sum();
            if batch_labels == 0 {
                continue;
            }
            let scale = 1.0 / batch_labels as f64;
            // forward/backward per dialog in parallel, reduce in batch order
            let results: Vec<Result<(f64, Gradients)>> = batch
                .par_iter()
                .map(|&i| {
                    let mut enc = train[i].clone();
                    let mut rng =
                        seeded_rng(derive_seed(cfg.seed, &[TAG_OOV, epoch as u64, i as u64]));
                    inject_oov_ids(&mut enc, cfg.alpha_oov, self.oov_id, &mut rng);
                    let mut g = Gradients::zeros_like(&model.params);
                    let loss = model.dialog_loss_backward(&enc, &mut g, scale)?;
                    if !loss.is_finite() {
                        return Err(Error::Numeric(format!(
                            "non-finite loss on dialog {} in epoch {epoch}",
                            enc.dialog_id
                        )));
                    }
                    Ok((loss, g))
                })
                .collect();
            grads.zero();
            for r in results {
                let (loss, g) = r?;
                loss_sum += loss;
                grads.add_assign(&g);
            }
            label_sum += batch_labels;
            if let Some(max_norm) = cfg.clip_norm {
                grads.clip_global_norm(max_norm);
            }
            model.params.adam_step(&grads, &cfg.adam)?;
        }
        Ok(loss_sum / label_sum.max(1) as f64)
    }

    /// Scheduled per-component dev metric, de-abstracted, higher is better.
    pub fn dev_metric(&self, model: &ComponentModel, dev: &[DevDialog]) -> f64 {
        let per_dialog: Vec<(usize, f64, usize)> = dev
            .par_iter()
            .map(|d| {
                let Some(first) = d.first_mention else {
                    return (0, 0.0, 0);
                };
                let mut record = vec![false; d.encoded.len()];
                for &(idx, turn, _) in &d.targets {
                    if turn >= first {
                        record[idx] = true;
                    }
                }
                if !record.iter().any(|&r| r) {
                    return (0, 0.0, 0);
                }
                let beliefs = model.beliefs_at(&d.encoded, &record);
                let mut correct = 0usize;
                let mut l2_sum = 0.0;
                let mut scored = 0usize;
                for &(idx, turn, ref label) in &d.targets {
                    if turn < first {
                        continue;
                    }
                    let dist = &beliefs
                        .iter()
                        .find(|(i, _)| *i == idx)
                        .expect("recorded index present")
                        .1;
                    let concrete = deabstract_distribution(dist, &model.classes, &d.assignment);
                    scored += 1;
                    let top = concrete
                        .iter()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                        .map(|(v, _)| v.as_str())
                        .unwrap_or("none");
                    if top == label {
                        correct += 1;
                    }
                    let mut sq: f64 = concrete
                        .iter()
                        .map(|(v, p)| {
                            let t = if v == label { 1.0 } else { 0.0 };
                            (p - t) * (p - t)
                        })
                        .sum();
                    if !concrete.contains_key(label) {
                        sq += 1.0;
                    }
                    l2_sum += sq.sqrt();
                }
                (correct, l2_sum, scored)
            })
            .collect();
        let correct: usize = per_dialog.iter().map(|x| x.0).sum();
        let l2_sum: f64 = per_dialog.iter().map(|x| x.1).sum();
        let scored: usize = per_dialog.iter().map(|x| x.2).sum();
        if scored == 0 {
            return 0.0;
        }
        match self.config.early_stop {
            EarlyStopMetric::Accuracy => correct as f64 / scored as f64,
            EarlyStopMetric::NegL2 => -(l2_sum / scored as f64),
        }
    }

    /// Train a fresh model, evaluating on dev after every epoch and
    /// stopping once the metric has not improved for `patience` epochs.
    /// Returns the best-epoch model.
    pub fn fit(
        &self,
        component: &str,
        classes: ClassSet,
        vocab_size: usize,
        init_seed: u64,
        train: &[EncodedDialog],
        dev: &[DevDialog],
    ) -> Result<(ComponentModel, TrainReport)> {
        let cfg = self.config;
        let dims = crate::model::ModelDims {
            vocab: vocab_size,
            embed: cfg.dims.embed,
            input_net: cfg.dims.input_net,
            hidden: cfg.dims.hidden,
            classes: classes.len(),
        };
        let mut model = ComponentModel::with_dims(component, classes, dims, init_seed);
        let mut epochs = Vec::new();
        let mut best: Option<(f64, usize, crate::nncore::ParamStore)> = None;
        for epoch in 1..=cfg.max_epochs {
            let t0 = Instant::now();
            let train_loss = self.train_epoch(&mut model, train, epoch)?;
            let dev_metric = self.dev_metric(&model, dev);
            epochs.push(EpochStats {
                epoch,
                train_loss,
                dev_metric,
                wall_secs: t0.elapsed().as_secs_f64(),
            });
            let improved = best.as_ref().map(|(m, _, _)| dev_metric > *m).unwrap_or(true);
            if improved {
                best = Some((dev_metric, epoch, model.params.clone()));
            } else {
                let best_epoch = best.as_ref().map(|(_, e, _)| *e).unwrap_or(0);
                if epoch - best_epoch >= cfg.patience {
                    break;
                }
            }
        }
        let (best_metric, selected_epoch, params) =
            best.expect("at least one epoch ran (max_epochs >= 1)");
        model.params = params;
        let report = TrainReport {
            component: component.to_string(),
            config_sha256: cfg.sha256(),
            init_seed,
            epochs,
            selected_epoch,
            best_dev_metric: best_metric,
        };
        Ok((model, report))
    }
}
