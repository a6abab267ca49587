//! Classification head, combined objective, optimisation loop and
//! checkpoints.

pub mod checkpoint;
pub mod classifier;
pub mod loss;
pub mod model;
pub mod optim;
pub mod sampler;

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::metrics::compute_metrics;
use crate::ingest::dataset::DatasetSplit;
use crate::pipeline::{prepare, Backends, InputOptions, Prepared};
use crate::ptformer::{default_ff_hidden, ParamTensors, SampleInputs};
use crate::rng;
use crate::types::{HyperParams, Label, PatchSample};

pub use checkpoint::BestRecord;
pub use classifier::{predict_probability, sigmoid, ClassifierParams};
pub use loss::{bce_loss, combined_loss, LossBlend, BCE_EPS};
pub use model::{batch_loss, batch_objective, BatchOutcome, FusionMode, Model, ModelGrads, ObjectiveOptions};
pub use optim::{AdamConfig, AdamW};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Everything needed to resume or serve a model.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: AdamW,
    pub hyperparams: HyperParams,
    pub inputs: InputOptions,
    pub objective: ObjectiveOptions,
    /// Completed epochs.
    pub epoch: usize,
    /// Root seed; every random draw derives from it and the epoch counter.
    pub seed: u64,
}

/// Training switches beyond the hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub fusion: FusionMode,
    pub inputs: InputOptions,
    pub loss_blend: LossBlend,
    pub use_sbcl: bool,
    pub anchor_mode: crate::sbcl::AnchorMode,
    pub threshold: f64,
    pub ff_hidden: Option<usize>,
    pub adam: AdamConfig,
    /// Where `checkpoints/` and `run_log.jsonl` go; nothing is written
    /// when unset.
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            fusion: FusionMode::PtFormer,
            inputs: InputOptions::default(),
            loss_blend: LossBlend::Sum,
            use_sbcl: true,
            anchor_mode: crate::sbcl::AnchorMode::All,
            threshold: DEFAULT_THRESHOLD,
            ff_hidden: None,
            adam: AdamConfig::default(),
            out_dir: None,
        }
    }
}

impl TrainState {
    pub fn new(hp: &HyperParams, opts: &TrainOptions) -> Self {
        let ff_hidden = opts.ff_hidden.unwrap_or_else(|| default_ff_hidden(hp.dim));
        let model = Model::init(hp, ff_hidden, opts.fusion, hp.seed);
        let optimizer = AdamW::new(opts.adam, model.tensors().into_iter().map(|(_, m)| m));
        let mut objective = ObjectiveOptions::from_hyperparams(hp);
        objective.loss_blend = opts.loss_blend;
        objective.use_sbcl = opts.use_sbcl;
        objective.anchor_mode = opts.anchor_mode;
        TrainState {
            model,
            optimizer,
            hyperparams: hp.clone(),
            inputs: opts.inputs,
            objective,
            epoch: 0,
            seed: hp.seed,
        }
    }
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(rename = "L_BCE")]
    pub l_bce: f64,
    #[serde(rename = "L_SBCL")]
    pub l_sbcl: f64,
    #[serde(rename = "L")]
    pub loss: f64,
    #[serde(rename = "val_AUC")]
    pub val_auc: Option<f64>,
    #[serde(rename = "val_F1")]
    pub val_f1: Option<f64>,
    pub seed: u64,
    /// Batches whose SBCL term was dropped for lack of a valid triplet.
    pub sbcl_skipped_batches: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub adam: AdamConfig,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<EpochRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub best: Option<BestRecord>,
}

fn epoch_seed(seed: u64, stream: &str, epoch: usize) -> u64 {
    rng::substream_seed(seed, stream, epoch as u64)
}

fn write_best(dir: &Path, best: &BestRecord) -> Result<()> {
    let path = dir.join("best.json");
    let body = serde_json::to_string_pretty(best)?;
    std::fs::write(&path, body + "\n").map_err(|e| Error::io(format!("write {}", path.display()), e))
}

/// Trains on already embedded samples until `hp.epochs` epochs are
/// complete, resuming from `state` when given.
pub fn train_prepared(
    train: &Prepared,
    validation: &Prepared,
    hp: &HyperParams,
    opts: &TrainOptions,
    state: Option<TrainState>,
) -> Result<TrainOutcome> {
    let hp = hp.clone().validated()?;
    if train.is_empty() {
        return Err(Error::InvalidInput("empty training split".into()));
    }
    let mut state = match state {
        Some(mut s) => {
            if (s.hyperparams.dim, s.hyperparams.num_heads) != (hp.dim, hp.num_heads) {
                return Err(Error::InvalidHyperParams(format!(
                    "resumed state has dim={} heads={}, config has dim={} heads={}",
                    s.hyperparams.dim, s.hyperparams.num_heads, hp.dim, hp.num_heads
                )));
            }
            s.hyperparams = hp.clone();
            s
        }
        None => TrainState::new(&hp, opts),
    };
    let seed = state.seed;

    let ckpt_dir = opts.out_dir.as_ref().map(|d| d.join("checkpoints"));
    let log_path = opts.out_dir.as_ref().map(|d| d.join("run_log.jsonl"));
    if let Some(dir) = &ckpt_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
    }
    let mut log_file = match &log_path {
        Some(p) => Some(
            std::fs::OpenOptions::new()
                .create(true)
                .write(true)
                .append(state.epoch > 0)
                .truncate(state.epoch == 0)
                .open(p)
                .map_err(|e| Error::io(format!("open {}", p.display()), e))?,
        ),
        None => None,
    };

    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    let mut best: Option<BestRecord> = None;
    let mut last_good: Option<PathBuf> = None;
    let trainable = state.model.trainable_mask();

    while state.epoch < hp.epochs {
        let epoch = state.epoch + 1;
        let mut batch_rng = rng::substream(seed, rng::BATCHING, epoch as u64);
        let batches = sampler::balanced_batches(&train.labels, hp.batch_size_train, &mut batch_rng)?;
        let dropout_root = epoch_seed(seed, rng::DROPOUT, epoch);
        let mut mining_rng = rng::substream(seed, rng::MINING, epoch as u64);
        let (mut sum_bce, mut sum_sbcl, mut sum_l, mut skipped) = (0.0, 0.0, 0.0, 0);

        for (b, batch) in batches.iter().enumerate() {
            let inputs: Vec<&SampleInputs> = batch.iter().map(|&i| &train.inputs[i]).collect();
            let labels: Vec<Label> = batch.iter().map(|&i| train.labels[i]).collect();
            let dropout_seed = rng::substream_seed(dropout_root, rng::DROPOUT, b as u64);
            let out = batch_objective(
                &state.model,
                &inputs,
                &labels,
                &state.objective,
                Some(dropout_seed),
                &mut mining_rng,
            );
            if !out.loss.is_finite() {
                return Err(Error::DivergenceDetected { epoch, last_good });
            }
            sum_bce += out.l_bce;
            sum_sbcl += out.l_sbcl;
            sum_l += out.loss;
            skipped += usize::from(out.sbcl_skipped);

            let grads: Vec<&crate::ptformer::Matrix> = out.grads.tensors().into_iter().map(|(_, g)| g).collect();
            let params = state.model.tensors_mut().into_iter().map(|(_, p)| p).collect();
            state.optimizer.step(params, grads, &trainable, hp.learning_rate, hp.weight_decay);
        }
        if state.model.tensors().iter().any(|(_, m)| m.iter().any(|x| !x.is_finite())) {
            return Err(Error::DivergenceDetected { epoch, last_good });
        }
        state.epoch = epoch;

        let nb = batches.len() as f64;
        let (val_auc, val_f1) = if validation.is_empty() {
            (None, None)
        } else {
            let probs = probabilities(&state.model, &validation.inputs);
            let m = compute_metrics(&probs, &validation.labels, opts.threshold)?;
            (m.auc, Some(m.f1))
        };
        let record = EpochRecord {
            epoch,
            l_bce: sum_bce / nb,
            l_sbcl: sum_sbcl / nb,
            loss: sum_l / nb,
            val_auc,
            val_f1,
            seed,
            sbcl_skipped_batches: skipped,
            lr: hp.learning_rate,
            weight_decay: hp.weight_decay,
            adam: state.optimizer.config,
        };
        log::info!(
            "epoch {epoch}: L={:.6} L_BCE={:.6} L_SBCL={:.6} val_AUC={:?}",
            record.loss,
            record.l_bce,
            record.l_sbcl,
            record.val_auc
        );
        if let Some(f) = log_file.as_mut() {
            let line = serde_json::to_string(&record)? + "\n";
            f.write_all(line.as_bytes())
                .map_err(|e| Error::io("append run log", e))?;
        }
        log.push(record);

        if let Some(dir) = &ckpt_dir {
            let path = dir.join(checkpoint::epoch_file_name(epoch));
            checkpoint::save(&state, &path)?;
            // Best by validation AUC, ties to the later epoch; without an
            // AUC, the latest epoch.
            let better = match (&best, val_auc) {
                (None, _) => true,
                (Some(b), Some(a)) => b.val_auc.is_none_or(|prev| a >= prev),
                (Some(b), None) => b.val_auc.is_none(),
            };
            if better {
                let record = BestRecord {
                    epoch,
                    path: path.clone(),
                    val_auc,
                };
                write_best(dir, &record)?;
                best = Some(record);
            }
            last_good = Some(path.clone());
            checkpoints.push(path);
        }
    }
    Ok(TrainOutcome {
        state,
        log,
        checkpoints,
        best,
    })
}

/// Embeds the train and validation splits, then trains.
pub fn train(
    split: &DatasetSplit,
    hp: &HyperParams,
    backends: &Backends,
    opts: &TrainOptions,
    state: Option<TrainState>,
) -> Result<TrainOutcome> {
    let inputs = state.as_ref().map_or(opts.inputs, |s| s.inputs);
    let train_set = prepare(&split.train, backends, hp.max_tokens, inputs)?;
    let val_set = prepare(&split.validation, backends, hp.max_tokens, inputs)?;
    train_prepared(&train_set, &val_set, hp, opts, state)
}

/// Evaluation-mode probabilities, in input order.
pub fn probabilities(model: &Model, inputs: &[SampleInputs]) -> Vec<f64> {
    inputs.par_iter().map(|x| model.probability(x)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub probability: f64,
    pub label: Label,
}

pub fn label_for(probability: f64, threshold: f64) -> Label {
    if probability >= threshold {
        Label::Security
    } else {
        Label::NonSecurity
    }
}

/// Predictions over prepared inputs, processed in `batch_size` chunks.
pub fn predict_prepared(model: &Model, inputs: &[SampleInputs], batch_size: usize, threshold: f64) -> Vec<Prediction> {
    inputs
        .chunks(batch_size.max(1))
        .flat_map(|chunk| {
            probabilities(model, chunk)
                .into_iter()
                .zip(chunk)
                .map(|(p, x)| Prediction {
                    sample_id: x.sample_id.clone(),
                    probability: p,
                    label: label_for(p, threshold),
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

pub fn predict(samples: &[PatchSample], state: &TrainState, backends: &Backends, threshold: f64) -> Result<Vec<Prediction>> {
    let prepared = prepare(samples, backends, state.hyperparams.max_tokens, state.inputs)?;
    Ok(predict_prepared(
        &state.model,
        &prepared.inputs,
        state.hyperparams.batch_size_eval,
        threshold,
    ))
}
