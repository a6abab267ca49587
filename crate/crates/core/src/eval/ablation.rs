use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{compute_metrics, MetricsReport};
use crate::error::{Error, Result};
use crate::ingest::dataset::DatasetSplit;
use crate::pipeline::{prepare, Backends, InputOptions};
use crate::rng;
use crate::trainer::{probabilities, train_prepared, EpochRecord, FusionMode, TrainOptions, TrainState};
use crate::types::{HyperParams, PatchSample};

/// Components switched off for one ablation run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub no_explanation: bool,
    pub no_instruction: bool,
    /// Plain pooled concatenation instead of the attention stack.
    pub no_ptformer: bool,
    /// `L = L_BCE` only.
    pub no_sbcl: bool,
}

const FLAG_NAMES: [&str; 4] = ["no_explanation", "no_instruction", "no_ptformer", "no_sbcl"];

impl AblationFlags {
    pub const FULL: AblationFlags = AblationFlags {
        no_explanation: false,
        no_instruction: false,
        no_ptformer: false,
        no_sbcl: false,
    };

    fn bits(&self) -> [bool; 4] {
        [self.no_explanation, self.no_instruction, self.no_ptformer, self.no_sbcl]
    }

    pub fn is_full(&self) -> bool {
        *self == Self::FULL
    }

    /// `full`, or the set flags joined by `+`.
    pub fn name(&self) -> String {
        if self.is_full() {
            return "full".into();
        }
        FLAG_NAMES
            .iter()
            .zip(self.bits())
            .filter(|(_, on)| *on)
            .map(|(n, _)| *n)
            .collect::<Vec<_>>()
            .join("+")
    }

    /// Inverse of [`AblationFlags::name`]; also accepts `,` separators.
    pub fn parse(text: &str) -> Result<Self> {
        let mut flags = Self::FULL;
        for part in text.split(['+', ',']).map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "full" => {}
                "no_explanation" => flags.no_explanation = true,
                "no_instruction" => flags.no_instruction = true,
                "no_ptformer" => flags.no_ptformer = true,
                "no_sbcl" => flags.no_sbcl = true,
                other => return Err(Error::InvalidInput(format!("unknown ablation flag {other:?}"))),
            }
        }
        Ok(flags)
    }

    pub fn single_flags() -> [AblationFlags; 4] {
        [
            AblationFlags { no_explanation: true, ..Self::FULL },
            AblationFlags { no_instruction: true, ..Self::FULL },
            AblationFlags { no_ptformer: true, ..Self::FULL },
            AblationFlags { no_sbcl: true, ..Self::FULL },
        ]
    }

    pub fn apply(&self, base: &TrainOptions) -> TrainOptions {
        let mut opts = base.clone();
        opts.inputs = InputOptions {
            use_explanation: base.inputs.use_explanation && !self.no_explanation,
            use_instruction: base.inputs.use_instruction && !self.no_instruction,
        };
        if self.no_ptformer {
            opts.fusion = FusionMode::PooledConcat;
        }
        if self.no_sbcl {
            opts.use_sbcl = false;
        }
        opts
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub flags: AblationFlags,
    /// Held-out test split metrics.
    pub metrics: MetricsReport,
    pub train_metrics: MetricsReport,
    pub fused_len: usize,
    pub log: Vec<EpochRecord>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationTable {
    pub seed: u64,
    /// Full model first, then the requested combinations in order.
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, flags: AblationFlags) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.flags == flags)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, body).map_err(|e| Error::io(format!("write {}", path.display()), e))
    }
}

/// Trains and scores one run on `split`; returns the final state too.
pub fn train_and_evaluate(
    split: &DatasetSplit,
    hp: &HyperParams,
    backends: &Backends,
    opts: &TrainOptions,
) -> Result<(TrainState, Vec<EpochRecord>, MetricsReport, MetricsReport)> {
    if split.test.is_empty() {
        return Err(Error::InvalidInput("test split is empty".into()));
    }
    let train = prepare(&split.train, backends, hp.max_tokens, opts.inputs)?;
    let validation = prepare(&split.validation, backends, hp.max_tokens, opts.inputs)?;
    let test = prepare(&split.test, backends, hp.max_tokens, opts.inputs)?;
    let outcome = train_prepared(&train, &validation, hp, opts, None)?;
    let model = &outcome.state.model;
    let train_metrics = compute_metrics(&probabilities(model, &train.inputs), &train.labels, opts.threshold)?;
    let metrics = compute_metrics(&probabilities(model, &test.inputs), &test.labels, opts.threshold)?;
    Ok((outcome.state, outcome.log, metrics, train_metrics))
}

/// One training and evaluation run per requested flag combination, all
/// under the same seed, plus the full model. Duplicates are run once.
pub fn run_ablation(
    requested: &[AblationFlags],
    split: &DatasetSplit,
    hp: &HyperParams,
    backends: &Backends,
    base: &TrainOptions,
) -> Result<AblationTable> {
    let mut seen = BTreeSet::new();
    let mut cells = vec![AblationFlags::FULL];
    seen.insert(AblationFlags::FULL);
    for f in requested {
        if seen.insert(*f) {
            cells.push(*f);
        }
    }
    let mut rows = Vec::with_capacity(cells.len());
    for flags in cells {
        let mut opts = flags.apply(base);
        opts.out_dir = base.out_dir.as_ref().map(|d| d.join(flags.name()));
        log::info!("ablation run {}", flags.name());
        let (state, log, metrics, train_metrics) = train_and_evaluate(split, hp, backends, &opts)?;
        rows.push(AblationRow {
            name: flags.name(),
            flags,
            metrics,
            train_metrics,
            fused_len: state.model.classifier.w.nrows(),
            log,
        });
    }
    Ok(AblationTable { seed: hp.seed, rows })
}

/// Distinct `source` values, sorted and joined by `+`.
pub fn source_tag(samples: &[PatchSample]) -> String {
    let names: BTreeSet<&str> = samples.iter().map(|s| s.source.as_str()).collect();
    names.into_iter().collect::<Vec<_>>().join("+")
}

#[derive(Debug, Clone, Serialize)]
pub struct CrossDatasetReport {
    pub train_source: String,
    pub test_source: String,
    pub seed: u64,
    #[serde(flatten)]
    pub metrics: MetricsReport,
}

/// Trains on `train_ds` (its train and validation splits) and scores the
/// test split of `test_ds`.
pub fn cross_dataset_eval(
    train_ds: &DatasetSplit,
    test_ds: &DatasetSplit,
    hp: &HyperParams,
    backends: &Backends,
    opts: &TrainOptions,
) -> Result<CrossDatasetReport> {
    let merged = DatasetSplit {
        train: train_ds.train.clone(),
        validation: train_ds.validation.clone(),
        test: test_ds.test.clone(),
        seed: train_ds.seed,
    };
    let (_, _, metrics, _) = train_and_evaluate(&merged, hp, backends, opts)?;
    Ok(CrossDatasetReport {
        train_source: source_tag(&train_ds.train),
        test_source: source_tag(&test_ds.test),
        seed: hp.seed,
        metrics,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample standard deviation over repeated runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub k: usize,
    /// Over the runs that produced an AUC.
    pub auc: Option<MeanStd>,
    pub f1: MeanStd,
    pub plus_recall: MeanStd,
    pub minus_recall: MeanStd,
}

fn mean_std(xs: &[f64]) -> MeanStd {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    MeanStd { mean, std }
}

pub fn summarize_runs(reports: &[MetricsReport]) -> Result<RunSummary> {
    if reports.is_empty() {
        return Err(Error::InvalidInput("no runs to summarize".into()));
    }
    let pick = |f: fn(&MetricsReport) -> f64| mean_std(&reports.iter().map(f).collect::<Vec<_>>());
    let aucs: Vec<f64> = reports.iter().filter_map(|r| r.auc).collect();
    Ok(RunSummary {
        k: reports.len(),
        auc: (!aucs.is_empty()).then(|| mean_std(&aucs)),
        f1: pick(|r| r.f1),
        plus_recall: pick(|r| r.plus_recall),
        minus_recall: pick(|r| r.minus_recall),
    })
}

/// Seeds for `k` repeated runs derived from `base`.
pub fn repeat_seeds(base: u64, k: usize) -> Vec<u64> {
    // keep seeds TOML-representable
    (0..k as u64).map(|i| rng::substream_seed(base, "repeat", i) >> 1).collect()
}
