//! Metrics, PCA export, ablations and cross-dataset runs.

pub mod ablation;
pub mod metrics;
pub mod pca;

pub use ablation::{
    cross_dataset_eval, repeat_seeds, run_ablation, source_tag, summarize_runs, train_and_evaluate, AblationFlags,
    AblationRow, AblationTable, CrossDatasetReport, MeanStd, RunSummary,
};
pub use metrics::{auc, compute_metrics, MetricsRecord, MetricsReport};
pub use pca::{pca_project, write_pca_csv, PcaMeta, PcaResult};
