//! One function per subcommand. Each returns the JSON summary printed on
//! stdout; every file it writes lands under the output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use patchfuse::eval::{
    compute_metrics, pca_project, run_ablation, source_tag, write_pca_csv, MetricsReport, PcaMeta,
};
use patchfuse::explain::Explainer;
use patchfuse::ingest::dataset::{class_counts, load_dataset, save_dataset, split_dataset, DatasetSchema, DatasetSplit};
use patchfuse::ingest::tokenize::HashedTokenizer;
use patchfuse::pipeline::{augment, prepare, Backends};
use patchfuse::trainer::checkpoint::{self, BestRecord};
use patchfuse::trainer::{predict, train, TrainState};
use patchfuse::{Label, PatchSample};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::Resolved;
use crate::error::{CliError, CliResult};

const SPLITS: [&str; 3] = ["train", "validation", "test"];

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let body = serde_json::to_string_pretty(value).map_err(patchfuse::Error::from)? + "\n";
    std::fs::write(path, body).map_err(|e| CliError::io(format!("write {}", path.display()), e))
}

fn create_dir(path: &Path) -> CliResult<PathBuf> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(format!("create {}", path.display()), e))?;
    Ok(path.to_path_buf())
}

fn backends(r: &Resolved, dim: usize, with_explainer: bool) -> CliResult<Backends> {
    Ok(Backends {
        tokenizer: Box::new(HashedTokenizer::default()),
        embedder: r.embedder.build(dim)?,
        explainer: if with_explainer {
            Some(Explainer::new(r.explainer.clone())?)
        } else {
            None
        },
    })
}

fn parts(split: &DatasetSplit) -> [&Vec<PatchSample>; 3] {
    [&split.train, &split.validation, &split.test]
}

fn read_split(dir: &Path, seed: u64) -> CliResult<DatasetSplit> {
    let mut loaded = Vec::with_capacity(3);
    for name in SPLITS {
        let path = dir.join(format!("{name}.jsonl"));
        if !path.exists() {
            return Err(CliError::MissingArtifact { path });
        }
        loaded.push(load_dataset(&path, DatasetSchema::Jsonl)?);
    }
    let test = loaded.pop().unwrap_or_default();
    let validation = loaded.pop().unwrap_or_default();
    let train = loaded.pop().unwrap_or_default();
    Ok(DatasetSplit {
        train,
        validation,
        test,
        seed,
    })
}

/// The explained splits when present, else the ingested ones. The flag is
/// true for explained splits.
fn current_split(r: &Resolved) -> CliResult<(DatasetSplit, bool)> {
    let explained = r.out.join("explained");
    if explained.join("test.jsonl").exists() {
        return Ok((read_split(&explained, r.seed)?, true));
    }
    Ok((read_split(&r.out.join("data"), r.seed)?, false))
}

fn best_checkpoint(r: &Resolved, explicit: Option<&Path>) -> CliResult<PathBuf> {
    if let Some(path) = explicit {
        return match path.exists() {
            true => Ok(path.to_path_buf()),
            false => Err(CliError::MissingArtifact { path: path.to_path_buf() }),
        };
    }
    let best = r.out.join("train").join("checkpoints").join("best.json");
    let text = std::fs::read_to_string(&best).map_err(|_| CliError::MissingArtifact { path: best.clone() })?;
    let record: BestRecord = serde_json::from_str(&text).map_err(patchfuse::Error::from)?;
    if !record.path.exists() {
        return Err(CliError::MissingArtifact { path: record.path });
    }
    Ok(record.path)
}

fn load_state(r: &Resolved, explicit: Option<&Path>) -> CliResult<(TrainState, PathBuf)> {
    let path = best_checkpoint(r, explicit)?;
    Ok((checkpoint::load(&path)?, path))
}

fn load_sources(paths: &[PathBuf]) -> CliResult<Vec<PatchSample>> {
    if paths.is_empty() {
        return Err(CliError::Config("no dataset paths given (data.paths)".into()));
    }
    let mut all = Vec::new();
    for p in paths {
        all.extend(load_dataset(p, DatasetSchema::Jsonl)?);
    }
    Ok(all)
}

pub fn ingest(r: &Resolved) -> CliResult<Value> {
    let samples = load_sources(&r.data.paths)?;
    let [a, b, c] = r.data.ratios;
    let split = split_dataset(&samples, (a, b, c), r.seed, r.data.stratify)?;
    let dir = create_dir(&r.out.join("data"))?;
    let mut splits = BTreeMap::new();
    for (name, part) in SPLITS.iter().zip(parts(&split)) {
        save_dataset(&dir.join(format!("{name}.jsonl")), part)?;
        splits.insert(*name, json!({ "n": part.len(), "classes": class_counts(part.iter()) }));
    }
    let mut sources: BTreeMap<&str, Vec<&PatchSample>> = BTreeMap::new();
    for s in &samples {
        sources.entry(s.source.as_str()).or_default().push(s);
    }
    let sources: BTreeMap<&str, Value> = sources
        .into_iter()
        .map(|(k, v)| (k, json!({ "n": v.len(), "classes": class_counts(v) })))
        .collect();
    let summary = json!({
        "seed": r.seed,
        "total": samples.len(),
        "classes": class_counts(&samples),
        "sources": sources,
        "splits": splits,
        "ratios": r.data.ratios,
        "stratify": r.data.stratify,
        "data_dir": dir,
    });
    write_json(&r.out.join("ingest_summary.json"), &summary)?;
    Ok(summary)
}

/// Explains every sample that lacks an explanation. A sample whose
/// explanation cannot be obtained is kept without one and counted.
pub fn explain(r: &Resolved) -> CliResult<Value> {
    let split = read_split(&r.out.join("data"), r.seed)?;
    let explainer = Explainer::new(r.explainer.clone())?;
    let dir = create_dir(&r.out.join("explained"))?;
    let mut failures = Vec::new();
    for (name, part) in SPLITS.iter().zip(parts(&split)) {
        let mut done = Vec::with_capacity(part.len());
        for sample in part {
            let mut sample = sample.clone();
            if sample.explanation.is_none() {
                match explainer.explain(&sample) {
                    Ok(text) => sample.explanation = Some(text),
                    Err(e) => {
                        log::warn!("no explanation for {}: {e}", sample.id);
                        failures.push(json!({ "sample_id": sample.id, "error": e.to_string() }));
                    }
                }
            }
            done.push(sample);
        }
        save_dataset(&dir.join(format!("{name}.jsonl")), &done)?;
    }
    let stats = explainer.stats();
    let summary = json!({
        "seed": r.seed,
        "backend": r.explainer.backend,
        "model_name": r.explainer.model_name,
        "cache_dir": r.explainer.cache_dir,
        "cache_hits": stats.cache_hits,
        "cache_misses": stats.cache_misses,
        "backend_calls": stats.backend_calls,
        "failures": failures.len(),
        "failed_samples": failures,
        "explained_dir": dir,
    });
    write_json(&r.out.join("explain_summary.json"), &summary)?;
    Ok(summary)
}

pub fn train_cmd(r: &Resolved, resume: Option<&Path>) -> CliResult<Value> {
    let (split, explained) = current_split(r)?;
    let state = match resume {
        Some(p) if !p.exists() => return Err(CliError::MissingArtifact { path: p.to_path_buf() }),
        Some(p) => Some(checkpoint::load(p)?),
        None => None,
    };
    let dir = r.out.join("train");
    if state.is_none() && dir.exists() {
        // stale checkpoints from a longer earlier run would survive otherwise
        std::fs::remove_dir_all(&dir).map_err(|e| CliError::io(format!("clear {}", dir.display()), e))?;
    }
    let mut opts = r.train.clone();
    opts.out_dir = Some(create_dir(&dir)?);
    let backends = backends(r, r.hp.dim, !explained)?;
    let outcome = train(&split, &r.hp, &backends, &opts, state)?;
    let summary = json!({
        "seed": r.seed,
        "input": if explained { "explained" } else { "data" },
        "epochs": outcome.state.epoch,
        "final_checkpoint": outcome.checkpoints.last(),
        "best": outcome.best,
        "run_log": dir.join("run_log.jsonl"),
        "last_epoch": outcome.log.last(),
        "hyperparams": r.hp,
    });
    write_json(&dir.join("train_summary.json"), &summary)?;
    Ok(summary)
}

fn score(
    samples: &[PatchSample],
    state: &TrainState,
    backends: &Backends,
    threshold: f64,
) -> CliResult<Option<MetricsReport>> {
    if samples.is_empty() {
        return Ok(None);
    }
    let prepared = prepare(samples, backends, state.hyperparams.max_tokens, state.inputs)?;
    let probs: Vec<f64> = patchfuse::trainer::probabilities(&state.model, &prepared.inputs);
    Ok(Some(compute_metrics(&probs, &prepared.labels, threshold)?))
}

pub fn eval(r: &Resolved, checkpoint: Option<&Path>, test_data: &[PathBuf]) -> CliResult<Value> {
    let (state, ckpt) = load_state(r, checkpoint)?;
    let (split, explained) = current_split(r)?;
    let backends = backends(r, state.hyperparams.dim, true)?;
    let threshold = r.train.threshold;
    let mut metrics = BTreeMap::new();
    for (name, part) in SPLITS.iter().zip(parts(&split)) {
        let part = if explained { part.clone() } else { augment(part, backends.explainer.as_ref().unwrap())? };
        metrics.insert(*name, score(&part, &state, &backends, threshold)?);
    }
    let cross = if test_data.is_empty() {
        None
    } else {
        let other = load_sources(test_data)?;
        let [a, b, c] = r.data.ratios;
        let other = split_dataset(&other, (a, b, c), r.seed, r.data.stratify)?;
        let test = augment(&other.test, backends.explainer.as_ref().unwrap())?;
        Some(json!({
            "train_source": source_tag(&split.train),
            "test_source": source_tag(&test),
            "metrics": score(&test, &state, &backends, threshold)?,
        }))
    };
    let dir = create_dir(&r.out.join("eval"))?;
    let path = dir.join("metrics.json");
    let report = json!({
        "seed": r.seed,
        "checkpoint": ckpt,
        "epoch": state.epoch,
        "threshold": threshold,
        "train": metrics["train"],
        "validation": metrics["validation"],
        "test": metrics["test"],
        "cross_dataset": cross,
    });
    write_json(&path, &report)?;
    Ok(json!({ "seed": r.seed, "metrics": path, "test": metrics["test"] }))
}

/// What to score: a diff file (plus optional message) or a stored record.
pub enum PredictInput {
    Diff { path: PathBuf, message: Option<String> },
    Record(String),
}

pub fn predict_cmd(r: &Resolved, checkpoint: Option<&Path>, input: PredictInput) -> CliResult<Value> {
    let (state, ckpt) = load_state(r, checkpoint)?;
    let sample = match input {
        PredictInput::Diff { path, message } => {
            let diff = std::fs::read_to_string(&path).map_err(|_| CliError::MissingArtifact { path: path.clone() })?;
            let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            // the label is a placeholder; only the prediction is reported
            let mut s = PatchSample::new(id, diff, Label::NonSecurity, "cli")?;
            s.description = message;
            s
        }
        PredictInput::Record(id) => {
            let (split, _) = current_split(r)?;
            let found = split.all().find(|s| s.id == id).cloned();
            found.ok_or_else(|| CliError::Core(patchfuse::Error::InvalidInput(format!("no record with id {id:?}"))))?
        }
    };
    let backends = backends(r, state.hyperparams.dim, true)?;
    let threshold = r.train.threshold;
    let p = predict(std::slice::from_ref(&sample), &state, &backends, threshold)?
        .pop()
        .ok_or_else(|| CliError::Core(patchfuse::Error::InvalidInput("no prediction".into())))?;
    Ok(json!({
        "sample_id": p.sample_id,
        "probability": p.probability,
        "label": p.label,
        "threshold": threshold,
        "seed": r.seed,
        "checkpoint": ckpt,
    }))
}

pub fn visualize(r: &Resolved, checkpoint: Option<&Path>, which: &str) -> CliResult<Value> {
    let (state, ckpt) = load_state(r, checkpoint)?;
    let (split, explained) = current_split(r)?;
    let samples: Vec<PatchSample> = match which {
        "all" => split.all().cloned().collect(),
        "train" => split.train.clone(),
        "validation" => split.validation.clone(),
        "test" => split.test.clone(),
        other => return Err(CliError::Config(format!("unknown split {other:?}"))),
    };
    let backends = backends(r, state.hyperparams.dim, !explained)?;
    let prepared = prepare(&samples, &backends, state.hyperparams.max_tokens, state.inputs)?;
    let embeddings: Vec<_> = prepared.inputs.iter().map(|x| state.model.embed(x)).collect();
    let result = pca_project(&embeddings, 2)?;
    let dir = create_dir(&r.out.join("visualize"))?;
    let csv = dir.join("pca.csv");
    write_pca_csv(&csv, &prepared.ids(), &prepared.labels, &result)?;
    let meta = PcaMeta {
        n: prepared.len(),
        components: 2,
        explained_variance_ratio: result.explained_variance_ratio.clone(),
        degenerate: result.degenerate,
        seed: r.seed,
    };
    let meta_path = dir.join("pca.meta.json");
    write_json(&meta_path, &json!({ "pca": meta, "checkpoint": ckpt, "split": which }))?;
    Ok(json!({
        "seed": r.seed,
        "pca": csv,
        "meta": meta_path,
        "n": meta.n,
        "degenerate": meta.degenerate,
    }))
}

pub fn ablate(r: &Resolved) -> CliResult<Value> {
    let (split, explained) = current_split(r)?;
    let backends = backends(r, r.hp.dim, !explained)?;
    let table = run_ablation(&r.ablations, &split, &r.hp, &backends, &r.train)?;
    let dir = create_dir(&r.out.join("ablate"))?;
    let path = dir.join("table.json");
    table.write(&path)?;
    let rows: Vec<Value> = table
        .rows
        .iter()
        .map(|row| json!({ "name": row.name, "test": row.metrics }))
        .collect();
    Ok(json!({ "seed": r.seed, "table": path, "rows": rows }))
}
