//! JSONL dataset loading and stratified splitting.
//!
//! One record per line: `{"id", "diff", "message"?, "explanation"?, "label", "source"?}`
//! with `label` exactly `"security"` or `"non-security"`.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::rng;
use crate::types::{Label, PatchSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DatasetSchema {
    #[default]
    Jsonl,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<PatchSample>,
    pub validation: Vec<PatchSample>,
    pub test: Vec<PatchSample>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.validation.len(), self.test.len())
    }

    pub fn all(&self) -> impl Iterator<Item = &PatchSample> {
        self.train.iter().chain(&self.validation).chain(&self.test)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ClassCounts {
    pub security: usize,
    pub non_security: usize,
}

pub fn class_counts<'a>(samples: impl IntoIterator<Item = &'a PatchSample>) -> ClassCounts {
    samples
        .into_iter()
        .fold(ClassCounts::default(), |mut acc, s| {
            match s.label {
                Label::Security => acc.security += 1,
                Label::NonSecurity => acc.non_security += 1,
            }
            acc
        })
}

fn schema_err(index: usize, field: &str, reason: impl Into<String>) -> Error {
    Error::Schema {
        index,
        field: field.to_string(),
        reason: reason.into(),
    }
}

fn required_str<'a>(record: &'a Value, index: usize, field: &str) -> Result<&'a str> {
    match record.get(field) {
        None | Some(Value::Null) => Err(schema_err(index, field, "is missing")),
        Some(Value::String(s)) => Ok(s),
        Some(_) => Err(schema_err(index, field, "must be a string")),
    }
}

fn optional_str(record: &Value, index: usize, field: &str) -> Result<Option<String>> {
    match record.get(field) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(schema_err(index, field, "must be a string")),
    }
}

/// Parses one record; `index` counts non-blank lines from 0.
pub fn parse_record(line: &str, index: usize, default_source: &str) -> Result<PatchSample> {
    let record: Value = serde_json::from_str(line)
        .map_err(|e| schema_err(index, "<record>", format!("is not valid JSON: {e}")))?;
    if !record.is_object() {
        return Err(schema_err(index, "<record>", "is not a JSON object"));
    }
    let id = required_str(&record, index, "id")?;
    let diff = required_str(&record, index, "diff")?;
    let label_text = required_str(&record, index, "label")?;
    let label = Label::parse(label_text).ok_or_else(|| {
        schema_err(
            index,
            "label",
            format!("has value {label_text:?}; expected \"security\" or \"non-security\""),
        )
    })?;
    if diff.is_empty() {
        return Err(schema_err(index, "diff", "is empty"));
    }
    Ok(PatchSample {
        id: id.to_string(),
        diff_text: diff.to_string(),
        description: optional_str(&record, index, "message")?,
        explanation: optional_str(&record, index, "explanation")?,
        label,
        source: optional_str(&record, index, "source")?.unwrap_or_else(|| default_source.to_string()),
    })
}

/// Loads every record in file order. Records without `source` are tagged
/// with the file stem.
pub fn load_dataset(path: &Path, schema: DatasetSchema) -> Result<Vec<PatchSample>> {
    let DatasetSchema::Jsonl = schema;
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let default_source = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut samples = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        samples.push(parse_record(&line, samples.len(), &default_source)?);
    }
    Ok(samples)
}

pub fn save_dataset(path: &Path, samples: &[PatchSample]) -> Result<()> {
    let file =
        File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut out = BufWriter::new(file);
    for sample in samples {
        serde_json::to_writer(&mut out, sample)?;
        out.write_all(b"\n")
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    out.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Splits `total` items into three parts proportional to `ratios` with the
/// largest-remainder rule (ties go to the earlier part).
fn apportion(total: usize, ratios: [f64; 3]) -> [usize; 3] {
    let quotas = ratios.map(|r| r * total as f64);
    let mut parts = quotas.map(|q| q.floor() as usize);
    let mut left = total - parts.iter().sum::<usize>().min(total);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        parts[k] += 1;
        left -= 1;
    }
    parts
}

/// Deterministic train/validation/test split.
///
/// Split sizes follow `ratios` over the whole set. With `stratify`, each
/// split's security count is the largest-remainder share of the security
/// class, which keeps every split within one sample of the global
/// proportion.
pub fn split_dataset(
    samples: &[PatchSample],
    ratios: (f64, f64, f64),
    seed: u64,
    stratify: bool,
) -> Result<DatasetSplit> {
    let ratios = [ratios.0, ratios.1, ratios.2];
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| r.is_nan() || *r <= 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidRatios(ratios));
    }
    let mut seen = HashSet::new();
    for s in samples {
        if !seen.insert(s.id.as_str()) {
            return Err(Error::InvalidSample {
                id: s.id.clone(),
                reason: "duplicate sample id".into(),
            });
        }
    }

    let mut rng = rng::substream(seed, rng::SPLIT, 0);
    let sizes = apportion(samples.len(), ratios);
    let mut parts: [Vec<PatchSample>; 3] = Default::default();

    if stratify {
        let mut security: Vec<&PatchSample> =
            samples.iter().filter(|s| s.label.is_security()).collect();
        let mut other: Vec<&PatchSample> =
            samples.iter().filter(|s| !s.label.is_security()).collect();
        if security.is_empty() {
            return Err(Error::EmptyClass(Label::Security));
        }
        if other.is_empty() {
            return Err(Error::EmptyClass(Label::NonSecurity));
        }
        security.shuffle(&mut rng);
        other.shuffle(&mut rng);
        let n = samples.len() as f64;
        let shares = sizes.map(|s| s as f64 / n);
        let sec_sizes = apportion(security.len(), shares);
        let (mut sec_iter, mut other_iter) = (security.into_iter(), other.into_iter());
        for k in 0..3 {
            parts[k].extend(sec_iter.by_ref().take(sec_sizes[k]).cloned());
            parts[k].extend(other_iter.by_ref().take(sizes[k] - sec_sizes[k]).cloned());
            parts[k].shuffle(&mut rng);
        }
    } else {
        let mut all: Vec<&PatchSample> = samples.iter().collect();
        all.shuffle(&mut rng);
        let mut iter = all.into_iter();
        for k in 0..3 {
            parts[k].extend(iter.by_ref().take(sizes[k]).cloned());
        }
    }

    let [train, validation, test] = parts;
    Ok(DatasetSplit {
        train,
        validation,
        test,
        seed,
    })
}
