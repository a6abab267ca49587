//! Run configuration: a TOML file, then `--set` overrides, then the
//! dedicated flags. Later sources win.

use std::path::{Path, PathBuf};

use patchfuse::embed::{EmbedderBackend, EmbedderKind};
use patchfuse::eval::AblationFlags;
use patchfuse::explain::ExplainerConfig;
use patchfuse::pipeline::InputOptions;
use patchfuse::sbcl::AnchorMode;
use patchfuse::trainer::{FusionMode, LossBlend, TrainOptions, DEFAULT_THRESHOLD};
use patchfuse::HyperParams;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// JSONL files merged into one dataset before splitting.
    pub paths: Vec<PathBuf>,
    pub ratios: [f64; 3],
    pub stratify: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            paths: vec![],
            ratios: [0.8, 0.1, 0.1],
            stratify: true,
        }
    }
}

/// Embedder settings; `dim` and `seed` default to the model dim and the
/// root seed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderSection {
    pub kind: EmbedderKind,
    pub dim: Option<usize>,
    pub seed: Option<u64>,
    pub source_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub fusion: FusionMode,
    pub loss_blend: LossBlend,
    pub use_sbcl: bool,
    pub use_explanation: bool,
    pub use_instruction: bool,
    pub anchor_mode: AnchorMode,
    pub threshold: f64,
    pub ff_hidden: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            fusion: FusionMode::PtFormer,
            loss_blend: LossBlend::Sum,
            use_sbcl: true,
            use_explanation: true,
            use_instruction: true,
            anchor_mode: AnchorMode::All,
            threshold: DEFAULT_THRESHOLD,
            ff_hidden: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    /// Flag combinations such as `"no_sbcl"` or `"no_ptformer+no_sbcl"`.
    pub runs: Vec<String>,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            runs: AblationFlags::single_flags().iter().map(|f| f.name()).collect(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub data: DataSection,
    pub explainer: ExplainerConfig,
    pub embedder: EmbedderSection,
    pub hyperparams: HyperParams,
    pub train: TrainSection,
    pub ablate: AblateSection,
}

/// Config after overrides, defaults and path resolution.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataSection,
    pub explainer: ExplainerConfig,
    pub embedder: EmbedderBackend,
    pub hp: HyperParams,
    pub train: TrainOptions,
    pub ablations: Vec<AblationFlags>,
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Reads `raw` as a TOML value, falling back to a plain string.
pub fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets `dotted.key` in `table`, creating intermediate tables.
pub fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> CliResult<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| config_err(format!("empty key in {key:?}")))?;
    let mut cursor = table;
    for part in parts {
        cursor = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| config_err(format!("{part} in {key:?} is not a table")))?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}

fn resolve_path(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads the config file (if any), applies `overrides` in order, and
/// validates the result.
pub fn load(config_path: Option<&Path>, overrides: &[(String, toml::Value)]) -> CliResult<Resolved> {
    let (mut table, base) = match config_path {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
            let table: toml::Table = toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
            let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
            (table, base)
        }
        None => (toml::Table::new(), PathBuf::new()),
    };
    for (key, value) in overrides {
        set_dotted(&mut table, key, value.clone())?;
    }
    let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| config_err(e.to_string()))?;
    resolve(cfg, &base)
}

fn resolve(cfg: RunConfig, base: &Path) -> CliResult<Resolved> {
    let seed = cfg.seed.unwrap_or(cfg.hyperparams.seed);
    let mut hp = cfg.hyperparams.clone();
    hp.seed = seed;
    hp.validate().map_err(|e| config_err(e.to_string()))?;

    let out = cfg
        .out
        .as_ref()
        .map(|p| resolve_path(base, p))
        .ok_or_else(|| config_err("no output directory; set `out` or pass --out"))?;
    let out = std::path::absolute(&out).map_err(|e| config_err(format!("{}: {e}", out.display())))?;
    std::fs::create_dir_all(&out).map_err(|e| config_err(format!("cannot create {}: {e}", out.display())))?;
    let probe = out.join(".write-probe");
    std::fs::write(&probe, b"").map_err(|e| config_err(format!("{} is not writable: {e}", out.display())))?;
    let _ = std::fs::remove_file(&probe);

    let mut data = cfg.data.clone();
    data.paths = data.paths.iter().map(|p| resolve_path(base, p)).collect();
    if let Some(missing) = data.paths.iter().find(|p| !p.exists()) {
        return Err(config_err(format!("data path {} does not exist", missing.display())));
    }
    let [a, b, c] = data.ratios;
    if [a, b, c].iter().any(|r| *r <= 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(config_err(format!("data.ratios {:?} must be positive and sum to 1", data.ratios)));
    }

    let mut explainer = cfg.explainer.clone();
    explainer.cache_dir = resolve_path(&out, &explainer.cache_dir);
    explainer.validate().map_err(|e| config_err(e.to_string()))?;

    let embedder = EmbedderBackend {
        kind: cfg.embedder.kind,
        dim: cfg.embedder.dim.unwrap_or(hp.dim),
        seed: cfg.embedder.seed.unwrap_or(seed),
        source_path: cfg.embedder.source_path.as_ref().map(|p| resolve_path(base, p)),
    };
    if embedder.dim != hp.dim {
        return Err(config_err(format!("embedder.dim {} != hyperparams.dim {}", embedder.dim, hp.dim)));
    }
    if let Some(p) = &embedder.source_path {
        if !p.exists() {
            return Err(config_err(format!("embedder.source_path {} does not exist", p.display())));
        }
    }
    if embedder.kind == EmbedderKind::PrecomputedFile && embedder.source_path.is_none() {
        return Err(config_err("embedder.kind = precomputed_file needs embedder.source_path"));
    }

    let t = &cfg.train;
    if !(0.0..=1.0).contains(&t.threshold) {
        return Err(config_err(format!("train.threshold {} outside [0, 1]", t.threshold)));
    }
    let train = TrainOptions {
        fusion: t.fusion,
        inputs: InputOptions {
            use_explanation: t.use_explanation,
            use_instruction: t.use_instruction,
        },
        loss_blend: t.loss_blend,
        use_sbcl: t.use_sbcl,
        anchor_mode: t.anchor_mode,
        threshold: t.threshold,
        ff_hidden: t.ff_hidden,
        ..TrainOptions::default()
    };
    let ablations = cfg
        .ablate
        .runs
        .iter()
        .map(|r| AblationFlags::parse(r).map_err(|e| config_err(format!("ablate.runs: {e}"))))
        .collect::<CliResult<Vec<_>>>()?;

    Ok(Resolved {
        seed,
        out,
        data,
        explainer,
        embedder,
        hp,
        train,
        ablations,
    })
}
