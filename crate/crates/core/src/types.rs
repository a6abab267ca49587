//! Shared domain types and the hyperparameter record.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary security label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "security")]
    Security,
    #[serde(rename = "non-security")]
    NonSecurity,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Security => "security",
            Label::NonSecurity => "non-security",
        }
    }

    pub fn parse(s: &str) -> Option<Label> {
        match s {
            "security" => Some(Label::Security),
            "non-security" => Some(Label::NonSecurity),
            _ => None,
        }
    }

    /// 1 for security, 0 otherwise.
    pub fn target(self) -> f64 {
        match self {
            Label::Security => 1.0,
            Label::NonSecurity => 0.0,
        }
    }

    pub fn is_security(self) -> bool {
        self == Label::Security
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One commit: the diff, optional developer message, optional generated
/// explanation and the binary label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSample {
    pub id: String,
    #[serde(rename = "diff")]
    pub diff_text: String,
    #[serde(rename = "message", default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
    pub label: Label,
    #[serde(default)]
    pub source: String,
}

impl PatchSample {
    pub fn new(
        id: impl Into<String>,
        diff_text: impl Into<String>,
        label: Label,
        source: impl Into<String>,
    ) -> Result<Self> {
        let sample = PatchSample {
            id: id.into(),
            diff_text: diff_text.into(),
            description: None,
            explanation: None,
            label,
            source: source.into(),
        };
        sample.validate()?;
        Ok(sample)
    }

    pub fn with_description(mut self, description: impl Into<String>) -> Self {
        self.description = Some(description.into());
        self
    }

    pub fn with_explanation(mut self, explanation: impl Into<String>) -> Self {
        self.explanation = Some(explanation.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.diff_text.is_empty() {
            return Err(Error::InvalidSample {
                id: self.id.clone(),
                reason: "diff text is empty".into(),
            });
        }
        Ok(())
    }
}

/// Token ids after truncation to the input budget.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    tokens: Vec<u32>,
}

impl TokenSequence {
    /// Keeps at most `max_tokens` leading ids.
    pub fn truncated(mut tokens: Vec<u32>, max_tokens: usize) -> Self {
        tokens.truncate(max_tokens);
        TokenSequence { tokens }
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Patch,
    Explanation,
    Description,
    Instruction,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Patch => "patch",
            Modality::Explanation => "explanation",
            Modality::Description => "description",
            Modality::Instruction => "instruction",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Modality::Patch => 0,
            Modality::Explanation => 1,
            Modality::Description => 2,
            Modality::Instruction => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Modality::Patch,
            1 => Modality::Explanation,
            2 => Modality::Description,
            3 => Modality::Instruction,
            _ => return None,
        })
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Token-level representation of one modality, shape `(seq_len, dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    values: DMatrix<f64>,
    modality: Modality,
}

impl EmbeddingMatrix {
    pub fn new(values: DMatrix<f64>, modality: Modality) -> Result<Self> {
        if values.nrows() == 0 {
            return Err(Error::InvalidSample {
                id: String::new(),
                reason: format!("{modality} embedding has no rows"),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSample {
                id: String::new(),
                reason: format!("{modality} embedding has non-finite entries"),
            });
        }
        Ok(EmbeddingMatrix { values, modality })
    }

    /// Single all-zero row, used for empty inputs.
    pub fn sentinel(dim: usize, modality: Modality) -> Self {
        EmbeddingMatrix {
            values: DMatrix::zeros(1, dim),
            modality,
        }
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn seq_len(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

/// Fixed-length fused vector for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedEmbedding {
    pub sample_id: String,
    pub values: DVector<f64>,
}

impl FusedEmbedding {
    pub fn new(sample_id: impl Into<String>, values: DVector<f64>) -> Self {
        FusedEmbedding {
            sample_id: sample_id.into(),
            values,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Missing keys take their defaults when deserialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size_train: usize,
    pub batch_size_eval: usize,
    pub alpha: f64,
    pub temperature: f64,
    pub dropout: f64,
    pub margin: f64,
    pub num_heads: usize,
    pub dim: usize,
    pub max_tokens: usize,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            epochs: 20,
            learning_rate: 1e-5,
            weight_decay: 0.01,
            batch_size_train: 16,
            batch_size_eval: 64,
            alpha: 0.5,
            temperature: 0.1,
            dropout: 0.5,
            margin: 0.5,
            num_heads: 4,
            dim: 256,
            max_tokens: 512,
            seed: 42,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidHyperParams(msg));
        if self.epochs < 1 {
            return fail("epochs must be >= 1".into());
        }
        // lr = 0 is accepted: it freezes every parameter.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate {} must be finite and >= 0", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight_decay {} must be finite and >= 0", self.weight_decay));
        }
        if self.batch_size_train < 1 || self.batch_size_eval < 1 {
            return fail("batch sizes must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return fail(format!("margin {} must be finite and >= 0", self.margin));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !self.temperature.is_finite() {
            return fail("temperature must be finite".into());
        }
        if self.num_heads < 1 {
            return fail("num_heads must be >= 1".into());
        }
        if self.dim == 0 || !self.dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "dim {} must be positive and divisible by num_heads {}",
                self.dim, self.num_heads
            ));
        }
        if self.max_tokens < 1 {
            return fail("max_tokens must be >= 1".into());
        }
        // TOML integers are signed 64-bit.
        if self.seed > i64::MAX as u64 {
            return fail(format!("seed {} exceeds {}", self.seed, i64::MAX));
        }
        Ok(())
    }

    pub fn validated(self) -> Result<Self> {
        self.validate()?;
        Ok(self)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let hp: HyperParams =
            toml::from_str(text).map_err(|e| Error::InvalidHyperParams(e.to_string()))?;
        hp.validated()
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat record always serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.num_heads
    }
}

pub fn default_hyperparams() -> HyperParams {
    HyperParams::default()
}
