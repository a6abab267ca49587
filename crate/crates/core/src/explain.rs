//! Explanation augmentation: the summary prompt, the label-wise instruction,
//! and a content-addressed cache in front of the generating backend.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ingest::diff::parse_unified_diff;
use crate::ingest::tokenize::split_words;
use crate::types::PatchSample;

pub const EXPLANATION_PROMPT: &str = "Could you provide a concise summary of the specified patch?";

pub const INSTRUCTION: &str = "Choose the correct option to the following question: is the patch security related or not? Choices: (0) security (1) non-security";

/// Prompt sent to the explanation model: the fixed question, a blank line,
/// then the diff. The developer message is never included.
pub fn explanation_prompt(patch: &PatchSample) -> String {
    format!("{EXPLANATION_PROMPT}\n\n{}", patch.diff_text)
}

/// The instruction attached to every sample.
pub fn instruction_text() -> &'static str {
    INSTRUCTION
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExplainerBackend {
    ExternalService,
    #[default]
    DeterministicStub,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainerConfig {
    pub backend: ExplainerBackend,
    /// Chat-completion URL, e.g. `https://host/v1/chat/completions`.
    pub endpoint: Option<String>,
    pub model_name: String,
    pub cache_dir: PathBuf,
    #[serde(rename = "timeout_secs", with = "duration_secs")]
    pub timeout: Duration,
    /// Total attempts per request before giving up.
    pub max_retries: u32,
    pub retry_backoff_ms: u64,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
}

impl Default for ExplainerConfig {
    fn default() -> Self {
        ExplainerConfig {
            backend: ExplainerBackend::DeterministicStub,
            endpoint: None,
            model_name: "diffstat-stub-v1".into(),
            cache_dir: PathBuf::from("explanation-cache"),
            timeout: Duration::from_secs(60),
            max_retries: 3,
            retry_backoff_ms: 500,
            api_key_env: "EXPLAINER_API_KEY".into(),
        }
    }
}

mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

impl ExplainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.backend == ExplainerBackend::ExternalService
            && self.endpoint.as_deref().is_none_or(|e| e.trim().is_empty())
        {
            return Err(Error::InvalidExplainerConfig(
                "external_service backend requires a non-empty endpoint".into(),
            ));
        }
        if self.max_retries == 0 {
            return Err(Error::InvalidExplainerConfig("max_retries must be >= 1".into()));
        }
        if self.model_name.is_empty() {
            return Err(Error::InvalidExplainerConfig("model_name is empty".into()));
        }
        Ok(())
    }
}

/// Something that answers a single-turn chat prompt.
pub trait CompletionTransport: Send + Sync {
    fn complete(&self, model: &str, prompt: &str) -> std::result::Result<String, String>;
}

/// Minimal chat-completion client: POSTs
/// `{"model", "messages": [{"role": "user", "content"}]}` and reads
/// `choices[0].message.content`.
pub struct HttpTransport {
    endpoint: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        HttpTransport {
            endpoint: endpoint.into(),
            api_key,
            agent,
        }
    }
}

impl CompletionTransport for HttpTransport {
    fn complete(&self, model: &str, prompt: &str) -> std::result::Result<String, String> {
        let body = serde_json::json!({
            "model": model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
        });
        let mut request = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request.send_json(&body).map_err(|e| e.to_string())?;
        let value: serde_json::Value = response
            .body_mut()
            .read_json()
            .map_err(|e| e.to_string())?;
        value
            .pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .map(str::to_string)
            .ok_or_else(|| format!("response without choices[0].message.content: {value}"))
    }
}

/// One file per key; body is the response followed by a
/// `sha256:<hex>` checksum line.
#[derive(Debug, Clone)]
pub struct ExplanationCache {
    dir: PathBuf,
}

const CHECKSUM_PREFIX: &str = "sha256:";

pub fn cache_key(prompt: &str, model_name: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(prompt.as_bytes());
    hasher.update([0u8]);
    hasher.update(model_name.as_bytes());
    hex::encode(hasher.finalize())
}

fn checksum(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

impl ExplanationCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ExplanationCache { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn entry_path(&self, key: &str) -> PathBuf {
        self.dir.join(key)
    }

    pub fn get(&self, key: &str) -> Result<Option<String>> {
        let path = self.entry_path(key);
        let raw = match fs::read(&path) {
            Ok(raw) => raw,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(format!("reading {}", path.display()), e)),
        };
        let corrupt = || Error::CacheCorrupt { path: path.clone() };
        let text = String::from_utf8(raw).map_err(|_| corrupt())?;
        let body = text.strip_suffix('\n').ok_or_else(corrupt)?;
        let (response, sum_line) = body.rsplit_once('\n').ok_or_else(corrupt)?;
        let sum = sum_line.strip_prefix(CHECKSUM_PREFIX).ok_or_else(corrupt)?;
        if sum != checksum(response) {
            return Err(corrupt());
        }
        Ok(Some(response.to_string()))
    }

    /// Writes through a temporary file and renames, so readers never see a
    /// partial entry.
    pub fn put(&self, key: &str, response: &str) -> Result<()> {
        fs::create_dir_all(&self.dir)
            .map_err(|e| Error::io(format!("creating {}", self.dir.display()), e))?;
        let path = self.entry_path(key);
        let tmp = self
            .dir
            .join(format!(".{key}.{}.tmp", std::process::id()));
        let write = || -> std::io::Result<()> {
            let mut file = fs::File::create(&tmp)?;
            write!(file, "{response}\n{CHECKSUM_PREFIX}{}\n", checksum(response))?;
            file.sync_all()?;
            fs::rename(&tmp, &path)
        };
        write().map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

/// Offline explanation built only from diff statistics.
pub fn stub_explanation(patch: &PatchSample) -> Result<String> {
    let parsed = parse_unified_diff(&patch.diff_text)?;
    let first_token = parsed
        .hunks
        .iter()
        .flat_map(|h| h.added())
        .flat_map(|l| split_words(&l.text))
        .next();
    let files = if parsed.files_touched.is_empty() {
        "an unnamed file".to_string()
    } else {
        format!(
            "{} file(s) ({})",
            parsed.files_touched.len(),
            parsed.files_touched.join(", ")
        )
    };
    let mut text = format!(
        "The patch changes {files} in {} hunk(s), adding {} line(s) and removing {} line(s).",
        parsed.hunks.len(),
        parsed.added_lines(),
        parsed.removed_lines()
    );
    match first_token {
        Some(tok) => text.push_str(&format!(" The first added token is {tok}.")),
        None => text.push_str(" No lines are added."),
    }
    Ok(text)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ExplainStats {
    pub cache_hits: usize,
    pub cache_misses: usize,
    pub backend_calls: usize,
}

pub struct Explainer {
    cfg: ExplainerConfig,
    cache: ExplanationCache,
    transport: Option<Box<dyn CompletionTransport>>,
    key_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    hits: AtomicUsize,
    misses: AtomicUsize,
    calls: AtomicUsize,
}

impl Explainer {
    /// Builds the explainer; the external backend gets an HTTP transport
    /// with the token read from `cfg.api_key_env`.
    pub fn new(cfg: ExplainerConfig) -> Result<Self> {
        cfg.validate()?;
        let transport: Option<Box<dyn CompletionTransport>> = match cfg.backend {
            ExplainerBackend::DeterministicStub => None,
            ExplainerBackend::ExternalService => Some(Box::new(HttpTransport::new(
                cfg.endpoint.clone().unwrap_or_default(),
                std::env::var(&cfg.api_key_env).ok(),
                cfg.timeout,
            ))),
        };
        Ok(Self::build(cfg, transport))
    }

    pub fn with_transport(cfg: ExplainerConfig, transport: Box<dyn CompletionTransport>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self::build(cfg, Some(transport)))
    }

    fn build(cfg: ExplainerConfig, transport: Option<Box<dyn CompletionTransport>>) -> Self {
        Explainer {
            cache: ExplanationCache::new(cfg.cache_dir.clone()),
            cfg,
            transport,
            key_locks: Mutex::new(HashMap::new()),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn config(&self) -> &ExplainerConfig {
        &self.cfg
    }

    pub fn stats(&self) -> ExplainStats {
        ExplainStats {
            cache_hits: self.hits.load(Ordering::Relaxed),
            cache_misses: self.misses.load(Ordering::Relaxed),
            backend_calls: self.calls.load(Ordering::Relaxed),
        }
    }

    fn key_lock(&self, key: &str) -> Arc<Mutex<()>> {
        let mut locks = self.key_locks.lock().unwrap();
        locks.entry(key.to_string()).or_default().clone()
    }

    pub fn explain(&self, patch: &PatchSample) -> Result<String> {
        let prompt = explanation_prompt(patch);
        let key = cache_key(&prompt, &self.cfg.model_name);
        if let Some(text) = self.cache.get(&key)? {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(text);
        }
        let lock = self.key_lock(&key);
        let _guard = lock.lock().unwrap();
        // another thread may have filled the entry while we waited
        if let Some(text) = self.cache.get(&key)? {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(text);
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let text = match &self.transport {
            None => stub_explanation(patch)?,
            Some(transport) => self.query_with_retries(transport.as_ref(), &prompt)?,
        };
        self.cache.put(&key, &text)?;
        Ok(text)
    }

    fn query_with_retries(&self, transport: &dyn CompletionTransport, prompt: &str) -> Result<String> {
        let mut last_error = String::new();
        for attempt in 0..self.cfg.max_retries {
            if attempt > 0 && self.cfg.retry_backoff_ms > 0 {
                std::thread::sleep(Duration::from_millis(
                    self.cfg.retry_backoff_ms << (attempt - 1).min(6),
                ));
            }
            self.calls.fetch_add(1, Ordering::Relaxed);
            match transport.complete(&self.cfg.model_name, prompt) {
                Ok(text) => return Ok(text),
                Err(e) => {
                    log::warn!("explanation attempt {} failed: {e}", attempt + 1);
                    last_error = e;
                }
            }
        }
        Err(Error::ServiceUnavailable {
            attempts: self.cfg.max_retries,
            last_error,
        })
    }
}
