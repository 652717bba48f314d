//! Scripted, deterministic backend.
//!
//! A script is a JSON-lines file; each line answers one lookup key:
//!
//! ```text
//! {"case_id": "c01", "stage": "perception", "key": "streaks", "response_text": "{...}"}
//! {"case_id": "c01", "stage": "reasoning", "key": "diagnosis", "response_text": "...", "variant": "no_concept"}
//! ```
//!
//! `key` is the concept id for perception and `"diagnosis"` for reasoning.
//! An optional `variant` narrows an entry to one pipeline variant; lookups try
//! the variant-specific entry first and fall back to the unqualified one.
//! `malformed_variant` is returned instead of `response_text` for the first
//! `malformed_rounds` (default 1) rounds, which lets a script exercise the
//! repair loop. `transport_failures` makes the first n attempts of every
//! round fail with a retryable error.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{AttemptError, Backend, GatewayError, Request};
use crate::domain::{Stage, Variant};

pub const DIAGNOSIS_KEY: &str = "diagnosis";

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("script not found: {0}")]
    MissingFile(PathBuf),
    #[error("could not read script {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("duplicate script key {0}")]
    DuplicateKey(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ScriptKey {
    pub case_id: String,
    pub stage: Stage,
    pub key: String,
    pub variant: Option<Variant>,
}

impl std::fmt::Display for ScriptKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}", self.case_id, self.stage, self.key)?;
        if let Some(v) = self.variant {
            write!(f, ", {v}")?;
        }
        f.write_str(")")
    }
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub response_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delay_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub malformed_variant: Option<String>,
    #[serde(default = "one")]
    pub malformed_rounds: u32,
    #[serde(default)]
    pub transport_failures: u32,
}

#[derive(Debug, Deserialize)]
struct ScriptLine {
    case_id: String,
    stage: Stage,
    key: String,
    #[serde(default)]
    variant: Option<Variant>,
    #[serde(flatten)]
    entry: ScriptEntry,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MockScript {
    entries: HashMap<ScriptKey, ScriptEntry>,
}

impl MockScript {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, key: ScriptKey, entry: ScriptEntry) -> Result<(), ScriptError> {
        if self.entries.contains_key(&key) {
            return Err(ScriptError::DuplicateKey(key.to_string()));
        }
        self.entries.insert(key, entry);
        Ok(())
    }

    pub fn lookup(
        &self,
        case_id: &str,
        stage: Stage,
        key: &str,
        variant: Variant,
    ) -> Option<&ScriptEntry> {
        let mut k = ScriptKey {
            case_id: case_id.to_string(),
            stage,
            key: key.to_string(),
            variant: Some(variant),
        };
        if let Some(e) = self.entries.get(&k) {
            return Some(e);
        }
        k.variant = None;
        self.entries.get(&k)
    }
}

pub fn parse_script(text: &str) -> Result<MockScript, ScriptError> {
    let mut script = MockScript::default();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parsed: ScriptLine = serde_json::from_str(line).map_err(|e| ScriptError::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?;
        script.insert(
            ScriptKey {
                case_id: parsed.case_id,
                stage: parsed.stage,
                key: parsed.key,
                variant: parsed.variant,
            },
            parsed.entry,
        )?;
    }
    Ok(script)
}

pub fn load_script(path: impl AsRef<Path>) -> Result<MockScript, ScriptError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => ScriptError::MissingFile(path.to_path_buf()),
        _ => ScriptError::Io {
            path: path.to_path_buf(),
            source: e,
        },
    })?;
    parse_script(&text)
}

#[derive(Debug)]
pub struct MockBackend {
    id: String,
    script: MockScript,
    inject_delay: Option<Duration>,
    calls: AtomicU64,
    // attempts already failed per (key, round), for `transport_failures`
    failures: Mutex<HashMap<(ScriptKey, u32), u32>>,
}

impl MockBackend {
    pub fn new(id: &str, script: MockScript, inject_delay_ms: Option<u64>) -> Self {
        Self {
            id: id.to_string(),
            script,
            inject_delay: inject_delay_ms.map(Duration::from_millis),
            calls: AtomicU64::new(0),
            failures: Mutex::new(HashMap::new()),
        }
    }

    /// Attempts served so far, including failed ones.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Backend for MockBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn attempt(&self, request: &Request<'_>) -> Result<String, AttemptError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let prompt = request.prompt;
        let key = match prompt.stage {
            Stage::Perception => prompt.concept_id.as_deref().unwrap_or_default(),
            Stage::Reasoning => DIAGNOSIS_KEY,
        };
        let entry = self
            .script
            .lookup(request.case_id, prompt.stage, key, request.variant)
            .ok_or_else(|| {
                AttemptError::Fatal(GatewayError::ScriptMiss(format!(
                    "({}, {}, {key}, {})",
                    request.case_id, prompt.stage, request.variant
                )))
            })?;

        if entry.transport_failures > 0 {
            let slot = (
                ScriptKey {
                    case_id: request.case_id.to_string(),
                    stage: prompt.stage,
                    key: key.to_string(),
                    variant: Some(request.variant),
                },
                prompt.repair_round,
            );
            let mut failures = self.failures.lock().unwrap_or_else(|e| e.into_inner());
            let failed = failures.entry(slot).or_insert(0);
            if *failed < entry.transport_failures {
                *failed += 1;
                return Err(AttemptError::Transport("scripted transport failure".into()));
            }
        }

        let delay = entry.delay_ms.map(Duration::from_millis).unwrap_or_default()
            + self.inject_delay.unwrap_or_default();
        if !delay.is_zero() {
            thread::sleep(delay);
        }
        match &entry.malformed_variant {
            Some(bad) if prompt.repair_round < entry.malformed_rounds => Ok(bad.clone()),
            _ => Ok(entry.response_text.clone()),
        }
    }
}
