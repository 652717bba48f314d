use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dermlens_core::gateway::BackendConfig;
use dermlens_core::parser::DEFAULT_MAX_REPAIR_ROUNDS;
use dermlens_core::{Split, Variant};
use serde::{Deserialize, Serialize};

fn default_variant() -> Variant {
    Variant::Full
}
fn default_split() -> Split {
    Split::Test
}
fn default_workers() -> usize {
    1
}
fn default_repairs() -> u32 {
    DEFAULT_MAX_REPAIR_ROUNDS
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Contents of the `--config` file. Relative paths are resolved against the
/// directory holding the file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub backend: BackendConfig,
    #[serde(default)]
    pub lite_backend: Option<BackendConfig>,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default)]
    pub template_dir: Option<PathBuf>,
    #[serde(default = "default_repairs")]
    pub max_repair_rounds: u32,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_split")]
    pub split: Split,
    #[serde(default)]
    pub tags: BTreeSet<String>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Default seed for `perturb` when `--seed` is not given.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut config: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        config.base_dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        if config.workers == 0 {
            bail!("config {}: workers must be at least 1", path.display());
        }
        Ok(config)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.resolve(&self.manifest)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }
}
