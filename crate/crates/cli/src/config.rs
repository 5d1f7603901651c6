//! Run configuration files (TOML).
//!
//! ```toml
//! [data]
//! manifest = "data/manifest.json"  # relative to this file
//! split = "train"                  # train | val | all
//!
//! [policy]
//! hidden = 64
//!
//! [train]
//! mode = "apg"
//! epochs = 200
//! reset = { kind = "distance", xi = 1.0 }
//! ```
//!
//! Every section and key is optional; missing keys take their defaults.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use apg_core::{PolicyConfig, Split, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitSel {
    #[default]
    Train,
    Val,
    All,
}

impl SplitSel {
    pub fn split(self) -> Option<Split> {
        match self {
            SplitSel::Train => Some(Split::Train),
            SplitSel::Val => Some(Split::Val),
            SplitSel::All => None,
        }
    }
}

impl std::str::FromStr for SplitSel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(SplitSel::Train),
            "val" => Ok(SplitSel::Val),
            "all" => Ok(SplitSel::All),
            other => Err(format!("unknown split `{other}` (expected train, val or all)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset manifest; relative paths resolve against the config file.
    pub manifest: PathBuf,
    pub split: SplitSel,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub policy: PolicyConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if cfg.data.manifest.is_relative() && !cfg.data.manifest.as_os_str().is_empty() {
            let base = path.parent().unwrap_or(Path::new("."));
            cfg.data.manifest = base.join(&cfg.data.manifest);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        self.train.validate()?;
        if self.data.manifest.as_os_str().is_empty() {
            anyhow::bail!("no dataset: set [data] manifest or pass --dataset");
        }
        Ok(())
    }
}

/// Tool name and version written into every output directory.
pub fn tool_version() -> String {
    format!("apg {}", env!("CARGO_PKG_VERSION"))
}

#[derive(Serialize)]
struct RunRecord<'a, T: Serialize> {
    tool: String,
    command: &'a str,
    seed: u64,
    config: &'a T,
}

/// Writes `run.toml` with the tool version, seed and resolved config.
pub fn write_run_record<T: Serialize>(dir: &Path, command: &str, seed: u64, config: &T) -> Result<()> {
    let rec = RunRecord {
        tool: tool_version(),
        command,
        seed,
        config,
    };
    let text = toml::to_string(&rec).context("serializing run record")?;
    std::fs::write(dir.join("run.toml"), text).context("writing run.toml")?;
    Ok(())
}
