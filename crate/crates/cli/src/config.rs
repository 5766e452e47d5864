//! Experiment configuration files and command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xgans::training::TrainConfig;
use xgans::{Error, Result};

/// Relative output directories are resolved against this, when set.
pub const OUTPUT_ROOT_ENV: &str = "XGANS_OUTPUT_ROOT";
pub const EFFECTIVE_CONFIG_FILE: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Folder of training images.
    pub train_dir: Option<PathBuf>,
    /// Folder of validation images; when absent, `val_count` images are held out of `train_dir`.
    pub val_dir: Option<PathBuf>,
    /// Donor images for the cluttered-block regime.
    pub donor_dir: Option<PathBuf>,
    pub train_count: Option<usize>,
    pub val_count: usize,
    pub out_dir: PathBuf,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train_dir: None,
            val_dir: None,
            donor_dir: None,
            train_count: None,
            val_count: 0,
            out_dir: PathBuf::from("runs/default"),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    /// Every problem with the configuration, including missing paths.
    pub fn problems(&self) -> Vec<String> {
        let mut out = self.train.problems();
        match &self.train_dir {
            None => out.push("train_dir is required".into()),
            Some(d) if !d.is_dir() => out.push(format!("train_dir {} is not a directory", d.display())),
            _ => {}
        }
        for (name, dir) in [("val_dir", &self.val_dir), ("donor_dir", &self.donor_dir)] {
            if let Some(d) = dir {
                if !d.is_dir() {
                    out.push(format!("{name} {} is not a directory", d.display()));
                }
            }
        }
        if self.train.task.needs_donor() && self.donor_dir.is_none() {
            out.push("cluttered-block corruption needs donor_dir".into());
        }
        if !self.train.task.needs_donor() && self.donor_dir.is_some() {
            out.push("donor_dir is only used by cluttered-block corruption".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("{} problem(s):\n  - {}", p.len(), p.join("\n  - "))))
        }
    }
}

/// `dir` itself if absolute or no output root is configured.
pub fn resolve_output(dir: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}
