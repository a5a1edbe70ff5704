use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};

/// Overrides `data_dir` when set.
pub const DATA_DIR_ENV: &str = "TACTILE_DATA_DIR";

/// Server settings, read from a TOML file. Relative paths resolve against
/// the file's directory.
///
/// ```toml
/// bind = "127.0.0.1:8080"
/// checkpoint = "model.ckpt"      # trained model
/// dataset = "dataset.bin"        # encoded into the initialization index
/// targets = "targets.toml"       # [[target]] id / path / class
/// data_dir = "data"              # sessions and saved artifacts
/// preview_iterations = 16        # Griffin-Lim iterations for playback
/// save_iterations = 50           # for saved artifacts
/// slider_cache = 256             # cached slider previews
/// snapshot_every = 8             # events between session snapshots
/// state_grid = [12, 16]          # spectrogram size in /state
/// index_pairs = 2000             # pairs sampled for the average distance
/// index_seed = 0
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub targets: PathBuf,
    pub data_dir: PathBuf,
    pub preview_iterations: usize,
    pub save_iterations: usize,
    pub slider_cache: usize,
    pub snapshot_every: usize,
    pub state_grid: [usize; 2],
    pub index_pairs: usize,
    pub index_seed: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            checkpoint: "model.ckpt".into(),
            dataset: "dataset.bin".into(),
            targets: "targets.toml".into(),
            data_dir: "data".into(),
            preview_iterations: 16,
            save_iterations: 50,
            slider_cache: 256,
            snapshot_every: 8,
            state_grid: [12, 16],
            index_pairs: 2000,
            index_seed: 0,
        }
    }
}

impl ServiceConfig {
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))?;
        for p in [&mut cfg.checkpoint, &mut cfg.dataset, &mut cfg.targets, &mut cfg.data_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads the file and applies the data directory override.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(ServiceError::io(path))?;
        let mut cfg = Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))?;
        cfg.apply_env();
        Ok(cfg)
    }

    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(DATA_DIR_ENV).filter(|d| !d.is_empty()) {
            self.data_dir = dir.into();
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.preview_iterations == 0 || self.save_iterations == 0 {
            return Err(ServiceError::Config("vocoder iteration counts must be at least 1".into()));
        }
        if self.slider_cache == 0 || self.snapshot_every == 0 {
            return Err(ServiceError::Config("slider_cache and snapshot_every must be at least 1".into()));
        }
        if self.state_grid.contains(&0) {
            return Err(ServiceError::Config("state_grid entries must be at least 1".into()));
        }
        Ok(())
    }
}
