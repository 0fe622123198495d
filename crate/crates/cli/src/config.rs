//! `--config run.json`: defaults for every subcommand. Flags given on the
//! command line take precedence over the file.

use std::path::{Path, PathBuf};

use evtrack::augment::AugmentPolicy;
use evtrack::binning::{BinningMode, DEFAULT_DOWNSAMPLE, DEFAULT_DT_US};
use evtrack::detector::LossConfig;
use evtrack::events::SensorGeometry;
use evtrack::network::ModelConfig;
use serde::Deserialize;

use crate::error::{CliError, Result};
use crate::io;

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub events: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub width: u32,
    pub height: u32,
    pub dt_us: u32,
    pub downsample: u32,
    pub t0_us: Option<u64>,
    pub frames: Option<usize>,
    pub mode: String,
    pub augment: AugmentPolicy,
    pub model_config: ModelConfig,
    pub loss: LossConfig,
    pub seed: u64,
    /// Emit a prediction every `stride` frames.
    pub stride: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let geometry = SensorGeometry::default();
        RunConfig {
            events: None,
            labels: None,
            model: None,
            width: geometry.width,
            height: geometry.height,
            dt_us: DEFAULT_DT_US,
            downsample: DEFAULT_DOWNSAMPLE,
            t0_us: None,
            frames: None,
            mode: "causal".into(),
            augment: AugmentPolicy::default(),
            model_config: ModelConfig::default(),
            loss: LossConfig::default(),
            seed: 0,
            stride: 5,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = io::read_text(path)?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| CliError::Input {
            path: path.into(),
            source: e.into(),
        })?;
        cfg.augment.validate()?;
        cfg.model_config.validate()?;
        if cfg.stride == 0 {
            return Err(CliError::Usage("stride must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn mode(&self) -> Result<BinningMode> {
        Ok(self.mode.parse()?)
    }
}

/// `flag`, else the config file's value.
pub fn pick<T>(flag: Option<T>, file: T) -> T {
    flag.unwrap_or(file)
}

pub fn require(flag: Option<PathBuf>, file: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| file.clone())
        .ok_or_else(|| CliError::Usage(format!("--{name} is required")))
}
