//! Run configuration: every tunable in one JSON document, hashed into each artifact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bridge::{BridgeError, BridgeSchedule, TimeGrid};
use crate::data::SynthConfig;
use crate::distill::DistillConfig;
use crate::inference::FrontEnd;
use crate::losses::SpecLoss;
use crate::metrics::MetricError;
use crate::model::ModelConfig;
use crate::signal::{SpecTransform, StftConfig};
use crate::teacher::TeacherConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{what} hash mismatch: expected {expected}, found {found}; refusing to compare")]
    Mismatch {
        what: &'static str,
        expected: String,
        found: String,
    },
}

impl From<BridgeError> for ConfigError {
    fn from(e: BridgeError) -> Self {
        ConfigError::Invalid(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub n: usize,
    pub rho: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { n: 40, rho: 7.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub nfe: Vec<usize>,
    /// Cap on scored test utterances; `None` scores the whole split.
    pub max_utterances: Option<usize>,
    pub rtf_duration_s: f64,
    pub rtf_runs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            nfe: vec![1, 2, 4, 8, 16],
            max_utterances: None,
            rtf_duration_s: 10.0,
            rtf_runs: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Epoch budget of each ablation run.
    pub ablation_epochs: usize,
    pub lambda_p_sweep: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            ablation_epochs: 20,
            lambda_p_sweep: vec![6e-4, 5e-4, 4e-4],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schedule: BridgeSchedule,
    pub grid: GridConfig,
    pub stft: StftConfig,
    pub transform: SpecTransform,
    /// Waveforms are scaled to this RMS before analysis.
    pub norm_rms: f64,
    pub model: ModelConfig,
    pub data: SynthConfig,
    pub teacher: TeacherConfig,
    pub distill: DistillConfig,
    pub eval: EvalConfig,
    pub experiments: ExperimentConfig,
}

/// Fields that change what a spectrogram or a time value means.
#[derive(Serialize)]
struct SignalView<'a> {
    schedule: &'a BridgeSchedule,
    grid: &'a GridConfig,
    stft: &'a StftConfig,
    transform: &'a SpecTransform,
    norm_rms: f64,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schedule: BridgeSchedule::default(),
            grid: GridConfig::default(),
            stft: StftConfig::default(),
            transform: SpecTransform::default(),
            norm_rms: 0.05,
            model: ModelConfig::default(),
            data: SynthConfig::default(),
            teacher: TeacherConfig::default(),
            distill: DistillConfig::default(),
            eval: EvalConfig::default(),
            experiments: ExperimentConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Hash of the whole config.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serialises").as_bytes())
    }

    /// Hash of the signal front end and time discretisation only. Scores are
    /// comparable across artifacts exactly when this agrees.
    pub fn signal_hash(&self) -> String {
        let view = SignalView {
            schedule: &self.schedule,
            grid: &self.grid,
            stft: &self.stft,
            transform: &self.transform,
            norm_rms: self.norm_rms,
        };
        sha256_hex(serde_json::to_string(&view).expect("view serialises").as_bytes())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.schedule.validate()?;
        self.time_grid()?;
        self.stft.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.transform.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.norm_rms > 0.0 && self.norm_rms.is_finite()) {
            return Err(ConfigError::Invalid(format!("norm_rms must be > 0, got {}", self.norm_rms)));
        }
        if self.model.t_min > self.schedule.sigma_min || self.model.t_max < self.schedule.sigma_max {
            return Err(ConfigError::Invalid(format!(
                "model time range [{}, {}] must cover the grid [{}, {}]",
                self.model.t_min, self.model.t_max, self.schedule.sigma_min, self.schedule.sigma_max
            )));
        }
        self.data.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.data.sample_rate != self.stft.sample_rate {
            return Err(ConfigError::Invalid("data and stft sample rates differ".into()));
        }
        self.teacher.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.distill.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.eval.nfe.is_empty() || self.eval.nfe.iter().any(|&k| k == 0 || k > self.grid.n) {
            return Err(ConfigError::Invalid(format!("eval nfe values must lie in 1..={}", self.grid.n)));
        }
        if self.experiments.lambda_p_sweep.iter().any(|&v| !(v > 0.0)) {
            return Err(ConfigError::Invalid("lambda_p sweep values must be > 0".into()));
        }
        Ok(())
    }

    pub fn time_grid(&self) -> Result<TimeGrid, ConfigError> {
        Ok(TimeGrid::from_schedule(self.grid.n, self.grid.rho, &self.schedule)?)
    }

    pub fn front_end(&self) -> FrontEnd {
        FrontEnd {
            stft: self.stft,
            transform: self.transform,
            norm_rms: self.norm_rms,
        }
    }

    pub fn spec_loss(&self) -> Result<SpecLoss<f32>, MetricError> {
        SpecLoss::new(self.stft, self.transform)
    }

    /// Metadata block embedded in checkpoints and reports.
    pub fn metadata(&self, kind: &str) -> serde_json::Value {
        serde_json::json!({
            "kind": kind,
            "config_hash": self.hash(),
            "signal_hash": self.signal_hash(),
            "config": self,
        })
    }
}

/// Errors unless `found` equals `expected`.
pub fn ensure_same(what: &'static str, expected: &str, found: &str) -> Result<(), ConfigError> {
    if expected == found {
        Ok(())
    } else {
        Err(ConfigError::Mismatch {
            what,
            expected: expected.to_string(),
            found: found.to_string(),
        })
    }
}
