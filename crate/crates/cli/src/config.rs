//! TOML run configuration: optional sections with defaults, unknown keys
//! rejected, flag overrides applied on top.

use crate::Common;
use semnav::learner::{OptimizerKind, TrainConfig};
use semnav::metrics::EvalOptions;
use semnav::pipeline::{EncoderConfig, GenConfig};
use semnav::SensorParams;
use serde::Deserialize;
use std::path::Path;

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub gen: Option<GenConfig>,
    pub encoder: Option<EncoderConfig>,
    pub train: Option<TrainSection>,
    pub eval: Option<EvalSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// 0 means one batch per full dataset pass.
    pub batch_size: usize,
    pub max_epochs: usize,
    pub window: usize,
    pub tolerance: f64,
    pub seed: u64,
    pub temperature: f64,
    pub threads: usize,
    pub freeze_map: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            learning_rate: d.learning_rate,
            optimizer: d.optimizer,
            batch_size: 0,
            max_epochs: d.max_epochs,
            window: d.window,
            tolerance: d.tolerance,
            seed: d.seed,
            temperature: d.temperature,
            threads: d.threads,
            freeze_map: d.freeze_map,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub temperature: f64,
    pub success_factor: usize,
    pub num_rays: usize,
    pub max_range: f64,
    pub label_noise: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        let d = EvalOptions::default();
        EvalSection {
            temperature: d.temperature,
            success_factor: d.success_factor,
            num_rays: d.sensor.num_rays,
            max_range: d.sensor.max_range,
            label_noise: d.sensor.label_noise,
        }
    }
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<FileConfig, String> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("bad config {}: {e}", path.display()))
    }

    pub fn gen_config(&self) -> GenConfig {
        self.gen.clone().unwrap_or_default()
    }

    pub fn encoder_config(&self, common: &Common) -> EncoderConfig {
        let mut cfg = self.encoder.clone().unwrap_or_default();
        if let Some(mode) = common.encoder {
            cfg.mode = mode;
        }
        if let Some(endpoint_only) = common.endpoint_only {
            cfg.endpoint_only = endpoint_only;
        }
        cfg
    }

    pub fn train_config(&self) -> TrainConfig {
        let s = self.train.as_ref().cloned().unwrap_or_default();
        TrainConfig {
            learning_rate: s.learning_rate,
            optimizer: s.optimizer,
            batch_size: if s.batch_size == 0 {
                None
            } else {
                Some(s.batch_size)
            },
            max_epochs: s.max_epochs,
            window: s.window,
            tolerance: s.tolerance,
            seed: s.seed,
            temperature: s.temperature,
            threads: s.threads,
            freeze_map: s.freeze_map,
        }
    }

    pub fn eval_options(&self, common: &Common) -> EvalOptions {
        let s = self.eval.as_ref().cloned().unwrap_or_default();
        let mut opts = EvalOptions {
            temperature: s.temperature,
            success_factor: s.success_factor,
            sensor: SensorParams {
                num_rays: s.num_rays,
                max_range: s.max_range,
                label_noise: s.label_noise,
            },
        };
        if let Some(temperature) = common.temperature {
            opts.temperature = temperature;
        }
        opts
    }
}
