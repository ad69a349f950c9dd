//! Flat key-value run configuration shared by every command.
//!
//! The file format is line-oriented `key = value` with `#` comments.
//! Parsing is all-or-nothing: unknown keys, bad values, and duplicates
//! reject the whole file, so a failed load never leaves a partially-applied
//! configuration behind.

use std::path::Path;

use sparkv_core::dict::{LrSchedule, TrainConfig};
use sparkv_core::engine::CacheConfig;
use sparkv_core::omp::OmpConfig;
use sparkv_core::ValueMode;

use crate::CliError;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub sparsity: usize,
    pub rel_error_threshold: Option<f32>,
    pub batch_rows: usize,
    pub buffer_len: usize,
    pub approx_window: usize,
    pub adaptive: bool,
    pub adaptive_prefill: bool,
    pub max_adaptive_atoms: usize,
    pub value_mode: ValueMode,
    pub learning_rate: f32,
    pub epochs: usize,
    pub schedule: LrSchedule,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub adam_eps: f32,
    pub minibatch_rows: usize,
    pub rng_seed: u64,
    pub dict_width: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            sparsity: 8,
            rel_error_threshold: None,
            batch_rows: 64,
            buffer_len: 128,
            approx_window: 1,
            adaptive: false,
            adaptive_prefill: false,
            max_adaptive_atoms: 0,
            value_mode: ValueMode::Fp8E4M3,
            learning_rate: 1e-4,
            epochs: 20,
            schedule: LrSchedule::CosineDecay,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            minibatch_rows: 128,
            rng_seed: 0,
            dict_width: 1024,
        }
    }
}

impl RunConfig {
    /// Defaults, overlaid with the config file (if given), overlaid with an
    /// explicit seed (if given). Validates before returning.
    pub fn load(path: Option<&Path>, seed_override: Option<u64>) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Data(format!("config {}: {e}", path.display())))?;
            cfg.apply_text(&text)?;
        }
        if let Some(seed) = seed_override {
            cfg.rng_seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        let mut seen: Vec<&str> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!("config line {}: expected key = value", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if seen.contains(&key) {
                return Err(CliError::Usage(format!(
                    "config line {}: duplicate key '{key}'",
                    lineno + 1
                )));
            }
            seen.push(key);
            self.apply_pair(key, value)
                .map_err(|e| CliError::Usage(format!("config line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    fn apply_pair(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String>
        where
            T::Err: std::fmt::Display,
        {
            value
                .parse()
                .map_err(|e| format!("'{key}': bad value '{value}': {e}"))
        }
        fn parse_bool(key: &str, value: &str) -> Result<bool, String> {
            match value {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(format!("'{key}': expected a boolean, got '{value}'")),
            }
        }

        match key {
            "sparsity" => self.sparsity = parse(key, value)?,
            "rel_error_threshold" => {
                self.rel_error_threshold = if value == "none" {
                    None
                } else {
                    Some(parse(key, value)?)
                }
            }
            "batch_rows" => self.batch_rows = parse(key, value)?,
            "buffer_len" => self.buffer_len = parse(key, value)?,
            "approx_window" => self.approx_window = parse(key, value)?,
            "adaptive" => self.adaptive = parse_bool(key, value)?,
            "adaptive_prefill" => self.adaptive_prefill = parse_bool(key, value)?,
            "max_adaptive_atoms" => self.max_adaptive_atoms = parse(key, value)?,
            "value_mode" => {
                self.value_mode = match value {
                    "fp8_e4m3" => ValueMode::Fp8E4M3,
                    "fp16" => ValueMode::Fp16,
                    _ => return Err(format!("'{key}': expected fp8_e4m3 or fp16, got '{value}'")),
                }
            }
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "schedule" => {
                self.schedule = match value {
                    "cosine-decay" => LrSchedule::CosineDecay,
                    "constant" => LrSchedule::Constant,
                    _ => {
                        return Err(format!(
                            "'{key}': expected cosine-decay or constant, got '{value}'"
                        ))
                    }
                }
            }
            "adam_beta1" => self.adam_beta1 = parse(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "minibatch_rows" => self.minibatch_rows = parse(key, value)?,
            "rng_seed" => self.rng_seed = parse(key, value)?,
            "dict_width" => self.dict_width = parse(key, value)?,
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.cache_config()
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        self.train_config()
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        if self.dict_width == 0 {
            return Err(CliError::Usage("dict_width must be >= 1".into()));
        }
        if self.batch_rows == 0 {
            return Err(CliError::Usage("batch_rows must be >= 1".into()));
        }
        Ok(())
    }

    pub fn cache_config(&self) -> CacheConfig {
        CacheConfig {
            sparsity: self.sparsity,
            buffer_len: self.buffer_len,
            approx_window: self.approx_window,
            rel_error_threshold: self.rel_error_threshold,
            adaptive: self.adaptive,
            adaptive_prefill: self.adaptive_prefill,
            max_adaptive_atoms: self.max_adaptive_atoms,
            value_mode: self.value_mode,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            schedule: self.schedule,
            sparsity: self.sparsity,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            minibatch_rows: self.minibatch_rows,
            rng_seed: self.rng_seed,
        }
    }

    pub fn omp_config(&self) -> OmpConfig {
        OmpConfig {
            max_sparsity: self.sparsity,
            rel_error_threshold: self.rel_error_threshold,
            batch_rows: self.batch_rows,
        }
    }
}
