//! Flat `key=value` run configuration ('#' comments). Every model and
//! optimizer field has a key and a default; unknown keys are errors naming
//! the key.

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// AdamW step size; dropped by 10x at 80% of the step budget.
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub eval_interval: usize,
    pub checkpoint_interval: usize,
    pub train_data: PathBuf,
    pub val_data: PathBuf,
    pub out_dir: PathBuf,
    /// Checkpoint to resume from; empty disables.
    pub resume: Option<PathBuf>,
    /// Progress line to stderr every this many steps; 0 is silent.
    pub log_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            lr: 1e-4,
            weight_decay: 1e-4,
            steps: 20000,
            batch_size: 8,
            eval_interval: 2000,
            checkpoint_interval: 5000,
            train_data: PathBuf::new(),
            val_data: PathBuf::new(),
            out_dir: PathBuf::new(),
            resume: None,
            log_every: 0,
        }
    }
}

impl RunConfig {
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("bad value `{value}` for key `{key}` ({what})"));
        match key {
            "lr" => self.lr = value.parse().map_err(|_| bad("number"))?,
            "weight_decay" => self.weight_decay = value.parse().map_err(|_| bad("number"))?,
            "steps" => self.steps = value.parse().map_err(|_| bad("integer"))?,
            "batch_size" => self.batch_size = value.parse().map_err(|_| bad("integer"))?,
            "eval_interval" => self.eval_interval = value.parse().map_err(|_| bad("integer"))?,
            "checkpoint_interval" => {
                self.checkpoint_interval = value.parse().map_err(|_| bad("integer"))?
            }
            "train_data" => self.train_data = PathBuf::from(value),
            "val_data" => self.val_data = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "resume" => {
                self.resume = if value.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            "log_every" => self.log_every = value.parse().map_err(|_| bad("integer"))?,
            _ => {
                if !self.model.apply_kv(key, value)? {
                    return Err(Error::Config(format!("unknown config key `{key}`")));
                }
            }
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected key=value, got `{line}`",
                    lineno + 1
                ))
            })?;
            cfg.apply_kv(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let mut problems = Vec::new();
        if self.steps == 0 {
            problems.push("steps must be > 0".to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be > 0".to_string());
        }
        if self.eval_interval == 0 || self.checkpoint_interval == 0 {
            problems.push("eval_interval and checkpoint_interval must be > 0".to_string());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            problems.push(format!("lr {} must be positive", self.lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            problems.push(format!("weight_decay {} must be >= 0", self.weight_decay));
        }
        for (name, p) in [("train_data", &self.train_data), ("val_data", &self.val_data)] {
            if !p.is_dir() {
                problems.push(format!("{name} `{}` is not a directory", p.display()));
            }
        }
        if let Some(r) = &self.resume {
            if !r.is_file() {
                problems.push(format!("resume checkpoint `{}` not found", r.display()));
            }
        }
        if self.out_dir.as_os_str().is_empty() {
            problems.push("out_dir must be set".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}
