use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::Precision;

use super::optim::{OptimConfig, Schedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    /// Size of the generated training split.
    pub train_scenes: usize,
    /// Size of the held-out split used for PSNR.
    pub eval_scenes: usize,
    /// Evaluations spread evenly over the run, the first one before any update.
    pub eval_points: usize,
    /// Write `last.ckpt` every this many steps; 0 disables.
    pub checkpoint_every: u64,
    pub precision: Precision,
    /// Load scenes from this directory instead of generating them.
    pub data_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 8,
            seed: 0,
            train_scenes: 512,
            eval_scenes: 16,
            eval_points: 3,
            checkpoint_every: 100,
            precision: Precision::F32,
            data_dir: None,
        }
    }
}

/// Everything a training run depends on. Serialized into checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// 64² scenes, 300 steps of batch 8.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(),
            optim: OptimConfig {
                lr: 1e-3,
                warmup_steps: 10,
                schedule: Schedule::Cosine,
                min_lr_ratio: 0.05,
                ..OptimConfig::default()
            },
            train: TrainConfig::default(),
        }
    }

    /// Full geometry with 1600 steps of batch 16 at learning rate 1e-4.
    pub fn full_scale() -> Self {
        Self {
            model: ModelConfig::full_scale(),
            optim: OptimConfig::default(),
            train: TrainConfig {
                steps: 1600,
                batch_size: 16,
                train_scenes: 2048,
                ..TrainConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        let t = &self.train;
        if t.steps == 0 || t.batch_size == 0 {
            return Err(Error::Config("steps and batch size must be positive".into()));
        }
        if t.train_scenes == 0 && t.data_dir.is_none() {
            return Err(Error::Config("training split is empty".into()));
        }
        if t.eval_points > 0 && t.eval_scenes == 0 {
            return Err(Error::Config("evaluation requested without held-out scenes".into()));
        }
        // TOML integers are signed
        for (name, v) in [("steps", t.steps), ("seed", t.seed), ("checkpoint_every", t.checkpoint_every)] {
            if v > i64::MAX as u64 {
                return Err(Error::Config(format!("train.{name} = {v} exceeds {}", i64::MAX)));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[], false)
    }

    /// Parse `text` over the chosen base preset, then apply `key.path=value` overrides.
    pub fn from_toml_with(text: &str, overrides: &[String], full_scale: bool) -> Result<Self> {
        let base = if full_scale { Self::full_scale() } else { Self::desk() };
        let mut value = toml::Value::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        let file: toml::Value = toml::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        merge(&mut value, file);
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String], full_scale: bool) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        Self::from_toml_with(&text, overrides, full_scale)
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// `train.steps=50`, `model.use_text=false`, `model.mamba_layers=[1,3]`.
pub fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override `{spec}` has an empty key")));
    }
    let raw = raw.trim();
    // parse as a TOML value, falling back to a bare string
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut cur = root;
    for (i, part) in path.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{}` is not a table", path[..i].join("."))))?;
        if i + 1 == path.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_defaults() {
        let c = RunConfig::desk();
        assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
        assert_eq!(RunConfig::from_toml("").unwrap(), c);
        let p = RunConfig::from_toml_with("", &[], true).unwrap();
        assert_eq!(p.train.steps, 1600);
        assert_eq!(p.model.d_encoder, 768);
    }

    #[test]
    fn file_then_overrides() {
        let text = "[train]\nsteps = 20\n[model]\nuse_text = false\n";
        let c = RunConfig::from_toml_with(
            text,
            &["train.seed=9".into(), "optim.lr=0.01".into(), "train.precision=f64".into()],
            false,
        )
        .unwrap();
        assert_eq!(c.train.steps, 20);
        assert_eq!(c.train.seed, 9);
        assert_eq!(c.optim.lr, 0.01);
        assert_eq!(c.train.precision, Precision::F64);
        assert!(!c.model.use_text);
        assert_eq!(c.model.d_encoder, 64);
    }

    #[test]
    fn bad_input_rejected() {
        assert!(RunConfig::from_toml("[train]\nstepz = 3\n").is_err());
        assert!(RunConfig::from_toml("[train]\nsteps = 0\n").is_err());
        assert!(RunConfig::from_toml_with("", &["nokey".into()], false).is_err());
        assert!(RunConfig::from_toml("[model\n").is_err());
    }
}
