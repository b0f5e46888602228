//! Flat `key = value` run configuration.

use std::str::FromStr;

use boxboot::data::{SceneConfig, DEFAULT_PP_RATIO};
use boxboot::train::TrainConfig;

/// Every setting a command may read. Keys absent from the file keep their
/// defaults. `seed` drives both scene generation and training.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub pp_ratio: f64,
    pub train: TrainConfig,
    pub export_masks: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            pp_ratio: DEFAULT_PP_RATIO,
            train: TrainConfig::default(),
            export_masks: false,
        }
    }
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    raw.parse().map_err(|e| format!("bad value {raw:?} for {key}: {e}"))
}

/// `"1..3"` (inclusive) or a single count.
fn object_range(raw: &str) -> Result<(usize, usize), String> {
    let bad = || format!("bad value {raw:?} for objects_per_image: expected e.g. 1..3");
    match raw.split_once("..") {
        Some((a, b)) => {
            let b = b.strip_prefix('=').unwrap_or(b);
            Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
        }
        None => {
            let n = raw.parse().map_err(|_| bad())?;
            Ok((n, n))
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut cfg = RunConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (key, raw) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key = value", i + 1))?;
            let (key, raw) = (key.trim(), raw.trim());
            cfg.set(key, raw).map_err(|e| format!("line {}: {e}", i + 1))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, raw: &str) -> Result<(), String> {
        let t = &mut self.train;
        match key {
            "loss_variant" => t.loss_variant = value(key, raw)?,
            "region_mode" => t.region_mode = value(key, raw)?,
            "tau" => t.tau = value(key, raw)?,
            "slope" => t.slope = value(key, raw)?,
            "lr" => t.lr = value(key, raw)?,
            "batch_size" => t.batch_size = value(key, raw)?,
            "pp_sampling_chance" => t.pp_sampling_chance = value(key, raw)?,
            "t_samples" => t.t_samples = value(key, raw)?,
            "steps" => t.steps = value(key, raw)?,
            "eval_every" => t.eval_every = value(key, raw)?,
            "seed" => {
                t.seed = value(key, raw)?;
                self.scene.seed = t.seed;
            }
            "width" => self.scene.width = value(key, raw)?,
            "height" => self.scene.height = value(key, raw)?,
            "classes" => self.scene.classes = value(key, raw)?,
            "objects_per_image" => (self.scene.objects_min, self.scene.objects_max) = object_range(raw)?,
            "jitter_max" => self.scene.jitter_max = value(key, raw)?,
            "pp_ratio" => self.pp_ratio = value(key, raw)?,
            "export_masks" => self.export_masks = value(key, raw)?,
            _ => return Err(format!("unknown config key {key:?}")),
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), String> {
        self.scene.validate().map_err(|e| e.to_string())?;
        self.train.validate().map_err(|e| e.to_string())?;
        if !(0.0..=1.0).contains(&self.pp_ratio) {
            return Err(format!("pp_ratio must lie in [0, 1], got {}", self.pp_ratio));
        }
        Ok(())
    }
}
