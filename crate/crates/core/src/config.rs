//! Whole-run configuration, read from and written to TOML.
//!
//! Every section is optional in the file; missing keys take their defaults.
//! Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::backbone::BackboneConfig;
use crate::data::SpriteSceneConfig;
use crate::error::{Error, Result};
use crate::matcher::MatcherConfig;
use crate::metrics::MetricsConfig;
use crate::model::ModelConfig;
use crate::objective::ObjectiveConfig;
use crate::tracker::TrackerConfig;
use crate::train::{OptimizerConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Side of the square augmented views, in pixels.
    pub crop_size: usize,
    pub train_stride: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self { crop_size: t.crop_size, train_stride: t.train_stride }
    }
}

/// Where training clips come from: generated sprite scenes, or a directory
/// of frame images when `frames_dir` is set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub scene: SpriteSceneConfig,
    pub frames_dir: Option<PathBuf>,
    /// `[height, width]` to resize loaded frames to.
    pub resize_to: Option<[usize; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    /// Write an intermediate checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::from("model.ckpt"),
            loss_log: PathBuf::from("loss.csv"),
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub matcher: MatcherConfig,
    pub objective: ObjectiveConfig,
    pub augment: AugmentConfig,
    pub optimizer: OptimizerConfig,
    pub training: TrainingConfig,
    pub data: DataConfig,
    pub tracker: TrackerConfig,
    pub metrics: MetricsConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train_config().validate()?;
        self.data.scene.validate()?;
        self.tracker.validate()?;
        self.metrics.validate()?;
        if let Some(dir) = &self.data.frames_dir {
            if !dir.is_dir() {
                return Err(Error::Config(format!("frames_dir {} is not a directory", dir.display())));
            }
        }
        if matches!(self.data.resize_to, Some([h, w]) if h == 0 || w == 0) {
            return Err(Error::Config("resize_to must be positive".into()));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { backbone: self.backbone.clone(), matcher: self.matcher.clone() }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            objective: self.objective.clone(),
            augment: self.augment.clone(),
            optimizer: self.optimizer.clone(),
            crop_size: self.training.crop_size,
            train_stride: self.training.train_stride,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tracker::TrackMode;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn written_config_reloads_identically() {
        let mut c = RunConfig::default();
        c.optimizer.seed = 17;
        c.optimizer.steps = 12;
        c.augment.label_warp = false;
        c.tracker.mode = TrackMode::Direct;
        c.tracker.eval_stride = Some(2);
        c.data.resize_to = Some([32, 48]);
        c.output.checkpoint_every = 5;
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml(), c.to_toml());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c = RunConfig::from_toml("[optimizer]\nsteps = 3\n[backbone]\nfeature_dim = 32\n").unwrap();
        assert_eq!(c.optimizer.steps, 3);
        assert_eq!(c.backbone.feature_dim, 32);
        assert_eq!(c.matcher, MatcherConfig::default());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::from_toml("[optimizer]\nstepz = 3\n").is_err());
        assert!(RunConfig::from_toml("[training]\ncrop_size = 30\ntrain_stride = 4\n").is_err());
        assert!(RunConfig::from_toml("[data]\nframes_dir = \"/definitely/not/here\"\n").is_err());
    }
}
