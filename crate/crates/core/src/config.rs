//! Run configuration: a TOML file whose missing keys take defaults. Relative
//! paths in the file resolve against the file's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ensemble::NormMode;
use crate::error::{Error, Result};
use crate::losses::FocalConfig;
use crate::probe::ProbeConfig;
use crate::submission::SlsLevels;
use crate::trainer::{CheckpointRetention, SelectionCriterion, DEFAULT_LEARNING_RATES, DEFAULT_WEIGHT_DECAYS};
use crate::windows::WindowConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub run_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub features: FeatureConfig,
    pub window: WindowConfig,
    pub probe: ProbeArch,
    pub focal: FocalConfig,
    pub train: TrainConfig,
    pub ensemble: EnsembleSettings,
    pub submission: SlsLevels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_annotations: Option<PathBuf>,
    pub val_annotations: Option<PathBuf>,
    /// Participant ids, one per line.
    pub unseen_participants: Option<PathBuf>,
    pub tail_verbs: Option<PathBuf>,
    pub tail_nouns: Option<PathBuf>,
    /// `verb,noun` per line.
    pub tail_actions: Option<PathBuf>,
    pub video_fps: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_annotations: None,
            val_annotations: None,
            unseen_participants: None,
            tail_verbs: None,
            tail_nouns: None,
            tail_actions: None,
            video_fps: 60.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    #[default]
    Files,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub source: FeatureSource,
    pub dir: Option<PathBuf>,
    pub d_model: usize,
    /// Synthetic source only.
    pub n_obs: usize,
    pub n_pred: usize,
    pub separability: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { source: FeatureSource::Files, dir: None, d_model: 64, n_obs: 16, n_pred: 8, separability: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeArch {
    pub n_blocks: usize,
    pub n_heads: usize,
    pub mlp_ratio: f64,
}

impl Default for ProbeArch {
    fn default() -> Self {
        let p = ProbeConfig::default();
        Self { n_blocks: p.n_blocks, n_heads: p.n_heads, mlp_ratio: p.mlp_ratio }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rates: Vec<f64>,
    pub weight_decays: Vec<f64>,
    /// Permit grids other than 5 x 4.
    pub allow_any_grid: bool,
    pub parallel_heads: usize,
    pub retention: CheckpointRetention,
    pub criterion: SelectionCriterion,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rates: DEFAULT_LEARNING_RATES.to_vec(),
            weight_decays: DEFAULT_WEIGHT_DECAYS.to_vec(),
            allow_any_grid: false,
            parallel_heads: 1,
            retention: CheckpointRetention::Winners,
            criterion: SelectionCriterion::ActionThenVerb,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSettings {
    /// Weight-grid divisions of the unit interval (10 gives steps of 0.1).
    pub grid_steps: usize,
    pub mode: NormMode,
    /// Epochs with the best action MT5R added to the per-field best epochs.
    pub top_action_epochs: usize,
}

impl Default for EnsembleSettings {
    fn default() -> Self {
        Self { grid_steps: 10, mode: NormMode::Softmax, top_action_epochs: 3 }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.resolve_paths(base_dir);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::from_toml_str(&text, base).map_err(|e| e.context(format!("reading {}", path.display())))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(v) = p.as_mut() {
                if v.is_relative() {
                    *v = base.join(&*v);
                }
            }
        };
        fix(&mut self.run_dir);
        fix(&mut self.data.train_annotations);
        fix(&mut self.data.val_annotations);
        fix(&mut self.data.unseen_participants);
        fix(&mut self.data.tail_verbs);
        fix(&mut self.data.tail_nouns);
        fix(&mut self.data.tail_actions);
        fix(&mut self.features.dir);
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            d_model: self.features.d_model,
            n_blocks: self.probe.n_blocks,
            n_heads: self.probe.n_heads,
            mlp_ratio: self.probe.mlp_ratio,
            ..ProbeConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        self.focal.validate()?;
        self.probe_config().validate()?;
        if !(self.data.video_fps.is_finite() && self.data.video_fps > 0.0) {
            return Err(Error::Config(format!("video_fps must be > 0, got {}", self.data.video_fps)));
        }
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if self.ensemble.grid_steps == 0 {
            return Err(Error::Config("ensemble grid_steps must be >= 1".into()));
        }
        Ok(())
    }

    pub fn run_dir(&self) -> Result<&Path> {
        self.run_dir.as_deref().ok_or_else(|| Error::Config("no run directory given".into()))
    }
}

/// The path or a config error naming the missing key; existing paths only.
pub fn require_path<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    let p = p.as_deref().ok_or_else(|| Error::Config(format!("{key} is not set")))?;
    if !p.exists() {
        return Err(Error::Config(format!("{key}: {} does not exist", p.display())));
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::from_toml_str("", Path::new("/x")).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.train.learning_rates.len() * c.train.weight_decays.len(), 20);
        c.validate().unwrap();
    }

    #[test]
    fn sections_and_relative_paths() {
        let text = r#"
            seed = 7
            run_dir = "runs/a"
            [data]
            train_annotations = "train.csv"
            val_annotations = "/abs/val.csv"
            [features]
            source = "synthetic"
            d_model = 32
            [window]
            anticipation_s = 2.0
            [focal]
            gamma = 0.0
            [train]
            epochs = 3
            criterion = { field = "verb" }
            [ensemble]
            mode = "none"
        "#;
        let c = RunConfig::from_toml_str(text, Path::new("/cfg")).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.run_dir.as_deref(), Some(Path::new("/cfg/runs/a")));
        assert_eq!(c.data.train_annotations.as_deref(), Some(Path::new("/cfg/train.csv")));
        assert_eq!(c.data.val_annotations.as_deref(), Some(Path::new("/abs/val.csv")));
        assert_eq!(c.features.source, FeatureSource::Synthetic);
        assert_eq!(c.window.anticipation_s, 2.0);
        assert_eq!(c.window.observation_s, 4.0);
        assert_eq!(c.focal.gamma, 0.0);
        assert_eq!(c.focal.alpha, Some(0.25));
        assert_eq!(c.train.criterion, SelectionCriterion::Field(crate::losses::Field::Verb));
        assert_eq!(c.ensemble.mode, NormMode::None);
        assert_eq!(c.probe_config().d_model, 32);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml_str("sed = 1", Path::new("")).is_err());
        assert!(RunConfig::from_toml_str("[window]\nanticipation = 1.0", Path::new("")).is_err());
    }

    #[test]
    fn serialized_config_reloads() {
        let mut c = RunConfig::default();
        c.run_dir = Some("/r".into());
        c.seed = 99;
        c.focal.alpha = None;
        let back = RunConfig::from_toml_str(&c.to_toml(), Path::new("/")).unwrap();
        assert_eq!(back, c);
    }
}
