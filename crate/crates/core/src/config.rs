//! Run configuration shared by the library pipeline and the command line.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{ModelError, SceneError};
use crate::scenegen::DatasetConfig;
use crate::sit_target::RotationRepr;
use crate::situnet::{Mode, ModelConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenConfig {
    pub voxel_size: f64,
    pub n_tokens: usize,
}

impl Default for TokenConfig {
    fn default() -> Self {
        Self {
            voxel_size: 0.02,
            n_tokens: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Localization thresholds in meters.
    pub loc_thresholds: Vec<f64>,
    /// Orientation thresholds in degrees.
    pub rot_thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            loc_thresholds: vec![0.5, 1.0],
            rot_thresholds: vec![15.0, 30.0],
        }
    }
}

/// Axes swept by the ablation command. Empty lists keep the base value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
    pub n_tokens: Vec<usize>,
    pub voxel_sizes: Vec<f64>,
    pub reprs: Vec<RotationRepr>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            modes: vec![
                Mode::Full,
                Mode::NoSituationText,
                Mode::GtAsIntermediate,
                Mode::DirectRegression,
            ],
            seeds: vec![0, 1, 2],
            n_tokens: Vec::new(),
            voxel_sizes: Vec::new(),
            reprs: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds parameter initialization, batch order and teacher forcing.
    pub seed: u64,
    pub mode: Mode,
    pub output_dir: PathBuf,
    /// Fraction of scenes held out for evaluation.
    pub val_fraction: f64,
    pub dataset: DatasetConfig,
    pub tokens: TokenConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: Mode::Full,
            output_dir: PathBuf::from("runs/default"),
            val_fraction: 0.1,
            dataset: DatasetConfig::default(),
            tokens: TokenConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

fn field_err(field: &str, msg: impl Into<String>) -> ModelError {
    ModelError::Config {
        field: field.to_string(),
        msg: msg.into(),
    }
}

fn prefixed(prefix: &str, e: ModelError) -> ModelError {
    match e {
        ModelError::Config { field, msg } => field_err(&format!("{prefix}.{field}"), msg),
        other => other,
    }
}

impl RunConfig {
    /// Small preset that runs generate, train and eval in about a minute on
    /// one core.
    pub fn smoke() -> Self {
        let mut c = Self::default();
        c.output_dir = PathBuf::from("runs/smoke");
        c.dataset.n_scenes = 40;
        c.dataset.episodes_per_scene = 10;
        c.tokens = TokenConfig {
            voxel_size: 0.5,
            n_tokens: 64,
        };
        c.model = ModelConfig {
            dim: 32,
            heads: 2,
            ffn_hidden: 64,
            pe_hidden: 32,
            head_hidden: 32,
            fusion_layers: 2,
            reencode_layers: 1,
            decoder_layers: 1,
            ..ModelConfig::default()
        };
        c.train.epochs = 5;
        c.train.lr = 1e-3;
        c.train.sigma_cells = 1.0;
        c.train.enlarge = 1.0;
        c.val_fraction = 0.2;
        c
    }

    /// Checks every field; errors name the offending field path.
    pub fn validate(&self) -> Result<(), ModelError> {
        self.dataset.validate().map_err(|e| match e {
            SceneError::InvalidConfig(m) => field_err("dataset", m),
            other => other.into(),
        })?;
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(field_err("val_fraction", "must be in (0, 1)"));
        }
        if self.dataset.n_scenes < 2 {
            return Err(field_err("dataset.n_scenes", "need at least 2 scenes to split"));
        }
        if !(self.tokens.voxel_size > 0.0 && self.tokens.voxel_size <= 10.0) {
            return Err(field_err("tokens.voxel_size", "must be in (0, 10] meters"));
        }
        if self.tokens.n_tokens == 0 || self.tokens.n_tokens > 65_536 {
            return Err(field_err("tokens.n_tokens", "must be in 1..=65536"));
        }
        self.model.validate().map_err(|e| prefixed("model", e))?;
        self.train.validate().map_err(|e| prefixed("train", e))?;
        let positive = |v: &[f64]| !v.is_empty() && v.iter().all(|x| *x > 0.0 && x.is_finite());
        if !positive(&self.eval.loc_thresholds) {
            return Err(field_err("eval.loc_thresholds", "need at least one positive threshold"));
        }
        if !positive(&self.eval.rot_thresholds) {
            return Err(field_err("eval.rot_thresholds", "need at least one positive threshold"));
        }
        if self.ablation.seeds.is_empty() {
            return Err(field_err("ablation.seeds", "need at least one seed"));
        }
        if self.ablation.n_tokens.contains(&0) {
            return Err(field_err("ablation.n_tokens", "token counts must be positive"));
        }
        if self.ablation.voxel_sizes.iter().any(|v| !(*v > 0.0)) {
            return Err(field_err("ablation.voxel_sizes", "voxel sizes must be positive"));
        }
        Ok(())
    }
}
