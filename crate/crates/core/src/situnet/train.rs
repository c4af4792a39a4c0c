//! Data preparation, losses, the training loop and checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{EpisodeInput, Mode, ModelConfig, PeSource, SceneInput, SitNet};
use super::text::{AnswerVocab, TextRole, TextTokens, Vocabulary};
use crate::error::{ModelError, NnError};
use crate::geometry::SituationVector;
use crate::scenegen::{Dataset, Episode, CATEGORIES};
use crate::sit_target::{
    gaussian_targets, situation_loss, LikelihoodLoss, RotSupervision, SituationLossConfig,
};
use crate::tinynn::{write_atomic, AdamW, AdamWConfig, FloatType, Graph, Matrix, ParameterSet, Var};
use crate::voxtok::tokenize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Episodes per optimizer step; a batch never mixes scenes.
    pub batch_size: usize,
    pub lr: f64,
    /// The learning rate decays linearly to `lr · lr_final_fraction`.
    pub lr_final_fraction: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Probability per batch of feeding the supervision pose to the
    /// situational PE instead of the estimate.
    pub teacher_forcing: f64,
    pub situation_loss_weight: f64,
    pub qa_loss_weight: f64,
    /// Gaussian kernel width in multiples of the token pitch.
    pub sigma_cells: f64,
    pub enlarge: f64,
    pub lambda_rot: f64,
    pub likelihood_loss: LikelihoodLoss,
    pub focal_gamma: f64,
    pub rot_supervision: RotSupervision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 10,
            lr: 2e-5,
            lr_final_fraction: 1.0,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            teacher_forcing: 0.5,
            situation_loss_weight: 1.0,
            qa_loss_weight: 1.0,
            sigma_cells: 2.0,
            enlarge: 2.0,
            lambda_rot: 1.0,
            likelihood_loss: LikelihoodLoss::Bce,
            focal_gamma: 2.0,
            rot_supervision: RotSupervision::NearPeak,
        }
    }
}

fn cfg_err(field: &str, msg: &str) -> ModelError {
    ModelError::Config {
        field: field.to_string(),
        msg: msg.to_string(),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.epochs > 100_000 {
            return Err(cfg_err("epochs", "must be at most 100000"));
        }
        if self.batch_size == 0 {
            return Err(cfg_err("batch_size", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr < 1.0) {
            return Err(cfg_err("lr", "must be in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.lr_final_fraction) {
            return Err(cfg_err("lr_final_fraction", "must be in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.weight_decay) {
            return Err(cfg_err("weight_decay", "must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(cfg_err("beta1", "betas must be in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(cfg_err("eps", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.teacher_forcing) {
            return Err(cfg_err("teacher_forcing", "must be a probability"));
        }
        if self.situation_loss_weight < 0.0 || self.qa_loss_weight < 0.0 || self.lambda_rot < 0.0 {
            return Err(cfg_err("situation_loss_weight", "loss weights must be non-negative"));
        }
        if !(self.sigma_cells > 0.0) {
            return Err(cfg_err("sigma_cells", "must be positive"));
        }
        if !(self.enlarge >= 1.0) {
            return Err(cfg_err("enlarge", "must be at least 1"));
        }
        if !(self.focal_gamma >= 0.0) {
            return Err(cfg_err("focal_gamma", "must be non-negative"));
        }
        Ok(())
    }

    fn loss_config(&self) -> SituationLossConfig {
        SituationLossConfig {
            lambda_rot: self.lambda_rot,
            likelihood: self.likelihood_loss,
            focal_gamma: self.focal_gamma,
        }
    }
}

/// Bookkeeping kept next to each prepared episode.
#[derive(Debug, Clone)]
pub struct EpisodeMeta {
    pub dataset_index: usize,
    pub scene_id: String,
    pub answer: String,
    pub question_type: crate::scenegen::QuestionType,
    pub family: Option<crate::scenegen::QuestionFamily>,
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub scenes: Vec<SceneInput>,
    pub episodes: Vec<EpisodeInput>,
    pub meta: Vec<EpisodeMeta>,
}

/// Tokenizes every scene of the dataset once.
pub fn prepare_scenes(dataset: &Dataset, voxel_size: f64, n_tokens: usize) -> Result<Vec<SceneInput>, ModelError> {
    dataset
        .scenes
        .iter()
        .map(|s| {
            let tokens = tokenize(&s.point_cloud(), voxel_size, CATEGORIES.len(), n_tokens)?;
            SceneInput::new(&s.id, tokens)
        })
        .collect()
}

/// Uniform pose inside the scene bounds, deterministic in `(seed, index)`.
pub fn corrupted_target(scene: &SceneInput, gt: &SituationVector, seed: u64, index: usize) -> SituationVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let (lo, hi) = scene.tokens.bounds;
    let pos = Vector3::new(
        rng.random_range(lo.x..=hi.x),
        rng.random_range(lo.y..=hi.y),
        gt.pos.z,
    );
    SituationVector::from_yaw(pos, rng.random_range(-std::f64::consts::PI..std::f64::consts::PI))
}

/// Converts dataset episodes into network inputs. `corrupt_seed` replaces
/// every supervision pose with a uniformly random one.
pub fn prepare_episodes(
    dataset: &Dataset,
    indices: &[usize],
    scenes: &[SceneInput],
    vocab: &Vocabulary,
    answers: &AnswerVocab,
    max_text_len: usize,
    corrupt_seed: Option<u64>,
) -> Result<(Vec<EpisodeInput>, Vec<EpisodeMeta>), ModelError> {
    let lookup: BTreeMap<&str, usize> = scenes.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    let mut eps = Vec::with_capacity(indices.len());
    let mut meta = Vec::with_capacity(indices.len());
    for &i in indices {
        let e: &Episode = &dataset.episodes[i];
        let scene = *lookup
            .get(e.scene_id.as_str())
            .ok_or_else(|| cfg_err("scene_id", &format!("episode {i} names unknown scene {}", e.scene_id)))?;
        let target = match corrupt_seed {
            Some(seed) => corrupted_target(&scenes[scene], &e.gt, seed, i),
            None => e.gt,
        };
        eps.push(EpisodeInput {
            scene,
            situation: TextTokens::new(vocab.encode(&e.situation)?, max_text_len, TextRole::Situation),
            question: TextTokens::new(vocab.encode(&e.question)?, max_text_len, TextRole::Question),
            gt: e.gt,
            target,
            answer: answers.index(&e.answer),
        });
        meta.push(EpisodeMeta {
            dataset_index: i,
            scene_id: e.scene_id.clone(),
            answer: e.answer.clone(),
            question_type: e.question_type,
            family: e.family,
        });
    }
    Ok((eps, meta))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub situation: f64,
    pub qa: f64,
    pub total: f64,
}

/// Mean loss of a batch of episodes sharing one scene.
pub fn batch_loss(
    net: &SitNet,
    p: &ParameterSet,
    scene: &SceneInput,
    episodes: &[&EpisodeInput],
    pe_source: PeSource,
    cfg: &TrainConfig,
) -> Result<(Graph, Var, LossParts), ModelError> {
    let mut g = Graph::new();
    let sv = net.scene_vars(&mut g, p, scene)?;
    let with_answer = cfg.qa_loss_weight > 0.0;
    let scale = 1.0 / episodes.len().max(1) as f64;
    let mut terms = Vec::new();
    let mut parts = LossParts::default();
    let real = vec![true; scene.num_tokens()];
    let repr = net.config.repr;
    for e in episodes {
        let v = net.episode(&mut g, p, &sv, scene, e, pe_source, with_answer)?;
        if cfg.situation_loss_weight > 0.0 && net.mode.estimates_situation() {
            let l = if let Some(out) = v.situation_out {
                let t = gaussian_targets(
                    &scene.anchors,
                    &real,
                    &e.target,
                    cfg.sigma_cells * scene.tokens.pitch,
                    cfg.enlarge,
                    repr,
                    cfg.rot_supervision,
                )?;
                situation_loss(&mut g, out, &t, &cfg.loss_config())?
            } else if let Some(out) = v.regression_out {
                let pos = scene.normalize(&e.target.pos);
                let pt = Matrix::row_vector(pos.as_slice());
                let rt = Matrix::row_vector(&repr.encode(&e.target));
                let po = g.slice_cols(out, 0, 3)?;
                let ro = g.slice_cols(out, 3, repr.dim())?;
                let lp = g.l1(po, &pt, &[1.0])?;
                let lr = g.l1(ro, &rt, &[cfg.lambda_rot])?;
                g.add(lp, lr)?
            } else {
                unreachable!("situation-estimating modes produce a head output")
            };
            parts.situation += g.scalar(l) * scale;
            terms.push(g.scale(l, cfg.situation_loss_weight * scale)?);
        }
        if let (Some(logits), Some(a)) = (v.answer_logits, e.answer) {
            let l = g.softmax_cross_entropy(logits, a)?;
            parts.qa += g.scalar(l) * scale;
            terms.push(g.scale(l, cfg.qa_loss_weight * scale)?);
        }
    }
    let loss = match terms.split_first() {
        None => g.constant(Matrix::zeros(1, 1))?,
        Some((&first, rest)) => {
            let mut acc = first;
            for &t in rest {
                acc = g.add(acc, t)?;
            }
            acc
        }
    };
    parts.total = g.scalar(loss);
    Ok((g, loss, parts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub situation_loss: f64,
    pub qa_loss: f64,
    pub total_loss: f64,
}

/// Groups episode indices by scene, then cuts groups into batches.
pub fn scene_batches(episodes: &[EpisodeInput], batch_size: usize) -> Vec<Vec<usize>> {
    let mut by_scene: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, e) in episodes.iter().enumerate() {
        by_scene.entry(e.scene).or_default().push(i);
    }
    by_scene
        .into_values()
        .flat_map(|v| v.chunks(batch_size).map(<[usize]>::to_vec).collect::<Vec<_>>())
        .collect()
}

/// Trains `net` in place. Deterministic in `seed`.
pub fn train(
    net: &mut SitNet,
    scenes: &[SceneInput],
    episodes: &[EpisodeInput],
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batches = scene_batches(episodes, cfg.batch_size);
    let total_steps = (batches.len() * cfg.epochs).max(1);
    let mut opt = AdamW::new(
        &net.params,
        AdamWConfig {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        },
    );
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        batches.shuffle(&mut rng);
        let mut sums = LossParts::default();
        for batch in &batches {
            let frac = step as f64 / total_steps as f64;
            opt.set_lr(cfg.lr * (1.0 - (1.0 - cfg.lr_final_fraction) * frac));
            let pe_source = if rng.random_bool(cfg.teacher_forcing) {
                PeSource::Target
            } else {
                PeSource::Estimate
            };
            let eps: Vec<&EpisodeInput> = batch.iter().map(|&i| &episodes[i]).collect();
            let scene = &scenes[eps[0].scene];
            let (g, loss, parts) = batch_loss(net, &net.params, scene, &eps, pe_source, cfg)?;
            let grads = g.backward(loss, &net.params)?;
            opt.step(&mut net.params, &grads);
            sums.situation += parts.situation;
            sums.qa += parts.qa;
            sums.total += parts.total;
            step += 1;
        }
        let n = batches.len().max(1) as f64;
        let log = EpochLog {
            epoch,
            steps: batches.len(),
            situation_loss: sums.situation / n,
            qa_loss: sums.qa / n,
            total_loss: sums.total / n,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelHeader {
    format: String,
    mode: Mode,
    feature_dim: usize,
    config: ModelConfig,
    vocab: Vocabulary,
    answers: AnswerVocab,
}

const MODEL_FORMAT: &str = "situ3d-model 1";
pub const MODEL_HEADER_FILE: &str = "model.json";
pub const MODEL_WEIGHTS_STEM: &str = "weights";

impl SitNet {
    /// Writes `model.json` plus a tinynn checkpoint into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), ModelError> {
        std::fs::create_dir_all(dir)?;
        let header = ModelHeader {
            format: MODEL_FORMAT.to_string(),
            mode: self.mode,
            feature_dim: self.feature_dim(),
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            answers: self.answers.clone(),
        };
        let json = serde_json::to_vec_pretty(&header).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        write_atomic(&dir.join(MODEL_HEADER_FILE), &json)?;
        self.params.save(&dir.join(MODEL_WEIGHTS_STEM), FloatType::F64)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, ModelError> {
        let bytes = std::fs::read(dir.join(MODEL_HEADER_FILE))?;
        let mut h: ModelHeader =
            serde_json::from_slice(&bytes).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        if h.format != MODEL_FORMAT {
            return Err(NnError::Checkpoint(format!("unsupported model format `{}`", h.format)).into());
        }
        h.vocab.reindex();
        let mut net = SitNet::new(h.config, h.mode, h.vocab, h.answers, h.feature_dim, 0)?;
        net.params.load(&dir.join(MODEL_WEIGHTS_STEM))?;
        Ok(net)
    }
}
