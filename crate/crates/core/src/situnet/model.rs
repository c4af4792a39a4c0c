//! The grounding and QA network: vision–situation fusion, anchor-based
//! situation head, situational positional embedding, visual re-encoding and a
//! shallow answer decoder.

use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::text::{AnswerVocab, TextEncoder, TextTokens, Vocabulary};
use crate::error::{ModelError, NnError};
use crate::geometry::{realign_frame, SituationVector};
use crate::sit_target::{decode_situation, RotationRepr};
use crate::tinynn::{
    positional_mlp, AttentionBlock, FeedForwardBlock, Graph, Linear, Matrix, Mlp, ParameterSet,
    PositionalMlp, Var,
};
use crate::voxtok::TokenSet;

/// How the pipeline is wired.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Full,
    NoSituationText,
    CorruptedSupervision,
    GtAsInputToken,
    GtAsIntermediate,
    DirectRegression,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::Full,
        Mode::NoSituationText,
        Mode::CorruptedSupervision,
        Mode::GtAsInputToken,
        Mode::GtAsIntermediate,
        Mode::DirectRegression,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::NoSituationText => "no-situation-text",
            Mode::CorruptedSupervision => "corrupted-supervision",
            Mode::GtAsInputToken => "gt-as-input-token",
            Mode::GtAsIntermediate => "gt-as-intermediate",
            Mode::DirectRegression => "direct-regression",
        }
    }

    pub fn uses_situation_text(self) -> bool {
        self != Mode::NoSituationText
    }

    /// Modes whose situation estimate is the ground truth by construction.
    pub fn situation_is_given(self) -> bool {
        matches!(self, Mode::GtAsInputToken | Mode::GtAsIntermediate)
    }

    /// Modes trained with a situation-estimation loss.
    pub fn estimates_situation(self) -> bool {
        matches!(self, Mode::Full | Mode::CorruptedSupervision | Mode::DirectRegression)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| ModelError::UnknownMode(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub pe_hidden: usize,
    pub head_hidden: usize,
    pub fusion_layers: usize,
    pub reencode_layers: usize,
    pub decoder_layers: usize,
    pub max_text_len: usize,
    /// Multiplies realigned coordinates (meters) before the situational PE.
    pub pe_scale: f64,
    pub repr: RotationRepr,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 4,
            ffn_hidden: 128,
            pe_hidden: 128,
            head_hidden: 64,
            fusion_layers: 2,
            reencode_layers: 2,
            decoder_layers: 2,
            max_text_len: 100,
            pe_scale: 0.25,
            repr: RotationRepr::SixD,
        }
    }
}

fn config_err(field: &str, msg: &str) -> ModelError {
    ModelError::Config {
        field: field.to_string(),
        msg: msg.to_string(),
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let pos = [
            ("dim", self.dim),
            ("heads", self.heads),
            ("ffn_hidden", self.ffn_hidden),
            ("pe_hidden", self.pe_hidden),
            ("head_hidden", self.head_hidden),
            ("fusion_layers", self.fusion_layers),
            ("max_text_len", self.max_text_len),
        ];
        for (field, v) in pos {
            if v == 0 || v > 4096 {
                return Err(config_err(field, "must be in 1..=4096"));
            }
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(config_err("heads", "must divide dim"));
        }
        if self.reencode_layers > 64 || self.decoder_layers > 64 || self.fusion_layers > 64 {
            return Err(config_err("layers", "at most 64 layers per stage"));
        }
        if self.decoder_layers == 0 {
            return Err(config_err("decoder_layers", "must be at least 1"));
        }
        if !(self.pe_scale > 0.0 && self.pe_scale.is_finite()) {
            return Err(config_err("pe_scale", "must be positive"));
        }
        Ok(())
    }
}

/// Self-attention, cross-attention to text, feed-forward.
#[derive(Debug, Clone)]
struct FusionLayer {
    self_attn: AttentionBlock,
    cross: AttentionBlock,
    ffn: FeedForwardBlock,
}

impl FusionLayer {
    fn new(p: &mut ParameterSet, name: &str, c: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self, NnError> {
        Ok(Self {
            self_attn: AttentionBlock::new(p, &format!("{name}.self"), c.dim, c.heads, rng)?,
            cross: AttentionBlock::new(p, &format!("{name}.cross"), c.dim, c.heads, rng)?,
            ffn: FeedForwardBlock::new(p, &format!("{name}.ffn"), c.dim, c.ffn_hidden, rng)?,
        })
    }

    fn tail(&self, g: &mut Graph, p: &ParameterSet, x: Var, text: Option<Var>) -> Result<Var, NnError> {
        let x = self.cross.forward(g, p, x, text, true, None)?;
        self.ffn.forward(g, p, x)
    }

    fn forward(&self, g: &mut Graph, p: &ParameterSet, x: Var, text: Option<Var>) -> Result<Var, NnError> {
        let x = self.self_attn.forward(g, p, x, None, false, None)?;
        self.tail(g, p, x, text)
    }
}

/// Scene tokens restricted to the real (unpadded) rows.
#[derive(Debug, Clone)]
pub struct SceneInput {
    pub id: String,
    pub tokens: TokenSet,
    /// Indices of real tokens within `tokens`.
    pub real_index: Vec<usize>,
    pub anchors: Vec<Vector3<f64>>,
    features: Matrix,
    pe_input: Matrix,
}

impl SceneInput {
    pub fn new(id: &str, tokens: TokenSet) -> Result<Self, ModelError> {
        let real_index: Vec<usize> = (0..tokens.len()).filter(|&i| tokens.real[i]).collect();
        if real_index.is_empty() {
            return Err(crate::error::TargetError::NoRealTokens.into());
        }
        let norm = tokens.normalized_anchors();
        let mut features = Matrix::zeros(real_index.len(), tokens.feature_dim);
        let mut pe_input = Matrix::zeros(real_index.len(), 3);
        for (r, &i) in real_index.iter().enumerate() {
            features.row_mut(r).copy_from_slice(tokens.feature(i));
            pe_input.row_mut(r).copy_from_slice(norm[i].as_slice());
        }
        Ok(Self {
            id: id.to_string(),
            anchors: real_index.iter().map(|&i| tokens.anchors[i]).collect(),
            real_index,
            tokens,
            features,
            pe_input,
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.anchors.len()
    }

    /// Maps `p` into the scene box `[-1, 1]³`.
    pub fn normalize(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let (lo, hi) = self.tokens.bounds;
        let mid = (lo + hi) / 2.0;
        let half = ((hi - lo) / 2.0).map(|v| v.max(1e-9));
        (p - mid).component_div(&half)
    }

    pub fn denormalize(&self, q: &Vector3<f64>) -> Vector3<f64> {
        let (lo, hi) = self.tokens.bounds;
        let mid = (lo + hi) / 2.0;
        let half = ((hi - lo) / 2.0).map(|v| v.max(1e-9));
        mid + q.component_mul(&half)
    }
}

/// One episode ready for the network.
#[derive(Debug, Clone)]
pub struct EpisodeInput {
    /// Index into the scene list this episode is used with.
    pub scene: usize,
    pub situation: TextTokens,
    pub question: TextTokens,
    pub gt: SituationVector,
    /// Situation used for supervision (differs from `gt` only under corrupted supervision).
    pub target: SituationVector,
    pub answer: Option<usize>,
}

/// Which situation feeds the situational PE.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeSource {
    /// The supervision target (teacher forcing).
    Target,
    /// The network's own estimate.
    Estimate,
}

/// Graph handles produced for one episode.
#[derive(Debug, Clone)]
pub struct EpisodeVars {
    pub situation_text: Option<Var>,
    pub fused: Var,
    /// `n × (1 + r)` anchor head output.
    pub situation_out: Option<Var>,
    /// `1 × (3 + r)` direct-regression output.
    pub regression_out: Option<Var>,
    pub estimate: SituationVector,
    pub reencoded: Option<Var>,
    pub answer_logits: Option<Var>,
}

/// Scene-level graph handles shared by every episode of a scene.
#[derive(Debug, Clone, Copy)]
pub struct SceneVars {
    pub embedded: Var,
    pub first_self: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub estimate: SituationVector,
    pub answer_logits: Vec<f64>,
}

impl Prediction {
    /// Argmax answer index (lowest index on ties).
    pub fn answer(&self) -> Option<usize> {
        crate::sit_target::peak_token(self.answer_logits.iter().copied(), &vec![true; self.answer_logits.len()])
    }
}

#[derive(Debug, Clone)]
pub struct SitNet {
    pub config: ModelConfig,
    pub mode: Mode,
    pub vocab: Vocabulary,
    pub answers: AnswerVocab,
    pub params: ParameterSet,
    feature_dim: usize,
    vis_proj: Linear,
    pe: PositionalMlp,
    text: TextEncoder,
    fusion: Vec<FusionLayer>,
    situation_head: Mlp,
    regression_head: Mlp,
    gt_token: Mlp,
    spe: PositionalMlp,
    reencode: Vec<FusionLayer>,
    decoder: Vec<FusionLayer>,
    answer_head: Mlp,
}

impl SitNet {
    pub fn new(
        config: ModelConfig,
        mode: Mode,
        vocab: Vocabulary,
        answers: AnswerVocab,
        feature_dim: usize,
        seed: u64,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        if answers.is_empty() {
            return Err(config_err("answers", "answer vocabulary is empty"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParameterSet::new();
        let c = &config;
        let r = c.repr.dim();
        let vis_proj = Linear::new(&mut p, "vis.proj", feature_dim, c.dim, &mut rng)?;
        let pe = positional_mlp(&mut p, "vis.pe", c.pe_hidden, c.dim, &mut rng)?;
        let text = TextEncoder::new(&mut p, vocab.len(), c.max_text_len, c.dim, &mut rng)?;
        let fusion = (0..c.fusion_layers)
            .map(|i| FusionLayer::new(&mut p, &format!("fusion{i}"), c, &mut rng))
            .collect::<Result<_, _>>()?;
        let situation_head = Mlp::new(&mut p, "sit_head", c.dim, c.head_hidden, 1 + r, &mut rng)?;
        let regression_head = Mlp::new(&mut p, "reg_head", c.dim, c.head_hidden, 3 + r, &mut rng)?;
        let gt_token = Mlp::new(&mut p, "gt_token", 3 + r, c.head_hidden, c.dim, &mut rng)?;
        let spe = positional_mlp(&mut p, "sit_pe", c.pe_hidden, c.dim, &mut rng)?;
        let reencode = (0..c.reencode_layers)
            .map(|i| FusionLayer::new(&mut p, &format!("reencode{i}"), c, &mut rng))
            .collect::<Result<_, _>>()?;
        let decoder = (0..c.decoder_layers)
            .map(|i| FusionLayer::new(&mut p, &format!("decoder{i}"), c, &mut rng))
            .collect::<Result<_, _>>()?;
        let answer_head = Mlp::new(&mut p, "answer_head", c.dim, c.head_hidden, answers.len(), &mut rng)?;
        Ok(Self {
            config,
            mode,
            vocab,
            answers,
            params: p,
            feature_dim,
            vis_proj,
            pe,
            text,
            fusion,
            situation_head,
            regression_head,
            gt_token,
            spe,
            reencode,
            decoder,
            answer_head,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn text_tokens(&self, text: &str, role: super::text::TextRole) -> Result<TextTokens, ModelError> {
        Ok(TextTokens::new(self.vocab.encode(text)?, self.config.max_text_len, role))
    }

    pub fn embed_text(&self, g: &mut Graph, p: &ParameterSet, t: &TextTokens) -> Result<Option<Var>, ModelError> {
        Ok(self.text.embed(g, p, t)?)
    }

    /// Token features projected to the model width plus the raw positional
    /// embedding, followed by the first fusion layer's self-attention.
    pub fn scene_vars(&self, g: &mut Graph, p: &ParameterSet, s: &SceneInput) -> Result<SceneVars, ModelError> {
        if s.features.cols() != self.feature_dim {
            return Err(NnError::ShapeMismatch(format!(
                "scene features have {} channels, model expects {}",
                s.features.cols(),
                self.feature_dim
            ))
            .into());
        }
        let f = g.constant(s.features.clone())?;
        let x = self.vis_proj.forward(g, p, f)?;
        let c = g.constant(s.pe_input.clone())?;
        let pe = self.pe.forward(g, p, c)?;
        let embedded = g.add(x, pe)?;
        let first_self = self.fusion[0].self_attn.forward(g, p, embedded, None, false, None)?;
        Ok(SceneVars { embedded, first_self })
    }

    /// Fusion of visual tokens with situation text.
    pub fn fuse(&self, g: &mut Graph, p: &ParameterSet, sv: &SceneVars, text: Option<Var>) -> Result<Var, ModelError> {
        let mut x = self.fusion[0].tail(g, p, sv.first_self, text)?;
        for layer in &self.fusion[1..] {
            x = layer.forward(g, p, x, text)?;
        }
        Ok(x)
    }

    pub fn situation_head(&self, g: &mut Graph, p: &ParameterSet, fused: Var) -> Result<Var, ModelError> {
        Ok(self.situation_head.forward(g, p, fused)?)
    }

    /// Mean-pooled fused tokens regressed to normalized position plus rotation.
    pub fn direct_regression(&self, g: &mut Graph, p: &ParameterSet, fused: Var) -> Result<Var, ModelError> {
        let n = g.shape(fused).0;
        let pooled = g.weighted_row_sum(fused, &vec![1.0 / n as f64; n])?;
        Ok(self.regression_head.forward(g, p, pooled)?)
    }

    pub fn decode_regression(&self, s: &SceneInput, out: &[f64]) -> Result<SituationVector, ModelError> {
        let pos = s.denormalize(&Vector3::new(out[0], out[1], out[2]));
        let yaw = self.config.repr.decode_yaw(&out[3..])?;
        Ok(SituationVector::from_yaw(pos, yaw))
    }

    /// Realigned anchor coordinates, scaled for the situational PE.
    pub fn situational_coords(&self, anchors: &[Vector3<f64>], s: &SituationVector) -> Matrix {
        let pts = realign_frame(anchors, s);
        let mut m = Matrix::zeros(pts.len(), 3);
        for (i, q) in pts.iter().enumerate() {
            for k in 0..3 {
                m.set(i, k, q[k] * self.config.pe_scale);
            }
        }
        m
    }

    pub fn situational_pe(
        &self,
        g: &mut Graph,
        p: &ParameterSet,
        anchors: &[Vector3<f64>],
        s: &SituationVector,
    ) -> Result<Var, ModelError> {
        let c = g.constant(self.situational_coords(anchors, s))?;
        Ok(self.spe.forward(g, p, c)?)
    }

    /// Ground-truth pose as one extra text-side token.
    fn pose_token(&self, g: &mut Graph, p: &ParameterSet, s: &SceneInput, gt: &SituationVector) -> Result<Var, ModelError> {
        let mut v = s.normalize(&gt.pos).as_slice().to_vec();
        v.extend(self.config.repr.encode(gt));
        let x = g.constant(Matrix::row_vector(&v))?;
        Ok(self.gt_token.forward(g, p, x)?)
    }

    /// Re-encodes fused tokens under the situational PE and situation text.
    pub fn reencode(
        &self,
        g: &mut Graph,
        p: &ParameterSet,
        fused: Var,
        spe: Option<Var>,
        text: Option<Var>,
    ) -> Result<Var, ModelError> {
        let mut x = match spe {
            Some(e) => g.add(fused, e)?,
            None => fused,
        };
        for layer in &self.reencode {
            x = layer.forward(g, p, x, text)?;
        }
        Ok(x)
    }

    /// Decodes answer logits from visual tokens, the question and the
    /// situation text.
    pub fn answer(
        &self,
        g: &mut Graph,
        p: &ParameterSet,
        visual: Var,
        question: Option<Var>,
        situation: Option<Var>,
    ) -> Result<Var, ModelError> {
        let q = question.ok_or(ModelError::EmptyQuestion)?;
        let nq = g.shape(q).0;
        let (mut x, n) = match situation {
            Some(s) => {
                let ns = g.shape(s).0;
                (g.concat_rows(&[q, s])?, nq + ns)
            }
            None => (q, nq),
        };
        for layer in &self.decoder {
            x = layer.self_attn.forward(g, p, x, None, false, None)?;
            x = layer.cross.forward(g, p, x, Some(visual), true, None)?;
            x = layer.ffn.forward(g, p, x)?;
        }
        let w: Vec<f64> = (0..n).map(|i| if i < nq { 1.0 / nq as f64 } else { 0.0 }).collect();
        let pooled = g.weighted_row_sum(x, &w)?;
        Ok(self.answer_head.forward(g, p, pooled)?)
    }

    /// Builds the whole per-episode pipeline for the configured mode.
    #[allow(clippy::too_many_arguments)]
    pub fn episode(
        &self,
        g: &mut Graph,
        p: &ParameterSet,
        sv: &SceneVars,
        s: &SceneInput,
        e: &EpisodeInput,
        pe_source: PeSource,
        with_answer: bool,
    ) -> Result<EpisodeVars, ModelError> {
        let mode = self.mode;
        let mut text = if mode.uses_situation_text() {
            self.text.embed(g, p, &e.situation)?
        } else {
            None
        };
        if mode == Mode::GtAsInputToken {
            let tok = self.pose_token(g, p, s, &e.gt)?;
            text = Some(match text {
                Some(t) => g.concat_rows(&[t, tok])?,
                None => tok,
            });
        }
        let fused = self.fuse(g, p, sv, text)?;
        let (mut situation_out, mut regression_out) = (None, None);
        let estimate = match mode {
            Mode::GtAsInputToken | Mode::GtAsIntermediate => e.gt,
            Mode::DirectRegression => {
                let out = self.direct_regression(g, p, fused)?;
                regression_out = Some(out);
                self.decode_regression(s, g.value(out).row(0))?
            }
            Mode::Full | Mode::CorruptedSupervision | Mode::NoSituationText => {
                let out = self.situation_head(g, p, fused)?;
                situation_out = Some(out);
                let real = vec![true; s.num_tokens()];
                decode_situation(g.value(out), &s.anchors, &real, self.config.repr)?
            }
        };
        let (mut reencoded, mut answer_logits) = (None, None);
        if with_answer {
            let pe_situation = match mode {
                Mode::NoSituationText | Mode::GtAsInputToken => None,
                Mode::GtAsIntermediate => Some(&e.gt),
                _ => Some(match pe_source {
                    PeSource::Target => &e.target,
                    PeSource::Estimate => &estimate,
                }),
            };
            let spe = match pe_situation {
                Some(sit) => Some(self.situational_pe(g, p, &s.anchors, sit)?),
                None => None,
            };
            let y = self.reencode(g, p, fused, spe, text)?;
            let q = self.text.embed(g, p, &e.question)?;
            answer_logits = Some(self.answer(g, p, y, q, text)?);
            reencoded = Some(y);
        }
        Ok(EpisodeVars {
            situation_text: text,
            fused,
            situation_out,
            regression_out,
            estimate,
            reencoded,
            answer_logits,
        })
    }

    /// Inference for a group of episodes sharing one scene.
    pub fn predict(&self, s: &SceneInput, episodes: &[&EpisodeInput]) -> Result<Vec<Prediction>, ModelError> {
        let mut g = Graph::new();
        let sv = self.scene_vars(&mut g, &self.params, s)?;
        let mut out = Vec::with_capacity(episodes.len());
        for e in episodes {
            let v = self.episode(&mut g, &self.params, &sv, s, e, PeSource::Estimate, true)?;
            let logits = v.answer_logits.expect("answer requested");
            out.push(Prediction {
                estimate: v.estimate,
                answer_logits: g.value(logits).row(0).to_vec(),
            });
        }
        Ok(out)
    }

    /// Per-token activation (L2 norm) before and after re-encoding, in the
    /// order of `s.real_index`.
    pub fn token_activations(&self, s: &SceneInput, e: &EpisodeInput) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
        let mut g = Graph::new();
        let sv = self.scene_vars(&mut g, &self.params, s)?;
        let v = self.episode(&mut g, &self.params, &sv, s, e, PeSource::Estimate, true)?;
        let norms = |m: &Matrix| (0..m.rows()).map(|i| m.row(i).iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        let before = norms(g.value(v.fused));
        let after = norms(g.value(v.reencoded.expect("answer requested")));
        Ok((before, after))
    }
}
