//! Anchor-based situation targets, losses and decoding.
//!
//! Every visual token is a candidate position. The head predicts one logit
//! (position likelihood) plus a rotation encoding per token; the soft target
//! is a max-normalized Gaussian of the horizontal distance to the true
//! position.

use std::str::FromStr;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, NnError, TargetError};
use crate::geometry::{planar_distance, rot6d_to_matrix, yaw_of, Quaternion, Rot6D, SituationVector};
use crate::tinynn::{Graph, Matrix, Var};

/// How rotations are encoded in the head output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RotationRepr {
    #[default]
    SixD,
    Quaternion,
    SinCos,
}

impl RotationRepr {
    pub fn dim(self) -> usize {
        match self {
            RotationRepr::SixD => 6,
            RotationRepr::Quaternion => 4,
            RotationRepr::SinCos => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RotationRepr::SixD => "six-d",
            RotationRepr::Quaternion => "quaternion",
            RotationRepr::SinCos => "sin-cos",
        }
    }

    pub fn encode(self, s: &SituationVector) -> Vec<f64> {
        match self {
            RotationRepr::SixD => s.rot6d().0.to_vec(),
            RotationRepr::Quaternion => {
                let q = s.quaternion();
                vec![q.w, q.x, q.y, q.z]
            }
            RotationRepr::SinCos => {
                let (sn, c) = s.yaw().sin_cos();
                vec![sn, c]
            }
        }
    }

    /// Recovers a heading from raw head outputs.
    pub fn decode_yaw(self, v: &[f64]) -> Result<f64, TargetError> {
        if v.len() != self.dim() {
            return Err(TargetError::ShapeMismatch(format!(
                "{} rotation needs {} values, got {}",
                self.name(),
                self.dim(),
                v.len()
            )));
        }
        Ok(match self {
            RotationRepr::SixD => {
                let r = rot6d_to_matrix(&Rot6D(v.try_into().expect("length checked")))?;
                yaw_of(&r)?
            }
            RotationRepr::Quaternion => {
                let q = Quaternion::new(v[0], v[1], v[2], v[3])?;
                yaw_of(&q.to_matrix())?
            }
            RotationRepr::SinCos => {
                if v[0].hypot(v[1]) < 1e-9 {
                    return Err(crate::error::GeometryError::DegenerateInput(
                        "sin/cos pair has zero norm".into(),
                    )
                    .into());
                }
                v[0].atan2(v[1])
            }
        })
    }
}

impl FromStr for RotationRepr {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "six-d" | "6d" => Ok(RotationRepr::SixD),
            "quaternion" => Ok(RotationRepr::Quaternion),
            "sin-cos" => Ok(RotationRepr::SinCos),
            other => Err(ModelError::UnknownRotationRepr(other.to_string())),
        }
    }
}

/// Which tokens receive rotation supervision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RotSupervision {
    /// Tokens whose soft likelihood is at least 0.5.
    #[default]
    NearPeak,
    AllTokens,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LikelihoodLoss {
    #[default]
    Bce,
    Focal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorTargets {
    /// Soft position likelihood per token; 0 on padding.
    pub likelihood: Vec<f64>,
    /// `N_v × repr.dim()` rotation targets (same row for every token).
    pub rot: Matrix,
    pub rot_mask: Vec<bool>,
    pub real: Vec<bool>,
    pub repr: RotationRepr,
}

/// Max-normalized Gaussian soft targets with effective width
/// `sigma · enlarge`, measured in the ground plane.
pub fn gaussian_targets(
    anchors: &[Vector3<f64>],
    real: &[bool],
    gt: &SituationVector,
    sigma: f64,
    enlarge: f64,
    repr: RotationRepr,
    supervision: RotSupervision,
) -> Result<AnchorTargets, TargetError> {
    if !(sigma > 0.0 && enlarge >= 1.0 && sigma.is_finite() && enlarge.is_finite()) {
        return Err(TargetError::BadKernel { sigma, enlarge });
    }
    if anchors.len() != real.len() {
        return Err(TargetError::ShapeMismatch(format!(
            "{} anchors vs {} mask entries",
            anchors.len(),
            real.len()
        )));
    }
    let s2 = 2.0 * (sigma * enlarge).powi(2);
    // log-domain so far-away peaks do not underflow before normalization
    let logp: Vec<f64> = anchors
        .iter()
        .map(|a| -planar_distance(a, &gt.pos).powi(2) / s2)
        .collect();
    let peak = logp
        .iter()
        .zip(real)
        .filter(|(_, &r)| r)
        .map(|(l, _)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    if peak == f64::NEG_INFINITY {
        return Err(TargetError::NoRealTokens);
    }
    let likelihood: Vec<f64> = logp
        .iter()
        .zip(real)
        .map(|(l, &r)| if r { (l - peak).exp() } else { 0.0 })
        .collect();
    let rot_mask = likelihood
        .iter()
        .zip(real)
        .map(|(&p, &r)| {
            r && match supervision {
                RotSupervision::NearPeak => p >= 0.5,
                RotSupervision::AllTokens => true,
            }
        })
        .collect();
    let enc = repr.encode(gt);
    let mut rot = Matrix::zeros(anchors.len(), enc.len());
    for i in 0..anchors.len() {
        rot.row_mut(i).copy_from_slice(&enc);
    }
    Ok(AnchorTargets {
        likelihood,
        rot,
        rot_mask,
        real: real.to_vec(),
        repr,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SituationLossConfig {
    pub lambda_rot: f64,
    pub likelihood: LikelihoodLoss,
    pub focal_gamma: f64,
}

impl Default for SituationLossConfig {
    fn default() -> Self {
        Self {
            lambda_rot: 1.0,
            likelihood: LikelihoodLoss::Bce,
            focal_gamma: 2.0,
        }
    }
}

/// Likelihood loss (mean over real tokens) plus `λ_rot` times the L1
/// rotation error (mean over supervised tokens). `pred` is `N_v × (1 + r)`.
pub fn situation_loss(
    g: &mut Graph,
    pred: Var,
    targets: &AnchorTargets,
    config: &SituationLossConfig,
) -> Result<Var, NnError> {
    let (n, c) = g.shape(pred);
    let r = targets.repr.dim();
    if n != targets.likelihood.len() || c != 1 + r {
        return Err(NnError::ShapeMismatch(format!(
            "situation head output {n}x{c}, targets need {}x{}",
            targets.likelihood.len(),
            1 + r
        )));
    }
    let n_real = targets.real.iter().filter(|&&b| b).count().max(1) as f64;
    let w: Vec<f64> = targets
        .real
        .iter()
        .map(|&b| if b { 1.0 / n_real } else { 0.0 })
        .collect();
    let logits = g.slice_cols(pred, 0, 1)?;
    let like = match config.likelihood {
        LikelihoodLoss::Bce => g.bce_with_logits(logits, &targets.likelihood, &w)?,
        LikelihoodLoss::Focal => {
            g.focal_with_logits(logits, &targets.likelihood, &w, config.focal_gamma)?
        }
    };
    let n_rot = targets.rot_mask.iter().filter(|&&b| b).count();
    if n_rot == 0 || config.lambda_rot == 0.0 {
        return Ok(like);
    }
    let rw: Vec<f64> = targets
        .rot_mask
        .iter()
        .map(|&b| if b { config.lambda_rot / n_rot as f64 } else { 0.0 })
        .collect();
    let rot = g.slice_cols(pred, 1, r)?;
    let l1 = g.l1(rot, &targets.rot, &rw)?;
    g.add(like, l1)
}

/// Index of the real token with the largest likelihood logit (lowest index on ties).
pub fn peak_token(logits: impl Iterator<Item = f64>, real: &[bool]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, (z, &r)) in logits.zip(real).enumerate() {
        if r && best.is_none_or(|(_, b)| z > b) {
            best = Some((i, z));
        }
    }
    best.map(|(i, _)| i)
}

/// Picks the peak-likelihood token, takes its anchor as position and decodes
/// its rotation channels into a ground-parallel heading.
pub fn decode_situation(
    pred: &Matrix,
    anchors: &[Vector3<f64>],
    real: &[bool],
    repr: RotationRepr,
) -> Result<SituationVector, TargetError> {
    if pred.rows() != anchors.len() || pred.cols() != 1 + repr.dim() || real.len() != anchors.len() {
        return Err(TargetError::ShapeMismatch(format!(
            "prediction {:?} for {} anchors",
            pred.shape(),
            anchors.len()
        )));
    }
    let best = peak_token((0..pred.rows()).map(|i| pred.get(i, 0)), real)
        .ok_or(TargetError::NoRealTokens)?;
    let yaw = repr.decode_yaw(&pred.row(best)[1..])?;
    Ok(SituationVector::from_yaw(anchors[best], yaw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinynn::{grad_check, GradCheckConfig, ParamKind, ParameterSet};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn grid_anchors(n: usize, pitch: f64) -> Vec<Vector3<f64>> {
        (0..n * n)
            .map(|k| {
                Vector3::new(
                    (k / n) as f64 * pitch + pitch / 2.0,
                    (k % n) as f64 * pitch + pitch / 2.0,
                    0.3,
                )
            })
            .collect()
    }

    #[test]
    fn peak_is_one_at_gt() {
        let anchors = vec![Vector3::new(1.0, 1.0, 0.0), Vector3::new(3.0, 1.0, 0.0)];
        let gt = SituationVector::from_yaw(Vector3::new(1.0, 1.0, 0.0), 0.2);
        let t = gaussian_targets(&anchors, &[true, true], &gt, 0.5, 2.0, RotationRepr::SixD, RotSupervision::NearPeak)
            .unwrap();
        assert_eq!(t.likelihood[0], 1.0);
        assert!(t.likelihood[1] < 1.0);
    }

    #[test]
    fn one_sigma_gives_exp_minus_half() {
        let (sigma, enlarge) = (0.3, 2.0);
        let sp = sigma * enlarge;
        let anchors = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(sp, 0.0, 5.0),
            Vector3::new(0.0, -3.0 * sp, 0.0),
        ];
        let gt = SituationVector::identity();
        let t = gaussian_targets(&anchors, &[true; 3], &gt, sigma, enlarge, RotationRepr::SixD, RotSupervision::NearPeak)
            .unwrap();
        assert!((t.likelihood[1] - (-0.5f64).exp()).abs() < 1e-12);
        assert!((t.likelihood[1] - 0.6065).abs() < 1e-4);
        assert_eq!(t.rot_mask, vec![true, true, false]);
    }

    #[test]
    fn padding_gets_zero_and_errors() {
        let anchors = vec![Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0)];
        let gt = SituationVector::identity();
        let t = gaussian_targets(&anchors, &[false, true], &gt, 1.0, 1.0, RotationRepr::SixD, RotSupervision::AllTokens)
            .unwrap();
        assert_eq!(t.likelihood, vec![0.0, 1.0]);
        assert_eq!(t.rot_mask, vec![false, true]);
        assert_eq!(
            gaussian_targets(&anchors, &[false, false], &gt, 1.0, 1.0, RotationRepr::SixD, RotSupervision::NearPeak),
            Err(TargetError::NoRealTokens)
        );
        assert!(matches!(
            gaussian_targets(&anchors, &[true, true], &gt, 0.0, 1.0, RotationRepr::SixD, RotSupervision::NearPeak),
            Err(TargetError::BadKernel { .. })
        ));
    }

    #[test]
    fn argmax_matches_nearest_anchor_and_enlarge_keeps_peak() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let n = rng.random_range(2..40);
            let anchors: Vec<_> = (0..n)
                .map(|_| Vector3::new(rng.random_range(0.0..5.0), rng.random_range(0.0..5.0), rng.random_range(0.0..2.0)))
                .collect();
            let real: Vec<bool> = (0..n).map(|i| i == 0 || rng.random_bool(0.8)).collect();
            let gt = SituationVector::from_yaw(
                Vector3::new(rng.random_range(0.0..5.0), rng.random_range(0.0..5.0), 0.0),
                rng.random_range(-PI..PI),
            );
            // brute-force nearest real anchor in the plane
            let nearest = (0..n)
                .filter(|&i| real[i])
                .min_by(|&a, &b| {
                    planar_distance(&anchors[a], &gt.pos).total_cmp(&planar_distance(&anchors[b], &gt.pos))
                })
                .unwrap();
            for enlarge in [1.0, 2.0, 5.0] {
                let t = gaussian_targets(&anchors, &real, &gt, 0.2, enlarge, RotationRepr::SixD, RotSupervision::NearPeak)
                    .unwrap();
                let arg = peak_token(t.likelihood.iter().copied(), &real).unwrap();
                assert_eq!(arg, nearest);
                assert_eq!(t.likelihood[arg], 1.0);
                // monotone in distance
                for i in 0..n {
                    for j in 0..n {
                        if real[i] && real[j] && planar_distance(&anchors[i], &gt.pos) < planar_distance(&anchors[j], &gt.pos) {
                            assert!(t.likelihood[i] >= t.likelihood[j]);
                        }
                    }
                }
            }
        }
    }

    fn pred_var(g: &mut Graph, m: Matrix) -> Var {
        g.constant(m).unwrap()
    }

    #[test]
    fn loss_at_optimum_is_target_entropy() {
        let like = [0.9, 0.3, 0.6, 0.05];
        let rot_row = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let mut rot = Matrix::zeros(4, 6);
        let mut pred = Matrix::zeros(4, 7);
        for i in 0..4 {
            rot.row_mut(i).copy_from_slice(&rot_row);
            pred.set(i, 0, (like[i] / (1.0 - like[i]) as f64).ln());
            pred.row_mut(i)[1..].copy_from_slice(&rot_row);
        }
        let t = AnchorTargets {
            likelihood: like.to_vec(),
            rot,
            rot_mask: vec![true, false, true, false],
            real: vec![true; 4],
            repr: RotationRepr::SixD,
        };
        let mut g = Graph::new();
        let p = pred_var(&mut g, pred);
        let l = situation_loss(&mut g, p, &t, &SituationLossConfig::default()).unwrap();
        let entropy: f64 = like
            .iter()
            .map(|&q| -(q * q.ln() + (1.0 - q) * (1.0 - q).ln()))
            .sum::<f64>()
            / 4.0;
        assert!((g.scalar(l) - entropy).abs() < 1e-12);
    }

    #[test]
    fn zero_prediction_hand_computed() {
        // 3 real tokens + 1 pad, gt yaw 0 so the 6D target is (1,0,0,0,1,0)
        let anchors = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(0.1, 0.0, 0.0),
            Vector3::new(4.0, 0.0, 0.0),
            Vector3::zeros(),
        ];
        let t = gaussian_targets(
            &anchors,
            &[true, true, true, false],
            &SituationVector::identity(),
            0.2,
            1.0,
            RotationRepr::SixD,
            RotSupervision::NearPeak,
        )
        .unwrap();
        let mut g = Graph::new();
        let p = pred_var(&mut g, Matrix::zeros(4, 7));
        let cfg = SituationLossConfig {
            lambda_rot: 0.5,
            ..Default::default()
        };
        let l = situation_loss(&mut g, p, &t, &cfg).unwrap();
        // BCE(σ(0), t) = ln 2 whatever t is; L1 per supervised token = 2
        let want = 2f64.ln() + 0.5 * 2.0;
        assert!((g.scalar(l) - want).abs() < 1e-12);
        let p2 = pred_var(&mut g, Matrix::zeros(4, 5));
        assert!(matches!(
            situation_loss(&mut g, p2, &t, &cfg),
            Err(NnError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let anchors = grid_anchors(4, 0.5);
        let mut real = vec![true; 16];
        real[15] = false;
        let gt = SituationVector::from_yaw(Vector3::new(0.9, 1.1, 0.0), 0.7);
        for (repr, loss) in [
            (RotationRepr::SixD, LikelihoodLoss::Bce),
            (RotationRepr::Quaternion, LikelihoodLoss::Focal),
            (RotationRepr::SinCos, LikelihoodLoss::Bce),
        ] {
            let t = gaussian_targets(&anchors, &real, &gt, 0.5, 2.0, repr, RotSupervision::NearPeak).unwrap();
            let mut params = ParameterSet::new();
            let data = (0..16 * (1 + repr.dim())).map(|_| rng.random_range(-2.0..2.0)).collect();
            let id = params
                .add("pred", ParamKind::Weight, Matrix::from_vec(16, 1 + repr.dim(), data))
                .unwrap();
            let cfg = SituationLossConfig {
                lambda_rot: 1.0,
                likelihood: loss,
                focal_gamma: 2.0,
            };
            let report = grad_check(
                &mut params,
                |p| {
                    let mut g = Graph::new();
                    let v = g.param(p, id);
                    let l = situation_loss(&mut g, v, &t, &cfg)?;
                    Ok((g, l))
                },
                &GradCheckConfig {
                    max_entries: 200,
                    ..Default::default()
                },
            )
            .unwrap();
            assert!(report.passed(), "{repr:?}: {:?}", report.worst());
        }
    }

    #[test]
    fn rotation_loss_minimized_at_target() {
        let anchors = grid_anchors(3, 1.0);
        let gt = SituationVector::from_yaw(Vector3::new(1.5, 1.5, 0.0), -1.2);
        let t = gaussian_targets(&anchors, &[true; 9], &gt, 1.0, 1.0, RotationRepr::SixD, RotSupervision::AllTokens).unwrap();
        let eval = |offset: f64| {
            let mut pred = Matrix::zeros(9, 7);
            for i in 0..9 {
                for j in 0..6 {
                    pred.set(i, j + 1, t.rot.get(i, j) + offset);
                }
            }
            let mut g = Graph::new();
            let p = g.constant(pred).unwrap();
            let l = situation_loss(&mut g, p, &t, &SituationLossConfig::default()).unwrap();
            g.scalar(l)
        };
        let at = eval(0.0);
        for off in [-0.1, -1e-3, 1e-3, 0.2] {
            assert!(eval(off) > at);
        }
    }

    #[test]
    fn decode_peak_token() {
        let anchors = grid_anchors(2, 1.0);
        let mut pred = Matrix::filled(4, 7, 0.0);
        for i in 0..4 {
            pred.set(i, 0, -10.0);
            pred.row_mut(i)[1..].copy_from_slice(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        }
        pred.set(2, 0, 10.0);
        let s = decode_situation(&pred, &anchors, &[true; 4], RotationRepr::SixD).unwrap();
        assert_eq!(s.pos, anchors[2]);
        // padding never wins
        let s = decode_situation(&pred, &anchors, &[true, true, false, true], RotationRepr::SixD).unwrap();
        assert_eq!(s.pos, anchors[0]);
        assert!(decode_situation(&pred, &anchors, &[false; 4], RotationRepr::SixD).is_err());
    }

    #[test]
    fn inject_targets_and_decode() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let pitch = 0.5;
        let anchors = grid_anchors(8, pitch);
        for repr in [RotationRepr::SixD, RotationRepr::Quaternion, RotationRepr::SinCos] {
            for _ in 0..100 {
                let gt = SituationVector::from_yaw(
                    Vector3::new(rng.random_range(0.0..4.0), rng.random_range(0.0..4.0), 0.0),
                    rng.random_range(-PI..PI),
                );
                let t = gaussian_targets(&anchors, &[true; 64], &gt, pitch, 2.0, repr, RotSupervision::NearPeak).unwrap();
                let mut pred = Matrix::zeros(64, 1 + repr.dim());
                for i in 0..64 {
                    pred.set(i, 0, t.likelihood[i]);
                    pred.row_mut(i)[1..].copy_from_slice(t.rot.row(i));
                }
                let s = decode_situation(&pred, &anchors, &[true; 64], repr).unwrap();
                assert!(planar_distance(&s.pos, &gt.pos) <= pitch * 2f64.sqrt() / 2.0 + 1e-12);
                assert!(crate::geometry::angular_error_deg(s.yaw(), gt.yaw()).to_radians() < 1e-6);
            }
        }
    }

    #[test]
    fn repr_names_parse() {
        for r in [RotationRepr::SixD, RotationRepr::Quaternion, RotationRepr::SinCos] {
            assert_eq!(r.name().parse::<RotationRepr>().unwrap(), r);
        }
        assert!("euler".parse::<RotationRepr>().is_err());
    }
}
