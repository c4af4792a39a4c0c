//! Situation-grounded visual encoder with anchor-based pose estimation and a
//! classification answer head.

mod model;
mod text;
mod train;

pub use model::{
    EpisodeInput, EpisodeVars, Mode, ModelConfig, PeSource, Prediction, SceneInput, SceneVars, SitNet,
};
pub use text::{words, AnswerVocab, TextEncoder, TextRole, TextTokens, Vocabulary};
pub use train::{
    batch_loss, corrupted_target, prepare_episodes, prepare_scenes, scene_batches, train,
    EpochLog, LossParts, Prepared, TrainConfig, MODEL_HEADER_FILE, MODEL_WEIGHTS_STEM,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::SituationVector;
    use crate::scenegen::{generate_dataset, DatasetConfig, EpisodeConfig, SceneConfig, CATEGORIES};
    use crate::sit_target::RotationRepr;
    use crate::tinynn::{grad_check, GradCheckConfig, Graph, Matrix};
    use crate::voxtok::feature_dim;
    use nalgebra::Vector3;
    use std::f64::consts::PI;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            dim: 8,
            heads: 2,
            ffn_hidden: 8,
            pe_hidden: 6,
            head_hidden: 8,
            fusion_layers: 2,
            reencode_layers: 1,
            decoder_layers: 1,
            max_text_len: 100,
            pe_scale: 0.25,
            repr: RotationRepr::SixD,
        }
    }

    struct Fixture {
        scenes: Vec<SceneInput>,
        episodes: Vec<EpisodeInput>,
        answers: AnswerVocab,
    }

    fn fixture(n_tokens: usize) -> Fixture {
        let ds = generate_dataset(&DatasetConfig {
            seed: 4,
            n_scenes: 2,
            episodes_per_scene: 3,
            scene: SceneConfig {
                point_density: 30.0,
                ..Default::default()
            },
            episode: EpisodeConfig::default(),
        })
        .unwrap();
        let answers = AnswerVocab::from_answers(ds.episodes.iter().map(|e| e.answer.as_str()));
        let scenes = prepare_scenes(&ds, 1.0, n_tokens).unwrap();
        let idx: Vec<usize> = (0..ds.episodes.len()).collect();
        let (episodes, _) =
            prepare_episodes(&ds, &idx, &scenes, &Vocabulary::standard(), &answers, 100, None).unwrap();
        Fixture {
            scenes,
            episodes,
            answers,
        }
    }

    fn net(mode: Mode, f: &Fixture) -> SitNet {
        SitNet::new(
            tiny_config(),
            mode,
            Vocabulary::standard(),
            f.answers.clone(),
            feature_dim(CATEGORIES.len()),
            9,
        )
        .unwrap()
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert!(matches!("bogus".parse::<Mode>(), Err(crate::error::ModelError::UnknownMode(_))));
    }

    #[test]
    fn end_to_end_gradients_every_mode() {
        let f = fixture(10);
        let cfg = TrainConfig {
            sigma_cells: 1.0,
            enlarge: 1.0,
            ..Default::default()
        };
        for mode in Mode::ALL {
            let n = net(mode, &f);
            let eps: Vec<&EpisodeInput> = f.episodes.iter().filter(|e| e.scene == 0).collect();
            let scene = &f.scenes[0];
            let mut params = n.params.clone();
            let report = grad_check(
                &mut params,
                |p| {
                    batch_loss(&n, p, scene, &eps, PeSource::Target, &cfg)
                        .map(|(g, l, _)| (g, l))
                        .map_err(|e| crate::error::NnError::ShapeMismatch(e.to_string()))
                },
                &GradCheckConfig {
                    max_entries: 4,
                    ..Default::default()
                },
            )
            .unwrap();
            let worst = report.worst().unwrap();
            assert!(
                report.passed(),
                "{mode}: {} rel err {:.3e}",
                worst.name,
                worst.max_rel_error
            );
        }
    }

    #[test]
    fn outputs_have_contract_shapes_and_are_deterministic() {
        let f = fixture(12);
        let n = net(Mode::Full, &f);
        let s = &f.scenes[0];
        let eps: Vec<&EpisodeInput> = f.episodes.iter().filter(|e| e.scene == 0).collect();
        let a = n.predict(s, &eps).unwrap();
        let b = n.predict(s, &eps).unwrap();
        assert_eq!(a, b);
        for p in &a {
            assert_eq!(p.answer_logits.len(), f.answers.len());
            assert!(p.answer_logits.iter().all(|v| v.is_finite()));
            assert!(s.anchors.contains(&p.estimate.pos));
        }
        let mut g = Graph::new();
        let sv = n.scene_vars(&mut g, &n.params, s).unwrap();
        let fused = n.fuse(&mut g, &n.params, &sv, None).unwrap();
        assert_eq!(g.shape(fused), (s.num_tokens(), 8));
        let y = n.reencode(&mut g, &n.params, fused, None, None).unwrap();
        assert_eq!(g.shape(y), (s.num_tokens(), 8));
        assert!(matches!(
            n.answer(&mut g, &n.params, y, None, None),
            Err(crate::error::ModelError::EmptyQuestion)
        ));
    }

    #[test]
    fn situational_pe_properties() {
        let f = fixture(12);
        let n = net(Mode::Full, &f);
        let s = &f.scenes[0];
        let id = SituationVector::identity();
        let raw = n.situational_coords(&s.anchors, &id);
        for (i, a) in s.anchors.iter().enumerate() {
            for k in 0..3 {
                assert!((raw.get(i, k) - a[k] * 0.25).abs() < 1e-12);
            }
        }
        let at = Vector3::new(1.0, 2.0, 0.0);
        let s0 = SituationVector::from_yaw(at, 0.3);
        let s1 = SituationVector::from_yaw(at, 0.3 + PI);
        let c0 = n.situational_coords(&s.anchors, &s0);
        let c1 = n.situational_coords(&s.anchors, &s1);
        for i in 0..c0.rows() {
            assert!((c0.get(i, 0) + c1.get(i, 0)).abs() < 1e-9);
            assert!((c0.get(i, 1) + c1.get(i, 1)).abs() < 1e-9);
            assert!((c0.get(i, 2) - c1.get(i, 2)).abs() < 1e-12);
        }
        let mut g = Graph::new();
        let e0 = n.situational_pe(&mut g, &n.params, &s.anchors, &s0).unwrap();
        let e1 = n.situational_pe(&mut g, &n.params, &s.anchors, &s1).unwrap();
        assert_ne!(g.value(e0), g.value(e1));

        // rigid motion of scene and situation leaves PE inputs unchanged
        let (yaw, t) = (1.1, Vector3::new(-3.0, 4.0, 0.0));
        let moved: Vec<_> = s.anchors.iter().map(|a| crate::geometry::rot_z(yaw) * a + t).collect();
        let cm = n.situational_coords(&moved, &s0.transformed(yaw, t));
        for (a, b) in cm.data().iter().zip(c0.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn padded_text_matches_sliced_text() {
        let f = fixture(12);
        let n = net(Mode::Full, &f);
        let e = &f.episodes[0];
        let mut g = Graph::new();
        let sv = n.scene_vars(&mut g, &n.params, &f.scenes[0]).unwrap();
        let sliced = n.embed_text(&mut g, &n.params, &e.situation).unwrap().unwrap();
        let mut p2 = crate::tinynn::ParameterSet::new();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
        let attn = crate::tinynn::MultiHeadAttention::new(&mut p2, "a", 8, 2, &mut rng).unwrap();
        let enc = TextEncoder {
            word: n.params.id("text.word").unwrap(),
            position: n.params.id("text.position").unwrap(),
            role: n.params.id("text.role").unwrap(),
            max_len: 100,
            dim: 8,
        };
        let padded = enc.embed_padded(&mut g, &n.params, &e.situation).unwrap();
        let q = g.value(sv.embedded).clone();
        let mut g2 = Graph::new();
        let qv = g2.constant(q).unwrap();
        let kp = g2.constant(g.value(padded).clone()).unwrap();
        let ks = g2.constant(g.value(sliced).clone()).unwrap();
        let a = attn.forward(&mut g2, &p2, qv, Some(kp), Some(&e.situation.mask)).unwrap();
        let b = attn.forward(&mut g2, &p2, qv, Some(ks), None).unwrap();
        for (x, y) in g2.value(a).data().iter().zip(g2.value(b).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn given_situation_modes_report_ground_truth() {
        let f = fixture(12);
        for mode in [Mode::GtAsIntermediate, Mode::GtAsInputToken] {
            let n = net(mode, &f);
            let eps: Vec<&EpisodeInput> = f.episodes.iter().filter(|e| e.scene == 1).collect();
            for (p, e) in n.predict(&f.scenes[1], &eps).unwrap().iter().zip(&eps) {
                assert_eq!(p.estimate, e.gt);
            }
        }
    }

    #[test]
    fn direct_regression_pool_is_size_independent() {
        let f = fixture(12);
        let n = net(Mode::DirectRegression, &f);
        let mut g = Graph::new();
        let row = Matrix::row_vector(&[0.3; 8]);
        let small = g.constant(Matrix::from_rows(&vec![row.data().to_vec(); 3])).unwrap();
        let large = g.constant(Matrix::from_rows(&vec![row.data().to_vec(); 17])).unwrap();
        let a = n.direct_regression(&mut g, &n.params, small).unwrap();
        let b = n.direct_regression(&mut g, &n.params, large).unwrap();
        for (x, y) in g.value(a).data().iter().zip(g.value(b).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn corrupted_targets_are_uniform() {
        let f = fixture(12);
        let s = &f.scenes[0];
        let (lo, hi) = s.tokens.bounds;
        let gt = SituationVector::identity();
        let n = 4000;
        let (mut left, mut front_yaw) = (0usize, 0usize);
        for i in 0..n {
            let t = corrupted_target(s, &gt, 3, i);
            assert!(t.pos.x >= lo.x && t.pos.x <= hi.x && t.pos.y >= lo.y && t.pos.y <= hi.y);
            if t.pos.x < (lo.x + hi.x) / 2.0 {
                left += 1;
            }
            if t.yaw().abs() < PI / 2.0 {
                front_yaw += 1;
            }
        }
        // binomial(4000, 1/2): 3 sd is about 95
        for c in [left, front_yaw] {
            assert!((c as f64 - 2000.0).abs() < 95.0, "{c}");
        }
        assert_eq!(corrupted_target(s, &gt, 3, 7), corrupted_target(s, &gt, 3, 7));
    }

    #[test]
    fn training_reduces_loss_and_checkpoint_round_trips() {
        let f = fixture(12);
        let mut n = net(Mode::Full, &f);
        let cfg = TrainConfig {
            epochs: 15,
            batch_size: 3,
            lr: 3e-3,
            sigma_cells: 1.0,
            enlarge: 1.0,
            ..Default::default()
        };
        let logs = train(&mut n, &f.scenes, &f.episodes, &cfg, 1, |_| {}).unwrap();
        assert!(logs.last().unwrap().total_loss < logs[0].total_loss);

        let dir = std::env::temp_dir().join(format!("situ3d-model-{}", std::process::id()));
        n.save(&dir).unwrap();
        let back = SitNet::load(&dir).unwrap();
        let eps: Vec<&EpisodeInput> = f.episodes.iter().filter(|e| e.scene == 0).collect();
        assert_eq!(back.predict(&f.scenes[0], &eps).unwrap(), n.predict(&f.scenes[0], &eps).unwrap());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
