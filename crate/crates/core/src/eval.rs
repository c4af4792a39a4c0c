//! Situation and answer metrics, the random-situation baseline, and the
//! train/evaluate/ablate pipeline.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{EvalError, ModelError};
use crate::geometry::{angular_error_deg, planar_distance, SituationVector};
use crate::scenegen::{Dataset, QuestionFamily, QuestionType};
use crate::situnet::{
    prepare_episodes, prepare_scenes, train, AnswerVocab, EpisodeInput, EpochLog, Mode, Prediction,
    SceneInput, SitNet, Vocabulary,
};
use crate::voxtok::feature_dim;

fn check_len(a: usize, b: usize) -> Result<(), EvalError> {
    if a == b {
        Ok(())
    } else {
        Err(EvalError::LengthMismatch(a, b))
    }
}

fn fraction(hits: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

/// Fraction of predictions within `threshold_m` of the ground truth in the
/// ground plane.
pub fn localization_accuracy(
    preds: &[SituationVector],
    gts: &[SituationVector],
    threshold_m: f64,
) -> Result<f64, EvalError> {
    check_len(preds.len(), gts.len())?;
    let hits = preds
        .iter()
        .zip(gts)
        .filter(|(p, g)| planar_distance(&p.pos, &g.pos) <= threshold_m)
        .count();
    Ok(fraction(hits, preds.len()))
}

/// Fraction of predictions whose heading is within `threshold_deg`.
pub fn orientation_accuracy(
    preds: &[SituationVector],
    gts: &[SituationVector],
    threshold_deg: f64,
) -> Result<f64, EvalError> {
    check_len(preds.len(), gts.len())?;
    let hits = preds
        .iter()
        .zip(gts)
        .filter(|(p, g)| angular_error_deg(p.yaw(), g.yaw()) <= threshold_deg)
        .count();
    Ok(fraction(hits, preds.len()))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: usize,
    pub count: usize,
}

impl Tally {
    pub fn fraction(&self) -> f64 {
        fraction(self.correct, self.count)
    }

    fn add(&mut self, hit: bool) {
        self.count += 1;
        self.correct += hit as usize;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmResult {
    pub overall: Tally,
    pub by_type: BTreeMap<QuestionType, Tally>,
    /// Ground-truth answers outside the answer vocabulary (counted as misses).
    pub unknown_answers: usize,
}

/// Exact match of the top answer. `gt[i] = None` marks an answer outside the
/// vocabulary, which counts as a miss.
pub fn em_at_1(
    pred: &[Option<usize>],
    gt: &[Option<usize>],
    types: &[QuestionType],
) -> Result<EmResult, EvalError> {
    check_len(pred.len(), gt.len())?;
    check_len(types.len(), gt.len())?;
    let mut r = EmResult {
        overall: Tally::default(),
        by_type: BTreeMap::new(),
        unknown_answers: 0,
    };
    for ((p, g), t) in pred.iter().zip(gt).zip(types) {
        let hit = match g {
            Some(g) => p.as_ref() == Some(g),
            None => {
                r.unknown_answers += 1;
                false
            }
        };
        r.overall.add(hit);
        r.by_type.entry(*t).or_default().add(hit);
    }
    Ok(r)
}

/// Uniform positions in the scene box (at floor height) with uniform yaw.
pub fn random_situation_baseline(
    bounds: (Vector3<f64>, Vector3<f64>),
    seed: u64,
    n: usize,
) -> Vec<SituationVector> {
    let (lo, hi) = bounds;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let pos = Vector3::new(rng.random_range(lo.x..=hi.x), rng.random_range(lo.y..=hi.y), lo.z);
            SituationVector::from_yaw(pos, rng.random_range(-std::f64::consts::PI..std::f64::consts::PI))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub episodes: usize,
    /// `(threshold in meters, fraction)`, ascending thresholds.
    pub loc_acc: Vec<(f64, f64)>,
    /// `(threshold in degrees, fraction)`, ascending thresholds.
    pub rot_acc: Vec<(f64, f64)>,
    pub em1: Tally,
    pub em1_by_type: BTreeMap<QuestionType, Tally>,
    pub em1_by_family: BTreeMap<QuestionFamily, Tally>,
    pub unknown_answers: usize,
}

pub const REPORT_HEADER: &str = "# situ3d metrics v1";

fn sorted(mut t: Vec<f64>) -> Vec<f64> {
    t.sort_by(f64::total_cmp);
    t.dedup();
    t
}

impl MetricsReport {
    #[allow(clippy::too_many_arguments)]
    pub fn compute(
        preds: &[SituationVector],
        gts: &[SituationVector],
        answers: &[Option<usize>],
        gt_answers: &[Option<usize>],
        types: &[QuestionType],
        families: &[Option<QuestionFamily>],
        loc_thresholds: &[f64],
        rot_thresholds: &[f64],
    ) -> Result<Self, EvalError> {
        check_len(answers.len(), preds.len())?;
        check_len(families.len(), types.len())?;
        let loc_acc = sorted(loc_thresholds.to_vec())
            .into_iter()
            .map(|t| localization_accuracy(preds, gts, t).map(|a| (t, a)))
            .collect::<Result<_, _>>()?;
        let rot_acc = sorted(rot_thresholds.to_vec())
            .into_iter()
            .map(|t| orientation_accuracy(preds, gts, t).map(|a| (t, a)))
            .collect::<Result<_, _>>()?;
        let em = em_at_1(answers, gt_answers, types)?;
        let mut em1_by_family: BTreeMap<QuestionFamily, Tally> = BTreeMap::new();
        for ((f, a), g) in families.iter().zip(answers).zip(gt_answers) {
            if let Some(f) = f {
                em1_by_family.entry(*f).or_default().add(g.is_some() && a == g);
            }
        }
        Ok(Self {
            episodes: preds.len(),
            loc_acc,
            rot_acc,
            em1: em.overall,
            em1_by_type: em.by_type,
            em1_by_family,
            unknown_answers: em.unknown_answers,
        })
    }

    pub fn loc_at(&self, threshold: f64) -> Option<f64> {
        self.loc_acc.iter().find(|(t, _)| *t == threshold).map(|x| x.1)
    }

    pub fn rot_at(&self, threshold: f64) -> Option<f64> {
        self.rot_acc.iter().find(|(t, _)| *t == threshold).map(|x| x.1)
    }

    pub fn family_em(&self, f: QuestionFamily) -> Option<f64> {
        self.em1_by_family.get(&f).map(Tally::fraction)
    }

    /// Fractions in `[0, 1]`, monotone accuracy curves and by-type counts
    /// that add up to the total.
    pub fn check_invariants(&self) -> Result<(), String> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        for (name, curve) in [("loc_acc", &self.loc_acc), ("rot_acc", &self.rot_acc)] {
            for w in curve.windows(2) {
                if w[1].0 <= w[0].0 || w[1].1 < w[0].1 {
                    return Err(format!("{name} not monotone: {w:?}"));
                }
            }
            if let Some((t, v)) = curve.iter().find(|(_, v)| !in_unit(*v)) {
                return Err(format!("{name}@{t} = {v} outside [0, 1]"));
            }
        }
        let (c, n) = self
            .em1_by_type
            .values()
            .fold((0, 0), |(c, n), t| (c + t.correct, n + t.count));
        if c != self.em1.correct || n != self.em1.count {
            return Err(format!("by-type tallies {c}/{n} differ from overall {:?}", self.em1));
        }
        if self.em1.correct > self.em1.count {
            return Err("more correct answers than questions".into());
        }
        Ok(())
    }

    /// Plain text with one `key value` pair per line in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{REPORT_HEADER}");
        let _ = writeln!(s, "episodes {}", self.episodes);
        for (t, v) in &self.loc_acc {
            let _ = writeln!(s, "loc_acc@{t}m {v}");
        }
        for (t, v) in &self.rot_acc {
            let _ = writeln!(s, "rot_acc@{t}deg {v}");
        }
        let _ = writeln!(s, "em1 {} {}/{}", self.em1.fraction(), self.em1.correct, self.em1.count);
        for (k, t) in &self.em1_by_type {
            let _ = writeln!(s, "em1_type.{} {} {}/{}", k.name(), t.fraction(), t.correct, t.count);
        }
        for (k, t) in &self.em1_by_family {
            let _ = writeln!(s, "em1_family.{} {} {}/{}", k.name(), t.fraction(), t.correct, t.count);
        }
        let _ = writeln!(s, "unknown_answers {}", self.unknown_answers);
        s
    }

    pub fn from_text(text: &str) -> Result<Self, String> {
        let mut lines = text.lines();
        if lines.next() != Some(REPORT_HEADER) {
            return Err("missing report header".into());
        }
        let mut r = MetricsReport {
            episodes: 0,
            loc_acc: Vec::new(),
            rot_acc: Vec::new(),
            em1: Tally::default(),
            em1_by_type: BTreeMap::new(),
            em1_by_family: BTreeMap::new(),
            unknown_answers: 0,
        };
        let num = |s: &str| s.parse::<f64>().map_err(|e| format!("bad number `{s}`: {e}"));
        let tally = |s: &str| -> Result<Tally, String> {
            let (c, n) = s.split_once('/').ok_or_else(|| format!("bad tally `{s}`"))?;
            Ok(Tally {
                correct: c.parse().map_err(|_| format!("bad tally `{s}`"))?,
                count: n.parse().map_err(|_| format!("bad tally `{s}`"))?,
            })
        };
        for line in lines {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let (key, vals) = parts.split_first().ok_or("empty line")?;
            let first = vals.first().copied().ok_or_else(|| format!("no value for `{key}`"))?;
            if *key == "episodes" {
                r.episodes = first.parse().map_err(|_| "bad episode count")?;
            } else if *key == "unknown_answers" {
                r.unknown_answers = first.parse().map_err(|_| "bad unknown count")?;
            } else if let Some(t) = key.strip_prefix("loc_acc@").and_then(|k| k.strip_suffix('m')) {
                r.loc_acc.push((num(t)?, num(first)?));
            } else if let Some(t) = key.strip_prefix("rot_acc@").and_then(|k| k.strip_suffix("deg")) {
                r.rot_acc.push((num(t)?, num(first)?));
            } else if *key == "em1" {
                r.em1 = tally(vals.get(1).ok_or("missing em1 tally")?)?;
            } else if let Some(t) = key.strip_prefix("em1_type.") {
                let ty = QuestionType::ALL
                    .into_iter()
                    .find(|q| q.name() == t)
                    .ok_or_else(|| format!("unknown question type `{t}`"))?;
                r.em1_by_type.insert(ty, tally(vals.get(1).ok_or("missing tally")?)?);
            } else if let Some(f) = key.strip_prefix("em1_family.") {
                let fam = QuestionFamily::parse(f).ok_or_else(|| format!("unknown family `{f}`"))?;
                r.em1_by_family.insert(fam, tally(vals.get(1).ok_or("missing tally")?)?);
            } else {
                return Err(format!("unknown key `{key}`"));
            }
        }
        Ok(r)
    }
}

/// Everything one training run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub net: SitNet,
    pub logs: Vec<EpochLog>,
    pub report: MetricsReport,
    pub predictions: Vec<Prediction>,
    /// Dataset episode index of each prediction.
    pub episode_indices: Vec<usize>,
}

/// Scene tokens shared by every run over the same dataset and token settings.
pub struct PreparedScenes {
    pub voxel_size: f64,
    pub n_tokens: usize,
    pub scenes: Vec<SceneInput>,
}

impl PreparedScenes {
    pub fn new(dataset: &Dataset, voxel_size: f64, n_tokens: usize) -> Result<Self, ModelError> {
        Ok(Self {
            voxel_size,
            n_tokens,
            scenes: prepare_scenes(dataset, voxel_size, n_tokens)?,
        })
    }
}

/// Runs the network over episodes, grouped by scene, and keeps input order.
pub fn predict_all(net: &SitNet, scenes: &[SceneInput], episodes: &[EpisodeInput]) -> Result<Vec<Prediction>, ModelError> {
    let mut out: Vec<Option<Prediction>> = vec![None; episodes.len()];
    let mut by_scene: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, e) in episodes.iter().enumerate() {
        by_scene.entry(e.scene).or_default().push(i);
    }
    for (s, idx) in by_scene {
        let eps: Vec<&EpisodeInput> = idx.iter().map(|&i| &episodes[i]).collect();
        for (i, p) in idx.iter().zip(net.predict(&scenes[s], &eps)?) {
            out[*i] = Some(p);
        }
    }
    Ok(out.into_iter().map(|p| p.expect("every episode predicted")).collect())
}

/// Scores predictions for dataset episodes `indices`.
pub fn score(
    net: &SitNet,
    dataset: &Dataset,
    indices: &[usize],
    predictions: &[Prediction],
    cfg: &RunConfig,
) -> Result<MetricsReport, ModelError> {
    let eps: Vec<_> = indices.iter().map(|&i| &dataset.episodes[i]).collect();
    let gts: Vec<SituationVector> = eps.iter().map(|e| e.gt).collect();
    let est: Vec<SituationVector> = predictions.iter().map(|p| p.estimate).collect();
    let answers: Vec<Option<usize>> = predictions.iter().map(Prediction::answer).collect();
    let gt_answers: Vec<Option<usize>> = eps.iter().map(|e| net.answers.index(&e.answer)).collect();
    let types: Vec<QuestionType> = eps.iter().map(|e| e.question_type).collect();
    let families: Vec<Option<QuestionFamily>> = eps.iter().map(|e| e.family).collect();
    Ok(MetricsReport::compute(
        &est,
        &gts,
        &answers,
        &gt_answers,
        &types,
        &families,
        &cfg.eval.loc_thresholds,
        &cfg.eval.rot_thresholds,
    )?)
}

/// Builds a fresh network for `cfg` with the answer vocabulary of `train_idx`.
pub fn build_network(cfg: &RunConfig, dataset: &Dataset, train_idx: &[usize]) -> Result<SitNet, ModelError> {
    let answers = AnswerVocab::from_answers(train_idx.iter().map(|&i| dataset.episodes[i].answer.as_str()));
    SitNet::new(
        cfg.model.clone(),
        cfg.mode,
        Vocabulary::standard(),
        answers,
        feature_dim(crate::scenegen::CATEGORIES.len()),
        cfg.seed,
    )
}

/// Trains on the training split and evaluates on the held-out scenes.
pub fn run_experiment(
    cfg: &RunConfig,
    dataset: &Dataset,
    scenes: &PreparedScenes,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<RunOutput, ModelError> {
    cfg.validate()?;
    if scenes.voxel_size != cfg.tokens.voxel_size || scenes.n_tokens != cfg.tokens.n_tokens {
        return Err(ModelError::Config {
            field: "tokens".into(),
            msg: "prepared scenes were tokenized with different settings".into(),
        });
    }
    let (train_idx, val_idx) = dataset.split(cfg.val_fraction);
    let mut net = build_network(cfg, dataset, &train_idx)?;
    let corrupt = (cfg.mode == Mode::CorruptedSupervision).then_some(cfg.seed);
    let len = cfg.model.max_text_len;
    let (train_eps, _) =
        prepare_episodes(dataset, &train_idx, &scenes.scenes, &net.vocab, &net.answers, len, corrupt)?;
    let logs = train(&mut net, &scenes.scenes, &train_eps, &cfg.train, cfg.seed, &mut on_epoch)?;
    let (val_eps, _) = prepare_episodes(dataset, &val_idx, &scenes.scenes, &net.vocab, &net.answers, len, None)?;
    let predictions = predict_all(&net, &scenes.scenes, &val_eps)?;
    let report = score(&net, dataset, &val_idx, &predictions, cfg)?;
    Ok(RunOutput {
        net,
        logs,
        report,
        predictions,
        episode_indices: val_idx,
    })
}

/// One configuration of the ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub mode: Mode,
    pub n_tokens: usize,
    pub voxel_size: f64,
    pub repr: crate::sit_target::RotationRepr,
}

impl AblationCell {
    pub fn label(&self) -> String {
        format!(
            "{} tokens={} voxel={} repr={}",
            self.mode,
            self.n_tokens,
            self.voxel_size,
            self.repr.name()
        )
    }

    pub fn apply(&self, base: &RunConfig, seed: u64) -> RunConfig {
        let mut c = base.clone();
        c.mode = self.mode;
        c.tokens.n_tokens = self.n_tokens;
        c.tokens.voxel_size = self.voxel_size;
        c.model.repr = self.repr;
        c.seed = seed;
        c
    }
}

/// The cross product of the configured ablation axes.
pub fn ablation_cells(cfg: &RunConfig) -> Vec<AblationCell> {
    let a = &cfg.ablation;
    let or = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
    let modes = if a.modes.is_empty() { vec![cfg.mode] } else { a.modes.clone() };
    let tokens = if a.n_tokens.is_empty() { vec![cfg.tokens.n_tokens] } else { a.n_tokens.clone() };
    let reprs = if a.reprs.is_empty() { vec![cfg.model.repr] } else { a.reprs.clone() };
    let mut out = Vec::new();
    for &mode in &modes {
        for &n_tokens in &tokens {
            for voxel_size in or(&a.voxel_sizes, cfg.tokens.voxel_size) {
                for &repr in &reprs {
                    out.push(AblationCell {
                        mode,
                        n_tokens,
                        voxel_size,
                        repr,
                    });
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub seeds: Vec<u64>,
    pub reports: Vec<MetricsReport>,
}

/// `(mean, sample standard deviation)`; the deviation is 0 for one value.
pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

impl AblationRow {
    pub fn summary(&self, metric: impl Fn(&MetricsReport) -> Option<f64>) -> (f64, f64) {
        let v: Vec<f64> = self.reports.iter().filter_map(metric).collect();
        mean_sd(&v)
    }
}

/// Trains and evaluates every cell for every seed.
pub fn run_ablation_suite(
    base: &RunConfig,
    dataset: &Dataset,
    cells: &[AblationCell],
    seeds: &[u64],
    mut progress: impl FnMut(&AblationCell, u64, &MetricsReport),
) -> Result<Vec<AblationRow>, ModelError> {
    let mut prepared: Vec<PreparedScenes> = Vec::new();
    let mut rows = Vec::with_capacity(cells.len());
    for cell in cells {
        let key = |p: &PreparedScenes| p.voxel_size == cell.voxel_size && p.n_tokens == cell.n_tokens;
        if !prepared.iter().any(key) {
            prepared.push(PreparedScenes::new(dataset, cell.voxel_size, cell.n_tokens)?);
        }
        let scenes = prepared.iter().find(|p| key(p)).expect("prepared above");
        let mut reports = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cfg = cell.apply(base, seed);
            let out = run_experiment(&cfg, dataset, scenes, |_| {})?;
            progress(cell, seed, &out.report);
            reports.push(out.report);
        }
        rows.push(AblationRow {
            cell: cell.clone(),
            seeds: seeds.to_vec(),
            reports,
        });
    }
    Ok(rows)
}

/// Fixed-width text table of mean ± sd per cell.
pub fn ablation_table(rows: &[AblationRow], cfg: &RunConfig) -> String {
    let mut s = String::from("# situ3d ablation v1\n");
    let mut header = vec!["cell".to_string(), "seeds".to_string()];
    for t in &cfg.eval.loc_thresholds {
        header.push(format!("loc@{t}m"));
    }
    for t in &cfg.eval.rot_thresholds {
        header.push(format!("rot@{t}deg"));
    }
    header.push("em1".into());
    let _ = writeln!(s, "{}", header.join(" | "));
    for r in rows {
        let mut cols = vec![r.cell.label(), r.seeds.len().to_string()];
        let fmt = |(m, sd): (f64, f64)| format!("{:.1}±{:.1}", 100.0 * m, 100.0 * sd);
        for &t in &cfg.eval.loc_thresholds {
            cols.push(fmt(r.summary(|m| m.loc_at(t))));
        }
        for &t in &cfg.eval.rot_thresholds {
            cols.push(fmt(r.summary(|m| m.rot_at(t))));
        }
        cols.push(fmt(r.summary(|m| Some(m.em1.fraction()))));
        let _ = writeln!(s, "{}", cols.join(" | "));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn at(x: f64, y: f64, yaw_deg: f64) -> SituationVector {
        SituationVector::from_yaw(Vector3::new(x, y, 0.0), yaw_deg.to_radians())
    }

    #[test]
    fn localization_examples() {
        let g = vec![at(1.0, 1.0, 0.0)];
        assert_eq!(localization_accuracy(&g, &g, 0.5).unwrap(), 1.0);
        let p = vec![at(1.4, 1.0, 0.0)];
        assert_eq!(localization_accuracy(&p, &g, 0.5).unwrap(), 1.0);
        assert_eq!(localization_accuracy(&p, &g, 0.3).unwrap(), 0.0);
        // height differences are ignored
        let high = vec![SituationVector::from_yaw(Vector3::new(1.0, 1.0, 5.0), 0.0)];
        assert_eq!(localization_accuracy(&high, &g, 0.1).unwrap(), 1.0);
        assert!(matches!(
            localization_accuracy(&p, &[], 0.5),
            Err(EvalError::LengthMismatch(1, 0))
        ));
    }

    #[test]
    fn orientation_examples() {
        let g = vec![at(0.0, 0.0, 10.0)];
        assert_eq!(orientation_accuracy(&g, &g, 15.0).unwrap(), 1.0);
        let p = vec![at(0.0, 0.0, 30.0)];
        assert_eq!(orientation_accuracy(&p, &g, 15.0).unwrap(), 0.0);
        assert_eq!(orientation_accuracy(&p, &g, 30.0).unwrap(), 1.0);
        let wrap = vec![at(0.0, 0.0, -175.0)];
        let g2 = vec![at(0.0, 0.0, 175.0)];
        assert_eq!(orientation_accuracy(&wrap, &g2, 15.0).unwrap(), 1.0);
    }

    #[test]
    fn em_hand_counted() {
        use QuestionType::*;
        let pred = [Some(0), Some(1), Some(2), None, Some(1), Some(0)];
        let gt = [Some(0), Some(2), Some(2), Some(1), None, Some(0)];
        let types = [Is, Is, What, What, How, Which];
        let r = em_at_1(&pred, &gt, &types).unwrap();
        // hits at 0, 2 and 5
        assert_eq!(r.overall, Tally { correct: 3, count: 6 });
        assert_eq!(r.by_type[&Is], Tally { correct: 1, count: 2 });
        assert_eq!(r.by_type[&What], Tally { correct: 1, count: 2 });
        assert_eq!(r.by_type[&How], Tally { correct: 0, count: 1 });
        assert_eq!(r.by_type[&Which], Tally { correct: 1, count: 1 });
        assert_eq!(r.unknown_answers, 1);
    }

    #[test]
    fn random_yaw_accuracy_is_one_sixth() {
        let n = 100_000;
        let bounds = (Vector3::zeros(), Vector3::new(5.0, 4.0, 2.0));
        let preds = random_situation_baseline(bounds, 7, n);
        assert_eq!(preds, random_situation_baseline(bounds, 7, n));
        let gts = vec![at(2.0, 2.0, 37.0); n];
        let acc = orientation_accuracy(&preds, &gts, 30.0).unwrap();
        let p = 1.0 / 6.0;
        let sd = (p * (1.0 - p) / n as f64).sqrt();
        assert!((acc - p).abs() < 3.0 * sd, "{acc}");
    }

    #[test]
    fn random_position_accuracy_matches_grid_oracle() {
        // expected hit rate for a fixed target: area of the disc inside the
        // room over the room area, integrated on a dense grid
        let (w, l, r) = (5.0, 4.0, 1.0);
        let target = (1.0, 3.5);
        let m = 1000;
        let mut inside = 0usize;
        for i in 0..m {
            for j in 0..m {
                let x = (i as f64 + 0.5) * w / m as f64;
                let y = (j as f64 + 0.5) * l / m as f64;
                if (x - target.0).hypot(y - target.1) <= r {
                    inside += 1;
                }
            }
        }
        let expect = inside as f64 / (m * m) as f64;
        let n = 100_000;
        let preds = random_situation_baseline((Vector3::zeros(), Vector3::new(w, l, 2.0)), 3, n);
        let gts = vec![at(target.0, target.1, 0.0); n];
        let acc = localization_accuracy(&preds, &gts, r).unwrap();
        let sd = (expect * (1.0 - expect) / n as f64).sqrt();
        assert!((acc - expect).abs() < 3.0 * sd + 1e-3, "{acc} vs {expect}");
        // the unclipped disc would give π r² / (w l)
        assert!(expect < PI * r * r / (w * l));
    }

    #[test]
    fn report_round_trip_and_invariants() {
        let preds = vec![at(0.0, 0.0, 0.0), at(3.0, 0.0, 50.0), at(0.6, 0.0, 20.0)];
        let gts = vec![at(0.0, 0.0, 0.0); 3];
        let r = MetricsReport::compute(
            &preds,
            &gts,
            &[Some(1), Some(0), Some(0)],
            &[Some(1), Some(1), Some(0)],
            &[QuestionType::Is, QuestionType::What, QuestionType::Is],
            &[Some(QuestionFamily::Side), None, Some(QuestionFamily::Side)],
            &[1.0, 0.5],
            &[30.0, 15.0],
        )
        .unwrap();
        assert_eq!(r.loc_acc, vec![(0.5, 1.0 / 3.0), (1.0, 2.0 / 3.0)]);
        assert_eq!(r.rot_acc, vec![(15.0, 1.0 / 3.0), (30.0, 2.0 / 3.0)]);
        r.check_invariants().unwrap();
        let text = r.to_text();
        assert_eq!(MetricsReport::from_text(&text).unwrap(), r);
        assert_eq!(r.family_em(QuestionFamily::Side), Some(1.0));

        let perfect = MetricsReport::compute(&gts, &gts, &[], &[], &[], &[], &[0.1], &[1.0]);
        assert!(perfect.is_err());
        let perfect = MetricsReport::compute(&gts, &gts, &[None; 3], &[None; 3], &[QuestionType::Is; 3], &[None; 3], &[1e-9, 0.1], &[1e-9, 1.0]).unwrap();
        assert!(perfect.loc_acc.iter().chain(&perfect.rot_acc).all(|(_, v)| *v == 1.0));
    }

    #[test]
    fn ablation_grid_and_stats() {
        let mut cfg = RunConfig::default();
        cfg.ablation.modes = vec![Mode::Full, Mode::DirectRegression];
        cfg.ablation.n_tokens = vec![64, 128];
        let cells = ablation_cells(&cfg);
        assert_eq!(cells.len(), 4);
        assert_eq!(cells[1].n_tokens, 128);
        let (m, sd) = mean_sd(&[1.0, 2.0, 3.0]);
        assert_eq!((m, sd), (2.0, 1.0));
        assert_eq!(mean_sd(&[4.0]), (4.0, 0.0));
    }
}
