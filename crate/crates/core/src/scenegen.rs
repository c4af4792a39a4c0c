//! Procedural rooms, situated QA episodes with geometric-oracle answers, and
//! the annotation file format.
//!
//! Rooms are axis-aligned rectangles `[0, width] × [0, depth]` with the floor
//! at `z = 0`. Objects are boxes standing on the floor whose yaw is a multiple
//! of 90°, so their footprints stay axis-aligned.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::SceneError;
use crate::geometry::{realign_frame, rot_z, wrap_angle, Quaternion, SituationVector};
use crate::voxtok::PointCloud;

pub const CATEGORIES: [&str; 12] = [
    "chair", "table", "sofa", "bed", "desk", "cabinet", "shelf", "lamp", "tv", "plant", "fridge",
    "trashcan",
];

pub const CATEGORY_PLURALS: [&str; 12] = [
    "chairs", "tables", "sofas", "beds", "desks", "cabinets", "shelves", "lamps", "tvs", "plants",
    "fridges", "trashcans",
];

/// Footprint width, depth and height ranges in meters, by category.
const EXTENTS: [[(f64, f64); 3]; 12] = [
    [(0.4, 0.6), (0.4, 0.6), (0.8, 1.0)],
    [(0.8, 1.4), (0.6, 1.0), (0.7, 0.8)],
    [(1.4, 2.0), (0.8, 1.0), (0.8, 0.9)],
    [(1.4, 1.8), (1.8, 2.0), (0.5, 0.6)],
    [(1.0, 1.4), (0.6, 0.8), (0.7, 0.8)],
    [(0.5, 1.0), (0.4, 0.6), (0.9, 1.8)],
    [(0.8, 1.2), (0.3, 0.4), (1.5, 2.0)],
    [(0.3, 0.4), (0.3, 0.4), (1.2, 1.6)],
    [(0.9, 1.3), (0.2, 0.3), (1.0, 1.2)],
    [(0.3, 0.5), (0.3, 0.5), (0.5, 1.2)],
    [(0.6, 0.8), (0.6, 0.8), (1.6, 1.9)],
    [(0.3, 0.4), (0.3, 0.4), (0.4, 0.6)],
];

pub const COLORS: [(&str, [f64; 3]); 8] = [
    ("red", [0.85, 0.15, 0.15]),
    ("green", [0.2, 0.7, 0.25]),
    ("blue", [0.15, 0.3, 0.85]),
    ("yellow", [0.9, 0.85, 0.2]),
    ("white", [0.95, 0.95, 0.95]),
    ("black", [0.08, 0.08, 0.08]),
    ("brown", [0.5, 0.32, 0.15]),
    ("gray", [0.5, 0.5, 0.5]),
];

const FLOOR_COLOR: [f64; 3] = [0.6, 0.55, 0.5];
const WALL_COLOR: [f64; 3] = [0.85, 0.85, 0.8];

pub fn category_id(name: &str) -> Option<usize> {
    CATEGORIES.iter().position(|c| *c == name)
}

pub fn color_id(name: &str) -> Option<usize> {
    COLORS.iter().position(|c| c.0 == name)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub room_min: f64,
    pub room_max: f64,
    pub objects_min: usize,
    pub objects_max: usize,
    pub wall_height: f64,
    /// Surface samples per square meter.
    pub point_density: f64,
    /// Minimum gap between object footprints, meters.
    pub clearance: f64,
    /// Minimum gap between an object and a wall, meters.
    pub wall_margin: f64,
    pub max_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            room_min: 4.0,
            room_max: 6.0,
            objects_min: 4,
            objects_max: 7,
            wall_height: 2.0,
            point_density: 400.0,
            clearance: 0.3,
            wall_margin: 0.3,
            max_attempts: 200,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: &str| Err(SceneError::InvalidConfig(m.to_string()));
        if !(self.room_min > 1.0 && self.room_max >= self.room_min && self.room_max < 100.0) {
            return bad("room size range must satisfy 1 < room_min <= room_max < 100");
        }
        if self.objects_min < 2 || self.objects_max < self.objects_min || self.objects_max > 40 {
            return bad("object count range must satisfy 2 <= objects_min <= objects_max <= 40");
        }
        if !(self.wall_height > 0.0 && self.point_density > 0.0) {
            return bad("wall_height and point_density must be positive");
        }
        if self.clearance < 0.0 || self.wall_margin < 0.0 || self.max_attempts == 0 {
            return bad("clearance/wall_margin must be >= 0 and max_attempts >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub category: usize,
    /// Box center; `z` is half the height.
    pub center: Vector3<f64>,
    /// Axis-aligned size `(x, y, z)` after applying `yaw`.
    pub extent: Vector3<f64>,
    pub yaw: f64,
    pub color: usize,
}

impl SceneObject {
    pub fn category_name(&self) -> &'static str {
        CATEGORIES[self.category]
    }

    pub fn color_name(&self) -> &'static str {
        COLORS[self.color].0
    }

    /// Footprint `(xmin, ymin, xmax, ymax)`.
    pub fn footprint(&self) -> [f64; 4] {
        let (hx, hy) = (self.extent.x / 2.0, self.extent.y / 2.0);
        [
            self.center.x - hx,
            self.center.y - hy,
            self.center.x + hx,
            self.center.y + hy,
        ]
    }

    pub fn footprint_contains(&self, x: f64, y: f64, margin: f64) -> bool {
        let f = self.footprint();
        x > f[0] - margin && x < f[2] + margin && y > f[1] - margin && y < f[3] + margin
    }
}

fn footprints_overlap(a: &[f64; 4], b: &[f64; 4], gap: f64) -> bool {
    a[0] < b[2] + gap && b[0] < a[2] + gap && a[1] < b[3] + gap && b[1] < a[3] + gap
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    pub seed: u64,
    pub width: f64,
    pub depth: f64,
    pub wall_height: f64,
    pub point_density: f64,
    pub objects: Vec<SceneObject>,
}

pub fn generate_scene(id: &str, config: &SceneConfig, seed: u64) -> Result<Scene, SceneError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = rng.random_range(config.room_min..=config.room_max);
    let depth = rng.random_range(config.room_min..=config.room_max);
    let count = rng.random_range(config.objects_min..=config.objects_max);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    for index in 0..count {
        let category = rng.random_range(0..CATEGORIES.len());
        let [w, d, h] = EXTENTS[category].map(|(lo, hi)| rng.random_range(lo..=hi));
        let quarter = rng.random_range(0..4u8);
        let yaw = quarter as f64 * FRAC_PI_2;
        let (ex, ey) = if quarter % 2 == 0 { (w, d) } else { (d, w) };
        let color = rng.random_range(0..COLORS.len());
        let (lo_x, hi_x) = (config.wall_margin + ex / 2.0, width - config.wall_margin - ex / 2.0);
        let (lo_y, hi_y) = (config.wall_margin + ey / 2.0, depth - config.wall_margin - ey / 2.0);
        let mut placed = None;
        if lo_x < hi_x && lo_y < hi_y {
            for _ in 0..config.max_attempts {
                let obj = SceneObject {
                    category,
                    center: Vector3::new(
                        rng.random_range(lo_x..hi_x),
                        rng.random_range(lo_y..hi_y),
                        h / 2.0,
                    ),
                    extent: Vector3::new(ex, ey, h),
                    yaw,
                    color,
                };
                let fp = obj.footprint();
                if objects
                    .iter()
                    .all(|o| !footprints_overlap(&fp, &o.footprint(), config.clearance))
                {
                    placed = Some(obj);
                    break;
                }
            }
        }
        match placed {
            Some(o) => objects.push(o),
            None => {
                return Err(SceneError::PlacementFailure {
                    index,
                    attempts: config.max_attempts,
                })
            }
        }
    }
    Ok(Scene {
        id: id.to_string(),
        seed,
        width,
        depth,
        wall_height: config.wall_height,
        point_density: config.point_density,
        objects,
    })
}

/// One planar rectangle `origin + u·a + v·b`, `u, v ∈ [0, 1]`.
struct Patch {
    origin: Vector3<f64>,
    a: Vector3<f64>,
    b: Vector3<f64>,
    color: [f64; 3],
    category: i32,
}

impl Scene {
    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        (
            Vector3::zeros(),
            Vector3::new(self.width, self.depth, self.wall_height),
        )
    }

    pub fn category_count(&self, category: usize) -> usize {
        self.objects.iter().filter(|o| o.category == category).count()
    }

    fn patches(&self) -> Vec<Patch> {
        let (w, d, h) = (self.width, self.depth, self.wall_height);
        let v = Vector3::new;
        let mut out = vec![
            Patch { origin: v(0.0, 0.0, 0.0), a: v(w, 0.0, 0.0), b: v(0.0, d, 0.0), color: FLOOR_COLOR, category: -1 },
            Patch { origin: v(0.0, 0.0, 0.0), a: v(w, 0.0, 0.0), b: v(0.0, 0.0, h), color: WALL_COLOR, category: -1 },
            Patch { origin: v(0.0, d, 0.0), a: v(w, 0.0, 0.0), b: v(0.0, 0.0, h), color: WALL_COLOR, category: -1 },
            Patch { origin: v(0.0, 0.0, 0.0), a: v(0.0, d, 0.0), b: v(0.0, 0.0, h), color: WALL_COLOR, category: -1 },
            Patch { origin: v(w, 0.0, 0.0), a: v(0.0, d, 0.0), b: v(0.0, 0.0, h), color: WALL_COLOR, category: -1 },
        ];
        for o in &self.objects {
            let lo = o.center - o.extent / 2.0;
            let (ex, ey, ez) = (o.extent.x, o.extent.y, o.extent.z);
            let color = COLORS[o.color].1;
            let category = o.category as i32;
            let top = Patch { origin: lo + v(0.0, 0.0, ez), a: v(ex, 0.0, 0.0), b: v(0.0, ey, 0.0), color, category };
            out.push(top);
            out.push(Patch { origin: lo, a: v(ex, 0.0, 0.0), b: v(0.0, 0.0, ez), color, category });
            out.push(Patch { origin: lo + v(0.0, ey, 0.0), a: v(ex, 0.0, 0.0), b: v(0.0, 0.0, ez), color, category });
            out.push(Patch { origin: lo, a: v(0.0, ey, 0.0), b: v(0.0, 0.0, ez), color, category });
            out.push(Patch { origin: lo + v(ex, 0.0, 0.0), a: v(0.0, ey, 0.0), b: v(0.0, 0.0, ez), color, category });
        }
        out
    }

    /// Samples floor (outside object footprints), walls and object surfaces.
    /// Deterministic in the scene seed.
    pub fn point_cloud(&self) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5EED_C10D);
        let mut points = Vec::new();
        let mut colors = Vec::new();
        let mut categories = Vec::new();
        for (k, patch) in self.patches().iter().enumerate() {
            let area = patch.a.cross(&patch.b).norm();
            let n = (area * self.point_density).round().max(1.0) as usize;
            for _ in 0..n {
                let p = patch.origin + patch.a * rng.random::<f64>() + patch.b * rng.random::<f64>();
                if k == 0 && self.objects.iter().any(|o| o.footprint_contains(p.x, p.y, 0.0)) {
                    continue;
                }
                points.push(p);
                colors.push(patch.color);
                categories.push(patch.category);
            }
        }
        PointCloud::new(points, colors, categories).expect("the floor always yields points")
    }

    /// Applies `p ↦ rot_z(yaw) p + t` to every object (centers and yaws only).
    pub fn transformed_objects(&self, yaw: f64, t: Vector3<f64>) -> Vec<SceneObject> {
        self.objects
            .iter()
            .map(|o| SceneObject {
                center: rot_z(yaw) * o.center + t,
                yaw: o.yaw + yaw,
                ..o.clone()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionFamily {
    Side,
    Direction,
    Counting,
    Nearest,
    Attribute,
}

impl QuestionFamily {
    pub const ALL: [QuestionFamily; 5] = [
        QuestionFamily::Side,
        QuestionFamily::Direction,
        QuestionFamily::Counting,
        QuestionFamily::Nearest,
        QuestionFamily::Attribute,
    ];

    pub fn name(self) -> &'static str {
        match self {
            QuestionFamily::Side => "side",
            QuestionFamily::Direction => "direction",
            QuestionFamily::Counting => "counting",
            QuestionFamily::Nearest => "nearest",
            QuestionFamily::Attribute => "attribute",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == s)
    }
}

/// Question breakdown by the first word of the question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QuestionType {
    What,
    Is,
    How,
    Can,
    Which,
    Other,
}

impl QuestionType {
    pub const ALL: [QuestionType; 6] = [
        QuestionType::What,
        QuestionType::Is,
        QuestionType::How,
        QuestionType::Can,
        QuestionType::Which,
        QuestionType::Other,
    ];

    pub fn of_question(q: &str) -> Self {
        let first = q
            .split_whitespace()
            .next()
            .unwrap_or("")
            .trim_matches(|c: char| !c.is_alphanumeric())
            .to_ascii_lowercase();
        match first.as_str() {
            "what" => QuestionType::What,
            "is" => QuestionType::Is,
            "how" => QuestionType::How,
            "can" => QuestionType::Can,
            "which" => QuestionType::Which,
            _ => QuestionType::Other,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            QuestionType::What => "What",
            QuestionType::Is => "Is",
            QuestionType::How => "How",
            QuestionType::Can => "Can",
            QuestionType::Which => "Which",
            QuestionType::Other => "Other",
        }
    }
}

impl fmt::Display for QuestionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub scene_id: String,
    pub situation: String,
    pub question: String,
    pub answer: String,
    pub gt: SituationVector,
    pub question_type: QuestionType,
    /// Known for generated episodes; optional in annotation files.
    pub family: Option<QuestionFamily>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    /// Distance from the reference object's footprint, meters.
    pub beside_distance: f64,
    pub angle_margin_deg: f64,
    pub distance_margin: f64,
    /// Sampling weights in [`QuestionFamily::ALL`] order.
    pub family_weights: [f64; 5],
    pub max_attempts: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            beside_distance: 0.5,
            angle_margin_deg: 10.0,
            distance_margin: 0.1,
            family_weights: [1.0; 5],
            max_attempts: 100,
        }
    }
}

/// Relative direction named in a question.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Front,
    Behind,
    Left,
    Right,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Front, Direction::Behind, Direction::Left, Direction::Right];

    /// Bearing of the direction, counterclockwise from forward.
    pub fn bearing(self) -> f64 {
        match self {
            Direction::Front => 0.0,
            Direction::Behind => PI,
            Direction::Left => FRAC_PI_2,
            Direction::Right => -FRAC_PI_2,
        }
    }

    fn phrase(self) -> &'static str {
        match self {
            Direction::Front => "in front of me",
            Direction::Behind => "behind me",
            Direction::Left => "on my left",
            Direction::Right => "on my right",
        }
    }
}

/// Structured form of every generated question.
#[derive(Debug, Clone, PartialEq)]
pub enum Question {
    /// "Is the C on my left/right?"
    Side { category: usize, left: bool },
    /// "Can I see the C without turning around?"
    Visible { category: usize },
    /// "Which object is in front of me / behind me / on my left / on my right?"
    Which { direction: Direction },
    /// "How many Cs are in the room?"
    Count { category: usize },
    /// "What is the object closest to me?"
    Nearest,
    /// "What color is the C on my left/right?"
    Color { category: usize, left: bool },
}

impl Question {
    pub fn family(&self) -> QuestionFamily {
        match self {
            Question::Side { .. } | Question::Visible { .. } => QuestionFamily::Side,
            Question::Which { .. } => QuestionFamily::Direction,
            Question::Count { .. } => QuestionFamily::Counting,
            Question::Nearest => QuestionFamily::Nearest,
            Question::Color { .. } => QuestionFamily::Attribute,
        }
    }

    pub fn text(&self) -> String {
        let side = |left: bool| if left { "left" } else { "right" };
        match self {
            Question::Side { category, left } => {
                format!("Is the {} on my {}?", CATEGORIES[*category], side(*left))
            }
            Question::Visible { category } => {
                format!("Can I see the {} without turning around?", CATEGORIES[*category])
            }
            Question::Which { direction } => format!("Which object is {}?", direction.phrase()),
            Question::Count { category } => {
                format!("How many {} are in the room?", CATEGORY_PLURALS[*category])
            }
            Question::Nearest => "What is the object closest to me?".to_string(),
            Question::Color { category, left } => {
                format!("What color is the {} on my {}?", CATEGORIES[*category], side(*left))
            }
        }
    }
}

pub fn situation_text(reference: usize, target: usize) -> String {
    format!(
        "I am standing beside the {} facing the {}.",
        CATEGORIES[reference], CATEGORIES[target]
    )
}

/// Object positions as seen from the situation: `(x, y, bearing)` where
/// `x < 0` is left, `y > 0` is ahead and bearing is counterclockwise from
/// forward.
fn situated(objects: &[SceneObject], gt: &SituationVector) -> Vec<(f64, f64, f64)> {
    let centers: Vec<_> = objects.iter().map(|o| o.center).collect();
    realign_frame(&centers, gt)
        .into_iter()
        .map(|p| (p.x, p.y, (-p.x).atan2(p.y)))
        .collect()
}

fn angle_between(a: f64, b: f64) -> f64 {
    wrap_angle(a - b).abs()
}

/// Geometric oracle. Fails with `AmbiguousEpisode` when the configured
/// margins do not separate the answer from its alternatives.
pub fn answer_question(
    objects: &[SceneObject],
    gt: &SituationVector,
    q: &Question,
    cfg: &EpisodeConfig,
) -> Result<String, SceneError> {
    let margin = cfg.angle_margin_deg.to_radians();
    let amb = |m: &str| Err(SceneError::AmbiguousEpisode(m.to_string()));
    let rel = situated(objects, gt);
    let unique = |c: usize| -> Result<usize, SceneError> {
        let hits: Vec<usize> = (0..objects.len()).filter(|&i| objects[i].category == c).collect();
        match hits.as_slice() {
            [one] => Ok(*one),
            _ => Err(SceneError::AmbiguousEpisode(format!(
                "{} {}s in scene",
                hits.len(),
                CATEGORIES[c]
            ))),
        }
    };
    let yes_no = |b: bool| if b { "yes" } else { "no" }.to_string();
    match *q {
        Question::Side { category, left } => {
            let (_, _, b) = rel[unique(category)?];
            if b.abs() < margin || PI - b.abs() < margin {
                return amb("object is almost straight ahead or behind");
            }
            Ok(yes_no((b > 0.0) == left))
        }
        Question::Visible { category } => {
            let (_, _, b) = rel[unique(category)?];
            if (b.abs() - FRAC_PI_2).abs() < margin {
                return amb("object is almost exactly sideways");
            }
            Ok(yes_no(b.abs() < FRAC_PI_2))
        }
        Question::Which { direction } => {
            let mut cands: Vec<(f64, usize)> = rel
                .iter()
                .enumerate()
                .map(|(i, r)| (angle_between(r.2, direction.bearing()), i))
                .filter(|(d, _)| *d <= PI / 4.0)
                .collect();
            cands.sort_by(|a, b| a.0.total_cmp(&b.0));
            match cands.as_slice() {
                [] => amb("no object in that direction"),
                [(d0, i0), (d1, i1), ..]
                    if d1 - d0 < margin && objects[*i0].category != objects[*i1].category =>
                {
                    amb("two objects in nearly the same direction")
                }
                [(_, i0), ..] => Ok(objects[*i0].category_name().to_string()),
            }
        }
        Question::Count { category } => {
            let n = objects.iter().filter(|o| o.category == category).count();
            if n > 9 {
                return amb("count exceeds answer digits");
            }
            Ok(n.to_string())
        }
        Question::Nearest => {
            let mut d: Vec<(f64, usize)> = rel
                .iter()
                .enumerate()
                .map(|(i, r)| (r.0.hypot(r.1), i))
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0));
            match d.as_slice() {
                [(d0, i0), (d1, i1), ..]
                    if d1 - d0 < cfg.distance_margin
                        && objects[*i0].category != objects[*i1].category =>
                {
                    amb("two objects almost equally close")
                }
                [(_, i0), ..] => Ok(objects[*i0].category_name().to_string()),
                [] => amb("empty scene"),
            }
        }
        Question::Color { category, left } => {
            let mut on_side = Vec::new();
            for (i, o) in objects.iter().enumerate() {
                if o.category != category {
                    continue;
                }
                let b = rel[i].2;
                if b.abs() < margin || PI - b.abs() < margin {
                    return amb("a candidate is almost straight ahead or behind");
                }
                if (b > 0.0) == left {
                    on_side.push(i);
                }
            }
            match on_side.as_slice() {
                [one] => Ok(objects[*one].color_name().to_string()),
                _ => amb("not exactly one such object on that side"),
            }
        }
    }
}

/// Position `beside` meters outside `reference`'s footprint on the line
/// toward `target`, facing `target`.
pub fn beside_situation(
    reference: &SceneObject,
    target: &SceneObject,
    beside: f64,
) -> Option<SituationVector> {
    let dx = target.center.x - reference.center.x;
    let dy = target.center.y - reference.center.y;
    let dist = dx.hypot(dy);
    if dist < 1e-9 {
        return None;
    }
    let (ux, uy) = (dx / dist, dy / dist);
    let exit = |o: &SceneObject| {
        let tx = if ux.abs() > 1e-12 { o.extent.x / 2.0 / ux.abs() } else { f64::INFINITY };
        let ty = if uy.abs() > 1e-12 { o.extent.y / 2.0 / uy.abs() } else { f64::INFINITY };
        tx.min(ty)
    };
    let along = exit(reference) + beside;
    // the target's footprint must start beyond the standing point
    if along >= dist - exit(target) {
        return None;
    }
    let pos = Vector3::new(reference.center.x + ux * along, reference.center.y + uy * along, 0.0);
    SituationVector::facing(pos, ux, uy).ok()
}

fn weighted_family(rng: &mut impl Rng, w: &[f64; 5]) -> QuestionFamily {
    let total: f64 = w.iter().sum();
    let mut r = rng.random_range(0.0..total);
    for (f, &wi) in QuestionFamily::ALL.iter().zip(w) {
        if r < wi {
            return *f;
        }
        r -= wi;
    }
    QuestionFamily::Attribute
}

/// One draw of situation and question. Errors when the draw is ambiguous.
pub fn try_episode(
    scene: &Scene,
    rng: &mut impl Rng,
    cfg: &EpisodeConfig,
) -> Result<(Episode, Question), SceneError> {
    if scene.objects.len() < 2 {
        return Err(SceneError::TooFewObjects(scene.objects.len()));
    }
    let uniq: Vec<usize> = (0..scene.objects.len())
        .filter(|&i| scene.category_count(scene.objects[i].category) == 1)
        .collect();
    if uniq.len() < 2 {
        return Err(SceneError::AmbiguousEpisode(
            "fewer than two uniquely named objects".into(),
        ));
    }
    let a = uniq[rng.random_range(0..uniq.len())];
    let b = loop {
        let b = uniq[rng.random_range(0..uniq.len())];
        if b != a {
            break b;
        }
    };
    let (ra, rb) = (&scene.objects[a], &scene.objects[b]);
    let gt = beside_situation(ra, rb, cfg.beside_distance)
        .ok_or_else(|| SceneError::AmbiguousEpisode("objects too close for a standing spot".into()))?;
    let inside = gt.pos.x > 0.0 && gt.pos.y > 0.0 && gt.pos.x < scene.width && gt.pos.y < scene.depth;
    if !inside || scene.objects.iter().any(|o| o.footprint_contains(gt.pos.x, gt.pos.y, 0.1)) {
        return Err(SceneError::AmbiguousEpisode("standing spot is blocked".into()));
    }

    let present: Vec<usize> = scene.objects.iter().map(|o| o.category).collect();
    let pick_obj = |rng: &mut dyn rand::RngCore| present[rng.random_range(0..present.len())];
    let left = rng.random_bool(0.5);
    let q = match weighted_family(rng, &cfg.family_weights) {
        QuestionFamily::Side => {
            let category = pick_obj(rng);
            if rng.random_bool(0.75) {
                Question::Side { category, left }
            } else {
                Question::Visible { category }
            }
        }
        QuestionFamily::Direction => Question::Which {
            direction: Direction::ALL[rng.random_range(0..4)],
        },
        QuestionFamily::Counting => Question::Count {
            category: if rng.random_bool(0.2) {
                rng.random_range(0..CATEGORIES.len())
            } else {
                pick_obj(rng)
            },
        },
        QuestionFamily::Nearest => Question::Nearest,
        QuestionFamily::Attribute => Question::Color {
            category: pick_obj(rng),
            left,
        },
    };
    let answer = answer_question(&scene.objects, &gt, &q, cfg)?;
    let question = q.text();
    Ok((
        Episode {
            scene_id: scene.id.clone(),
            situation: situation_text(ra.category, rb.category),
            question_type: QuestionType::of_question(&question),
            question,
            answer,
            gt,
            family: Some(q.family()),
        },
        q,
    ))
}

/// Draws until an unambiguous episode is found (bounded by `max_attempts`).
pub fn generate_episode(scene: &Scene, seed: u64, cfg: &EpisodeConfig) -> Result<Episode, SceneError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last = SceneError::AmbiguousEpisode("no attempts made".into());
    for _ in 0..cfg.max_attempts.max(1) {
        match try_episode(scene, &mut rng, cfg) {
            Ok((e, _)) => return Ok(e),
            Err(e @ SceneError::AmbiguousEpisode(_)) => last = e,
            Err(e) => return Err(e),
        }
    }
    Err(last)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub n_scenes: usize,
    pub episodes_per_scene: usize,
    pub scene: SceneConfig,
    pub episode: EpisodeConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_scenes: 40,
            episodes_per_scene: 10,
            scene: SceneConfig::default(),
            episode: EpisodeConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        self.scene.validate()?;
        let e = &self.episode;
        if self.n_scenes == 0 || self.episodes_per_scene == 0 {
            return Err(SceneError::InvalidConfig("n_scenes and episodes_per_scene must be positive".into()));
        }
        if !(e.beside_distance > 0.0 && e.angle_margin_deg >= 0.0 && e.angle_margin_deg < 45.0 && e.distance_margin >= 0.0) {
            return Err(SceneError::InvalidConfig("episode margins out of range".into()));
        }
        if e.family_weights.iter().any(|w| !(*w >= 0.0)) || e.family_weights.iter().sum::<f64>() <= 0.0 {
            return Err(SceneError::InvalidConfig("family_weights must be non-negative with a positive sum".into()));
        }
        if e.max_attempts == 0 {
            return Err(SceneError::InvalidConfig("max_attempts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn scene(&self, id: &str) -> Option<&Scene> {
        self.scenes.iter().find(|s| s.id == id)
    }

    /// Splits scenes into train/validation: the last `ceil(val_fraction · n)`
    /// scenes (at least one when there are two or more) are held out.
    pub fn split(&self, val_fraction: f64) -> (Vec<usize>, Vec<usize>) {
        let n = self.scenes.len();
        let mut n_val = (val_fraction * n as f64).ceil() as usize;
        if n >= 2 {
            n_val = n_val.clamp(1, n - 1);
        } else {
            n_val = 0;
        }
        let val_ids: std::collections::HashSet<&str> =
            self.scenes[n - n_val..].iter().map(|s| s.id.as_str()).collect();
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for (i, e) in self.episodes.iter().enumerate() {
            if val_ids.contains(e.scene_id.as_str()) {
                val.push(i);
            } else {
                train.push(i);
            }
        }
        (train, val)
    }
}

pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset, SceneError> {
    cfg.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut scenes = Vec::with_capacity(cfg.n_scenes);
    let mut episodes = Vec::with_capacity(cfg.n_scenes * cfg.episodes_per_scene);
    let mut failures = 0usize;
    while scenes.len() < cfg.n_scenes {
        let id = format!("scene{:04}", scenes.len());
        let seed: u64 = master.random();
        let scene = match generate_scene(&id, &cfg.scene, seed) {
            Ok(s) => s,
            Err(SceneError::PlacementFailure { .. }) if failures < 100 * cfg.n_scenes.max(1) => {
                failures += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let mut eps = Vec::with_capacity(cfg.episodes_per_scene);
        for _ in 0..cfg.episodes_per_scene {
            match generate_episode(&scene, master.random(), &cfg.episode) {
                Ok(e) => eps.push(e),
                Err(SceneError::AmbiguousEpisode(_)) => break,
                Err(e) => return Err(e),
            }
        }
        if eps.len() < cfg.episodes_per_scene {
            // a layout that cannot host enough episodes is redrawn
            failures += 1;
            if failures > 100 * cfg.n_scenes.max(1) {
                return Err(SceneError::AmbiguousEpisode(
                    "could not generate enough episodes".into(),
                ));
            }
            continue;
        }
        scenes.push(scene);
        episodes.extend(eps);
    }
    Ok(Dataset { scenes, episodes })
}

/// Serializes an episode in the annotation schema (rotation stored as yaw).
pub fn episode_record(e: &Episode) -> Value {
    let mut v = json!({
        "scene_id": e.scene_id,
        "situation": e.situation,
        "question": e.question,
        "answers": [e.answer],
        "position": {"x": e.gt.pos.x, "y": e.gt.pos.y, "z": e.gt.pos.z},
        "rotation": {"yaw": e.gt.yaw()},
        "question_type": e.question_type.name(),
    });
    if let Some(f) = e.family {
        v["family"] = json!(f.name());
    }
    v
}

pub fn write_annotations(episodes: &[Episode], mut w: impl Write) -> std::io::Result<()> {
    for e in episodes {
        serde_json::to_writer(&mut w, &episode_record(e))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn schema(line: usize, field: &str, msg: impl Into<String>) -> SceneError {
    SceneError::Schema {
        line,
        field: field.to_string(),
        msg: msg.into(),
    }
}

fn parse_record(line: usize, v: &Value) -> Result<Episode, SceneError> {
    let obj = v.as_object().ok_or_else(|| schema(line, "<record>", "expected an object"))?;
    let get = |f: &str| obj.get(f).ok_or_else(|| schema(line, f, "missing"));
    let string = |f: &str| -> Result<String, SceneError> {
        get(f)?
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| schema(line, f, "expected a string"))
    };
    let num = |o: &serde_json::Map<String, Value>, parent: &str, f: &str| -> Result<f64, SceneError> {
        let path = format!("{parent}.{f}");
        o.get(f)
            .ok_or_else(|| schema(line, &path, "missing"))?
            .as_f64()
            .ok_or_else(|| schema(line, &path, "expected a number"))
    };
    let scene_id = string("scene_id")?;
    let situation = string("situation")?;
    let question = string("question")?;
    let answers = get("answers")?
        .as_array()
        .ok_or_else(|| schema(line, "answers", "expected an array"))?;
    let answer = answers
        .first()
        .ok_or_else(|| schema(line, "answers", "empty"))?
        .as_str()
        .ok_or_else(|| schema(line, "answers[0]", "expected a string"))?
        .to_string();
    let pos = get("position")?
        .as_object()
        .ok_or_else(|| schema(line, "position", "expected an object"))?;
    let position = Vector3::new(
        num(pos, "position", "x")?,
        num(pos, "position", "y")?,
        num(pos, "position", "z")?,
    );
    let rot = get("rotation")?
        .as_object()
        .ok_or_else(|| schema(line, "rotation", "expected an object"))?;
    let gt = if rot.contains_key("yaw") {
        SituationVector::from_yaw(position, num(rot, "rotation", "yaw")?)
    } else {
        let q = Quaternion::new(
            num(rot, "rotation", "w")?,
            num(rot, "rotation", "x")?,
            num(rot, "rotation", "y")?,
            num(rot, "rotation", "z")?,
        )
        .map_err(|e| schema(line, "rotation", e.to_string()))?;
        SituationVector::from_rotation(position, &q.to_matrix())
            .map_err(|e| schema(line, "rotation", e.to_string()))?
    };
    let family = match obj.get("family") {
        None | Some(Value::Null) => None,
        Some(f) => Some(
            f.as_str()
                .and_then(QuestionFamily::parse)
                .ok_or_else(|| schema(line, "family", "unknown question family"))?,
        ),
    };
    Ok(Episode {
        scene_id,
        situation,
        question_type: QuestionType::of_question(&question),
        question,
        answer,
        gt,
        family,
    })
}

/// Reads annotation records, either one JSON object per line or a single
/// JSON array. Line numbers in errors are 1-based (array elements are
/// numbered from 1).
pub fn read_annotations(r: impl BufRead) -> Result<Vec<Episode>, SceneError> {
    let text = std::io::read_to_string(r)?;
    if text.trim_start().starts_with('[') {
        let arr: Vec<Value> =
            serde_json::from_str(&text).map_err(|e| schema(e.line(), "<file>", e.to_string()))?;
        return arr.iter().enumerate().map(|(i, v)| parse_record(i + 1, v)).collect();
    }
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(line).map_err(|e| schema(i + 1, "<record>", e.to_string()))?;
        out.push(parse_record(i + 1, &v)?);
    }
    Ok(out)
}

pub fn load_annotations(path: &Path) -> Result<Vec<Episode>, SceneError> {
    read_annotations(std::io::BufReader::new(std::fs::File::open(path)?))
}

pub fn write_scenes(scenes: &[Scene], mut w: impl Write) -> std::io::Result<()> {
    for s in scenes {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_scenes(r: impl BufRead) -> Result<Vec<Scene>, SceneError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| schema(i + 1, "<scene>", e.to_string()))?);
    }
    Ok(out)
}

pub const SCENES_FILE: &str = "scenes.jsonl";
pub const EPISODES_FILE: &str = "episodes.jsonl";

impl Dataset {
    pub fn save(&self, dir: &Path) -> Result<(), SceneError> {
        std::fs::create_dir_all(dir)?;
        let mut s = Vec::new();
        write_scenes(&self.scenes, &mut s)?;
        crate::tinynn::write_atomic(&dir.join(SCENES_FILE), &s)?;
        let mut e = Vec::new();
        write_annotations(&self.episodes, &mut e)?;
        crate::tinynn::write_atomic(&dir.join(EPISODES_FILE), &e)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, SceneError> {
        let scenes = read_scenes(std::io::BufReader::new(std::fs::File::open(dir.join(SCENES_FILE))?))?;
        let episodes = load_annotations(&dir.join(EPISODES_FILE))?;
        Ok(Self { scenes, episodes })
    }
}
