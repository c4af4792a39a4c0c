//! Point-cloud voxelization, bird's-eye-view projection and token sampling.
//!
//! Each occupied voxel carries a hand-crafted feature
//! `[ln(1 + count), mean rgb (3), mean height (1), category histogram (K)]`,
//! so the token feature width is `5 + K`. Floor and wall points are
//! unlabeled (`category = -1`) and only contribute to the first five entries.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::error::VoxelError;

/// Number of non-category entries at the front of every voxel feature.
pub const BASE_FEATURES: usize = 5;

pub fn feature_dim(num_categories: usize) -> usize {
    BASE_FEATURES + num_categories
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub colors: Vec<[f64; 3]>,
    /// Category id per point, `-1` when unlabeled.
    pub categories: Vec<i32>,
}

impl PointCloud {
    pub fn new(
        points: Vec<Vector3<f64>>,
        colors: Vec<[f64; 3]>,
        categories: Vec<i32>,
    ) -> Result<Self, VoxelError> {
        if points.is_empty() {
            return Err(VoxelError::EmptyCloud);
        }
        if colors.len() != points.len() || categories.len() != points.len() {
            return Err(VoxelError::Format(format!(
                "attribute lengths differ: {} points, {} colors, {} categories",
                points.len(),
                colors.len(),
                categories.len()
            )));
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(VoxelError::NonFinite(i));
        }
        Ok(Self {
            points,
            colors,
            categories,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Axis-aligned bounds `(min, max)`.
    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in &self.points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (lo, hi)
    }

    /// Writes the text cloud format:
    ///
    /// ```text
    /// # situ3d cloud v1
    /// count <N>
    /// fields x y z r g b category
    /// <x> <y> <z> <r> <g> <b> <category>     (N rows)
    /// ```
    ///
    /// Floats use the shortest representation that parses back exactly.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "# situ3d cloud v1")?;
        writeln!(w, "count {}", self.len())?;
        writeln!(w, "fields x y z r g b category")?;
        for ((p, c), k) in self.points.iter().zip(&self.colors).zip(&self.categories) {
            writeln!(w, "{} {} {} {} {} {} {}", p.x, p.y, p.z, c[0], c[1], c[2], k)?;
        }
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self, VoxelError> {
        let mut lines = BufReader::new(r).lines();
        let mut next = |what: &str| -> Result<String, VoxelError> {
            lines
                .next()
                .ok_or_else(|| VoxelError::Format(format!("missing {what}")))?
                .map_err(VoxelError::from)
        };
        let magic = next("header")?;
        if magic.trim() != "# situ3d cloud v1" {
            return Err(VoxelError::Format(format!("bad header `{magic}`")));
        }
        let count_line = next("count line")?;
        let count: usize = count_line
            .strip_prefix("count ")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| VoxelError::Format(format!("bad count line `{count_line}`")))?;
        let fields = next("fields line")?;
        if fields.trim() != "fields x y z r g b category" {
            return Err(VoxelError::Format(format!("unsupported fields `{fields}`")));
        }
        let mut points = Vec::with_capacity(count);
        let mut colors = Vec::with_capacity(count);
        let mut categories = Vec::with_capacity(count);
        for row in 0..count {
            let line = next("point row")?;
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 7 {
                return Err(VoxelError::Format(format!(
                    "row {row}: expected 7 values, got {}",
                    parts.len()
                )));
            }
            let f = |i: usize| -> Result<f64, VoxelError> {
                parts[i]
                    .parse()
                    .map_err(|_| VoxelError::Format(format!("row {row}: bad number `{}`", parts[i])))
            };
            points.push(Vector3::new(f(0)?, f(1)?, f(2)?));
            colors.push([f(3)?, f(4)?, f(5)?]);
            categories.push(
                parts[6]
                    .parse()
                    .map_err(|_| VoxelError::Format(format!("row {row}: bad category")))?,
            );
        }
        Self::new(points, colors, categories)
    }

    pub fn save(&self, path: &Path) -> Result<(), VoxelError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, VoxelError> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

/// Running statistics of the points inside one voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelStats {
    pub count: usize,
    pub color_sum: [f64; 3],
    pub z_sum: f64,
    pub category_counts: Vec<u32>,
}

impl VoxelStats {
    fn new(num_categories: usize) -> Self {
        Self {
            count: 0,
            color_sum: [0.0; 3],
            z_sum: 0.0,
            category_counts: vec![0; num_categories],
        }
    }

    pub fn mean_z(&self) -> f64 {
        self.z_sum / self.count as f64
    }

    /// Voxel feature relative to a floor height `z0`.
    pub fn feature(&self, z0: f64) -> Vec<f64> {
        let n = self.count as f64;
        let mut f = Vec::with_capacity(BASE_FEATURES + self.category_counts.len());
        f.push(n.ln_1p());
        f.extend(self.color_sum.iter().map(|c| c / n));
        f.push(self.mean_z() - z0);
        f.extend(self.category_counts.iter().map(|&c| c as f64 / n));
        f
    }
}

pub type CellIndex = (i64, i64, i64);

#[derive(Debug, Clone)]
pub struct VoxelGrid {
    pub voxel_size: f64,
    /// Lattice-aligned minimum corner.
    pub origin: Vector3<f64>,
    pub num_categories: usize,
    pub bounds: (Vector3<f64>, Vector3<f64>),
    pub cells: BTreeMap<CellIndex, VoxelStats>,
}

impl VoxelGrid {
    pub fn cell_center(&self, idx: CellIndex) -> Vector3<f64> {
        self.origin
            + Vector3::new(idx.0 as f64 + 0.5, idx.1 as f64 + 0.5, idx.2 as f64 + 0.5)
                * self.voxel_size
    }

    pub fn cell_of(&self, p: &Vector3<f64>) -> CellIndex {
        cell_index(p, &self.origin, self.voxel_size)
    }
}

fn cell_index(p: &Vector3<f64>, origin: &Vector3<f64>, size: f64) -> CellIndex {
    let q = (p - origin) / size;
    (q.x.floor() as i64, q.y.floor() as i64, q.z.floor() as i64)
}

/// Bins the cloud into cubes of `voxel_size` meters. Categories outside
/// `0..num_categories` are treated as unlabeled.
pub fn voxelize(
    pc: &PointCloud,
    voxel_size: f64,
    num_categories: usize,
) -> Result<VoxelGrid, VoxelError> {
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(VoxelError::InvalidVoxelSize(voxel_size));
    }
    if pc.is_empty() {
        return Err(VoxelError::EmptyCloud);
    }
    let bounds = pc.bounds();
    let origin = (bounds.0 / voxel_size).map(f64::floor) * voxel_size;
    let mut cells: BTreeMap<CellIndex, VoxelStats> = BTreeMap::new();
    for ((p, c), &k) in pc.points.iter().zip(&pc.colors).zip(&pc.categories) {
        let st = cells
            .entry(cell_index(p, &origin, voxel_size))
            .or_insert_with(|| VoxelStats::new(num_categories));
        st.count += 1;
        for (s, v) in st.color_sum.iter_mut().zip(c) {
            *s += v;
        }
        st.z_sum += p.z;
        if k >= 0 && (k as usize) < num_categories {
            st.category_counts[k as usize] += 1;
        }
    }
    Ok(VoxelGrid {
        voxel_size,
        origin,
        num_categories,
        bounds,
        cells,
    })
}

/// One ground-plane column of the projected grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BevColumn {
    pub i: i64,
    pub j: i64,
    /// Cell-center x, y and mean z of the occupied voxel centers.
    pub anchor: Vector3<f64>,
    pub feature: Vec<f64>,
    /// Total number of points in the column.
    pub occupancy: usize,
    pub z_range: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct BevMap {
    pub voxel_size: f64,
    pub origin: Vector3<f64>,
    pub bounds: (Vector3<f64>, Vector3<f64>),
    pub feature_dim: usize,
    /// Sorted by `(i, j)`.
    pub columns: Vec<BevColumn>,
}

/// Averages the occupied voxel features of every `(i, j)` column.
pub fn bev_project(grid: &VoxelGrid) -> BevMap {
    let z0 = grid.bounds.0.z;
    let feature_dim = feature_dim(grid.num_categories);
    let mut columns: Vec<BevColumn> = Vec::new();
    let mut n_vox = 0usize;
    // BTreeMap order groups every (i, j) column contiguously
    for (&(i, j, k), st) in &grid.cells {
        let zc = grid.cell_center((i, j, k)).z;
        let start_new = columns.last().is_none_or(|c| (c.i, c.j) != (i, j));
        if start_new {
            if let Some(prev) = columns.last_mut() {
                finish_column(prev, n_vox);
            }
            let center = grid.cell_center((i, j, 0));
            columns.push(BevColumn {
                i,
                j,
                anchor: Vector3::new(center.x, center.y, 0.0),
                feature: vec![0.0; feature_dim],
                occupancy: 0,
                z_range: (zc, zc),
            });
            n_vox = 0;
        }
        let col = columns.last_mut().expect("column pushed above");
        for (a, v) in col.feature.iter_mut().zip(st.feature(z0)) {
            *a += v;
        }
        col.anchor.z += zc;
        col.occupancy += st.count;
        col.z_range.0 = col.z_range.0.min(zc);
        col.z_range.1 = col.z_range.1.max(zc);
        n_vox += 1;
    }
    if let Some(prev) = columns.last_mut() {
        finish_column(prev, n_vox);
    }
    BevMap {
        voxel_size: grid.voxel_size,
        origin: grid.origin,
        bounds: grid.bounds,
        feature_dim,
        columns,
    }
}

fn finish_column(col: &mut BevColumn, n_vox: usize) {
    let n = n_vox as f64;
    col.feature.iter_mut().for_each(|v| *v /= n);
    col.anchor.z /= n;
}

/// Fixed-size set of visual tokens. Rows past the real tokens are padding.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet {
    pub anchors: Vec<Vector3<f64>>,
    /// Row-major `N_v × feature_dim`.
    pub features: Vec<f64>,
    pub feature_dim: usize,
    /// `true` for real tokens, `false` for padding.
    pub real: Vec<bool>,
    /// Horizontal spacing of the token grid (the voxel size).
    pub pitch: f64,
    pub bounds: (Vector3<f64>, Vector3<f64>),
}

impl TokenSet {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn num_real(&self) -> usize {
        self.real.iter().filter(|&&r| r).count()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    /// Anchors mapped into `[-1, 1]³` by the scene bounding box.
    pub fn normalized_anchors(&self) -> Vec<Vector3<f64>> {
        let (lo, hi) = self.bounds;
        let mid = (lo + hi) / 2.0;
        let half = ((hi - lo) / 2.0).map(|v| v.max(1e-9));
        self.anchors
            .iter()
            .map(|a| (a - mid).component_div(&half))
            .collect()
    }

    /// Diagonal of one token cell on the ground plane.
    pub fn cell_diagonal(&self) -> f64 {
        self.pitch * std::f64::consts::SQRT_2
    }
}

/// Keeps the `n_tokens` columns with the highest point count (ties by
/// lexicographic `(i, j)`), emitted in `(i, j)` order and padded with masked
/// zero tokens when the map has fewer columns.
pub fn sample_tokens(bev: &BevMap, n_tokens: usize) -> TokenSet {
    assert!(n_tokens >= 1, "token budget must be at least 1");
    let mut order: Vec<usize> = (0..bev.columns.len()).collect();
    order.sort_by(|&a, &b| {
        let (ca, cb) = (&bev.columns[a], &bev.columns[b]);
        cb.occupancy
            .cmp(&ca.occupancy)
            .then((ca.i, ca.j).cmp(&(cb.i, cb.j)))
    });
    order.truncate(n_tokens);
    order.sort_unstable();

    let mut anchors = Vec::with_capacity(n_tokens);
    let mut features = Vec::with_capacity(n_tokens * bev.feature_dim);
    let mut real = Vec::with_capacity(n_tokens);
    for &c in &order {
        let col = &bev.columns[c];
        anchors.push(col.anchor);
        features.extend_from_slice(&col.feature);
        real.push(true);
    }
    while anchors.len() < n_tokens {
        anchors.push(Vector3::zeros());
        features.extend(std::iter::repeat_n(0.0, bev.feature_dim));
        real.push(false);
    }
    TokenSet {
        anchors,
        features,
        feature_dim: bev.feature_dim,
        real,
        pitch: bev.voxel_size,
        bounds: bev.bounds,
    }
}

/// Voxelize, project and sample in one call.
pub fn tokenize(
    pc: &PointCloud,
    voxel_size: f64,
    num_categories: usize,
    n_tokens: usize,
) -> Result<TokenSet, VoxelError> {
    let grid = voxelize(pc, voxel_size, num_categories)?;
    Ok(sample_tokens(&bev_project(&grid), n_tokens))
}
