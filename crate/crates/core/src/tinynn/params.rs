//! Named parameter storage and the checkpoint file format.
//!
//! A checkpoint is two files sharing a stem: `<stem>.manifest` (text) and
//! `<stem>.bin` (raw little-endian floats, tensors concatenated in manifest
//! order). The manifest reads:
//!
//! ```text
//! situ3d-checkpoint 1
//! dtype f64le            (or f32le)
//! count <N>
//! <name> <kind> <rows> <cols> <offset-in-elements>     (N lines)
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;

use super::matrix::Matrix;
use crate::error::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Role of a parameter; decides whether weight decay applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
    Embedding,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Embedding)
    }

    fn as_str(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::Norm => "norm",
            ParamKind::Embedding => "embedding",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "weight" => ParamKind::Weight,
            "bias" => ParamKind::Bias,
            "norm" => ParamKind::Norm,
            "embedding" => ParamKind::Embedding,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub kind: ParamKind,
    pub value: Matrix,
}

/// Ordered, uniquely named parameters. Iteration follows insertion order.
#[derive(Debug, Clone, Default)]
pub struct ParameterSet {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, kind: ParamKind, value: Matrix) -> Result<ParamId, NnError> {
        if self.index.contains_key(name) {
            return Err(NnError::DuplicateParameter(name.to_string()));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.to_string(), id.0);
        self.params.push(Parameter {
            name: name.to_string(),
            kind,
            value,
        });
        Ok(id)
    }

    /// Uniform fan-in initialization, `U(-1/√fan_in, 1/√fan_in)`.
    pub fn add_uniform(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId, NnError> {
        let bound = 1.0 / (rows.max(1) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        self.add(name, ParamKind::Weight, Matrix::from_vec(rows, cols, data))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zeros_like(&self) -> Vec<Matrix> {
        self.params
            .iter()
            .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
            .collect()
    }

    pub fn save(&self, stem: &Path, dtype: FloatType) -> Result<(), NnError> {
        let mut manifest = String::new();
        writeln!(manifest, "situ3d-checkpoint 1").unwrap();
        writeln!(manifest, "dtype {}", dtype.as_str()).unwrap();
        writeln!(manifest, "count {}", self.params.len()).unwrap();
        let mut bin = Vec::new();
        let mut offset = 0usize;
        for p in &self.params {
            let (r, c) = p.value.shape();
            writeln!(manifest, "{} {} {} {} {}", p.name, p.kind.as_str(), r, c, offset).unwrap();
            for &v in p.value.data() {
                match dtype {
                    FloatType::F64 => bin.extend_from_slice(&v.to_le_bytes()),
                    FloatType::F32 => bin.extend_from_slice(&(v as f32).to_le_bytes()),
                }
            }
            offset += p.value.len();
        }
        let (man_path, bin_path) = checkpoint_paths(stem);
        write_atomic(&man_path, manifest.as_bytes())?;
        write_atomic(&bin_path, &bin)?;
        Ok(())
    }

    /// Loads a checkpoint into this set. Every parameter must be present with
    /// the same shape; extra entries in the file are an error.
    pub fn load(&mut self, stem: &Path) -> Result<(), NnError> {
        let (man_path, bin_path) = checkpoint_paths(stem);
        let manifest = std::fs::read_to_string(&man_path)?;
        let bin = std::fs::read(&bin_path)?;
        let bad = |m: String| NnError::Checkpoint(m);
        let mut lines = manifest.lines();
        if lines.next() != Some("situ3d-checkpoint 1") {
            return Err(bad("unsupported manifest header".into()));
        }
        let dtype = lines
            .next()
            .and_then(|l| l.strip_prefix("dtype "))
            .and_then(FloatType::parse)
            .ok_or_else(|| bad("missing or unknown dtype".into()))?;
        let count: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("count "))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("missing count".into()))?;
        if count != self.params.len() {
            return Err(bad(format!(
                "checkpoint has {count} tensors, model has {}",
                self.params.len()
            )));
        }
        let width = dtype.width();
        for (lineno, line) in lines.enumerate().take(count) {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 5 {
                return Err(bad(format!("manifest entry {lineno} malformed")));
            }
            let id = self
                .id(f[0])
                .ok_or_else(|| NnError::UnknownParameter(f[0].to_string()))?;
            let kind = ParamKind::parse(f[1]).ok_or_else(|| bad(format!("bad kind `{}`", f[1])))?;
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad number `{s}`")));
            let (rows, cols, offset) = (num(f[2])?, num(f[3])?, num(f[4])?);
            let p = &mut self.params[id.0];
            if p.value.shape() != (rows, cols) || p.kind != kind {
                return Err(bad(format!(
                    "`{}`: file has {kind:?} {rows}x{cols}, model has {:?} {:?}",
                    p.name,
                    p.kind,
                    p.value.shape()
                )));
            }
            let start = offset * width;
            let end = start + rows * cols * width;
            let bytes = bin
                .get(start..end)
                .ok_or_else(|| bad(format!("`{}` runs past end of data", p.name)))?;
            for (dst, chunk) in p.value.data_mut().iter_mut().zip(bytes.chunks_exact(width)) {
                *dst = match dtype {
                    FloatType::F64 => f64::from_le_bytes(chunk.try_into().unwrap()),
                    FloatType::F32 => f32::from_le_bytes(chunk.try_into().unwrap()) as f64,
                };
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FloatType {
    F32,
    F64,
}

impl FloatType {
    fn as_str(self) -> &'static str {
        match self {
            FloatType::F32 => "f32le",
            FloatType::F64 => "f64le",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "f32le" => Some(FloatType::F32),
            "f64le" => Some(FloatType::F64),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            FloatType::F32 => 4,
            FloatType::F64 => 8,
        }
    }
}

pub fn checkpoint_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("manifest"), stem.with_extension("bin"))
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> ParameterSet {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParameterSet::new();
        p.add_uniform("a.weight", 3, 4, &mut rng).unwrap();
        p.add("a.bias", ParamKind::Bias, Matrix::filled(1, 4, 0.25)).unwrap();
        p.add("ln.gain", ParamKind::Norm, Matrix::filled(1, 4, 1.0)).unwrap();
        p
    }

    #[test]
    fn names_unique_and_ordered() {
        let mut p = sample();
        assert!(matches!(
            p.add("a.bias", ParamKind::Bias, Matrix::zeros(1, 1)),
            Err(NnError::DuplicateParameter(_))
        ));
        let names: Vec<_> = p.iter().map(|(_, q)| q.name.as_str()).collect();
        assert_eq!(names, ["a.weight", "a.bias", "ln.gain"]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = std::env::temp_dir().join(format!("situ3d-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = sample();
        let stem = dir.join("model");
        p.save(&stem, FloatType::F64).unwrap();
        let mut q = sample();
        q.value_mut(ParamId(0)).data_mut().iter_mut().for_each(|v| *v = 0.0);
        q.load(&stem).unwrap();
        for ((_, a), (_, b)) in p.iter().zip(q.iter()) {
            assert_eq!(a.value, b.value);
        }

        p.save(&stem, FloatType::F32).unwrap();
        q.load(&stem).unwrap();
        for ((_, a), (_, b)) in p.iter().zip(q.iter()) {
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert!((x - y).abs() < 1e-6);
            }
        }

        let mut other = ParameterSet::new();
        other.add("a.weight", ParamKind::Weight, Matrix::zeros(2, 2)).unwrap();
        assert!(other.load(&stem).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
