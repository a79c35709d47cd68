//! Black-box embedding backends and the cosine distance between their outputs.
//!
//! A backend is any deterministic function from an aligned face crop to a
//! feature vector. The crate ships one built-in backend, [`ReferenceEmbedder`],
//! a block-mean luminance descriptor that is cheap, reproducible and reacts to
//! occlusions locally. External models plug in through [`SubprocessBackend`].

use std::fmt::Write as _;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;

use rayon::prelude::*;
use thiserror::Error;

use crate::imaging::{to_grayscale, Image, ScalarMap, FACE_SIZE};

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("feature vector is empty")]
    Empty,
    #[error("feature vector has a non-finite component at {0}")]
    NonFinite(usize),
    #[error("feature vector has zero norm")]
    ZeroNorm,
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("degenerate image: embedding has no variation")]
    DegenerateImage,
    #[error("backend failure: {0}")]
    Backend(String),
    #[error("image {index}: {source}")]
    AtIndex {
        index: usize,
        #[source]
        source: Box<EmbeddingError>,
    },
}

impl EmbeddingError {
    pub fn at_index(self, index: usize) -> Self {
        EmbeddingError::AtIndex {
            index,
            source: Box::new(self),
        }
    }

    /// The innermost error, with index annotations stripped.
    pub fn root(&self) -> &EmbeddingError {
        match self {
            EmbeddingError::AtIndex { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn is_backend_failure(&self) -> bool {
        matches!(self.root(), EmbeddingError::Backend(_))
    }
}

/// A finite, non-zero feature vector produced by a backend.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbeddingError> {
        if values.is_empty() {
            return Err(EmbeddingError::Empty);
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite(i));
        }
        if values.iter().all(|&v| v == 0.0) {
            return Err(EmbeddingError::ZeroNorm);
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// `1 - cos(f1, f2)`, clamped to `[0, 2]`.
pub fn cosine_distance(f1: &FeatureVector, f2: &FeatureVector) -> Result<f64, EmbeddingError> {
    if f1.dimension() != f2.dimension() {
        return Err(EmbeddingError::DimensionMismatch {
            left: f1.dimension(),
            right: f2.dimension(),
        });
    }
    let dot: f64 = f1.0.iter().zip(&f2.0).map(|(a, b)| a * b).sum();
    let denom = f1.norm() * f2.norm();
    if denom == 0.0 {
        return Err(EmbeddingError::ZeroNorm);
    }
    Ok((1.0 - dot / denom).clamp(0.0, 2.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Concurrency {
    /// `embed` may be called from many threads at once.
    Parallel,
    /// Calls must be queued one at a time.
    Serial,
}

pub trait EmbeddingBackend: Send + Sync {
    fn name(&self) -> &str;

    /// Output dimension, or `None` if the backend only learns it from its first output.
    fn dimension(&self) -> Option<usize>;

    fn embed(&self, img: &Image) -> Result<FeatureVector, EmbeddingError>;

    /// Embeds a batch, preserving order. Errors carry the offending index.
    fn embed_batch(&self, imgs: &[Image]) -> Result<Vec<FeatureVector>, EmbeddingError> {
        imgs.iter()
            .enumerate()
            .map(|(i, img)| self.embed(img).map_err(|e| e.at_index(i)))
            .collect()
    }

    fn concurrency(&self) -> Concurrency {
        Concurrency::Parallel
    }
}

const BLOCK: usize = 8;
const GRID: usize = FACE_SIZE / BLOCK;

/// Deterministic stand-in for a face recognition network: luminance block
/// means on a 14×14 grid, mean-centered and L2-normalized (196 dimensions).
#[derive(Clone, Copy, Debug, Default)]
pub struct ReferenceEmbedder;

impl ReferenceEmbedder {
    pub const NAME: &'static str = "reference";
    pub const DIMENSION: usize = GRID * GRID;

    /// Mean luminance of each 8×8 block, row-major. This is the embedding
    /// before centering and normalization.
    pub fn block_means(img: &Image) -> Vec<f64> {
        let gray = to_grayscale(img);
        block_means_of(&gray)
    }
}

fn block_means_of(gray: &ScalarMap) -> Vec<f64> {
    let mut out = vec![0.0; GRID * GRID];
    for by in 0..GRID {
        for bx in 0..GRID {
            let mut acc = 0.0;
            for y in by * BLOCK..(by + 1) * BLOCK {
                for x in bx * BLOCK..(bx + 1) * BLOCK {
                    acc += gray.get(x, y);
                }
            }
            out[by * GRID + bx] = acc / (BLOCK * BLOCK) as f64;
        }
    }
    out
}

impl EmbeddingBackend for ReferenceEmbedder {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn dimension(&self) -> Option<usize> {
        Some(Self::DIMENSION)
    }

    fn embed(&self, img: &Image) -> Result<FeatureVector, EmbeddingError> {
        let mut v = Self::block_means(img);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        v.iter_mut().for_each(|x| *x -= mean);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(EmbeddingError::DegenerateImage);
        }
        v.iter_mut().for_each(|x| *x /= norm);
        FeatureVector::new(v)
    }

    fn embed_batch(&self, imgs: &[Image]) -> Result<Vec<FeatureVector>, EmbeddingError> {
        imgs.par_iter()
            .enumerate()
            .map(|(i, img)| self.embed(img).map_err(|e| e.at_index(i)))
            .collect()
    }
}

/// Runs an external program per batch.
///
/// The program is invoked as `program [args..] <manifest> <output>`. The
/// manifest lists one image per line as `index<TAB>png-path`; the program must
/// write `index<TAB>v0 v1 ...` lines to the output path and exit with status 0.
#[derive(Debug)]
pub struct SubprocessBackend {
    name: String,
    program: String,
    args: Vec<String>,
    dimension: OnceLock<usize>,
}

impl SubprocessBackend {
    pub fn new(name: impl Into<String>, program: impl Into<String>, args: Vec<String>) -> Self {
        Self {
            name: name.into(),
            program: program.into(),
            args,
            dimension: OnceLock::new(),
        }
    }

    /// Parses a whitespace-separated command line. The backend is named after
    /// the program's file stem.
    pub fn from_command_line(command: &str) -> Result<Self, EmbeddingError> {
        let mut parts = command.split_whitespace().map(str::to_owned);
        let program = parts
            .next()
            .ok_or_else(|| EmbeddingError::Backend("empty backend command".into()))?;
        let name = Path::new(&program)
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("external")
            .to_owned();
        Ok(Self::new(name, program, parts.collect()))
    }

    fn parse_output(&self, text: &str, expected: usize) -> Result<Vec<FeatureVector>, EmbeddingError> {
        let mut slots: Vec<Option<FeatureVector>> = vec![None; expected];
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |what: &str| EmbeddingError::Backend(format!("output line {}: {what}", lineno + 1));
            let (index, values) = line.split_once('\t').ok_or_else(|| bad("missing tab"))?;
            let index: usize = index.trim().parse().map_err(|_| bad("bad index"))?;
            let values = values
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| bad("bad float"))?;
            let fv = FeatureVector::new(values).map_err(|e| e.at_index(index))?;
            let dim = *self.dimension.get_or_init(|| fv.dimension());
            if fv.dimension() != dim {
                return Err(EmbeddingError::DimensionMismatch {
                    left: dim,
                    right: fv.dimension(),
                }
                .at_index(index));
            }
            let slot = slots.get_mut(index).ok_or_else(|| bad("index out of range"))?;
            if slot.replace(fv).is_some() {
                return Err(bad("duplicate index"));
            }
        }
        slots
            .into_iter()
            .enumerate()
            .map(|(i, s)| s.ok_or_else(|| EmbeddingError::Backend("no output for image".into()).at_index(i)))
            .collect()
    }
}

impl EmbeddingBackend for SubprocessBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn dimension(&self) -> Option<usize> {
        self.dimension.get().copied()
    }

    fn embed(&self, img: &Image) -> Result<FeatureVector, EmbeddingError> {
        let mut out = self.embed_batch(std::slice::from_ref(img))?;
        Ok(out.remove(0))
    }

    fn embed_batch(&self, imgs: &[Image]) -> Result<Vec<FeatureVector>, EmbeddingError> {
        if imgs.is_empty() {
            return Ok(Vec::new());
        }
        let io = |e: std::io::Error| EmbeddingError::Backend(format!("io: {e}"));
        let dir = tempfile::tempdir().map_err(io)?;
        let mut manifest = String::new();
        for (i, img) in imgs.iter().enumerate() {
            let path = dir.path().join(format!("img_{i:05}.png"));
            img.save_png(&path)
                .map_err(|e| EmbeddingError::Backend(e.to_string()).at_index(i))?;
            let _ = writeln!(manifest, "{i}\t{}", path.display());
        }
        let manifest_path = dir.path().join("manifest.tsv");
        let output_path = dir.path().join("features.tsv");
        std::fs::write(&manifest_path, manifest).map_err(io)?;

        let result = Command::new(&self.program)
            .args(&self.args)
            .arg(&manifest_path)
            .arg(&output_path)
            .output()
            .map_err(|e| EmbeddingError::Backend(format!("failed to start {}: {e}", self.program)))?;
        if !result.status.success() {
            return Err(EmbeddingError::Backend(format!(
                "{} exited with {}: {}",
                self.program,
                result.status,
                String::from_utf8_lossy(&result.stderr).trim()
            )));
        }
        let text = std::fs::read_to_string(&output_path).map_err(io)?;
        self.parse_output(&text, imgs.len())
    }

    fn concurrency(&self) -> Concurrency {
        Concurrency::Serial
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fv(v: &[f64]) -> FeatureVector {
        FeatureVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn distance_landmarks() {
        assert_eq!(cosine_distance(&fv(&[1.0, 0.0]), &fv(&[1.0, 0.0])).unwrap(), 0.0);
        assert_eq!(cosine_distance(&fv(&[1.0, 0.0]), &fv(&[0.0, 1.0])).unwrap(), 1.0);
        assert_eq!(cosine_distance(&fv(&[1.0, 0.0]), &fv(&[-1.0, 0.0])).unwrap(), 2.0);
    }

    #[test]
    fn distance_errors() {
        assert!(matches!(
            cosine_distance(&fv(&[1.0, 0.0]), &fv(&[1.0, 0.0, 0.0])),
            Err(EmbeddingError::DimensionMismatch { left: 2, right: 3 })
        ));
        assert!(matches!(FeatureVector::new(vec![0.0, 0.0]), Err(EmbeddingError::ZeroNorm)));
        assert!(matches!(FeatureVector::new(vec![f64::NAN]), Err(EmbeddingError::NonFinite(0))));
        assert!(matches!(FeatureVector::new(vec![]), Err(EmbeddingError::Empty)));
    }

    #[test]
    fn reference_half_black_half_white() {
        let img = Image::from_fn(|x, _| if x < 56 { [0; 3] } else { [255; 3] });
        let f = ReferenceEmbedder.embed(&img).unwrap();
        let mut distinct: Vec<f64> = f.as_slice().to_vec();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        assert_eq!(distinct.len(), 2);
        for (i, v) in f.as_slice().iter().enumerate() {
            if i % GRID < GRID / 2 {
                assert!(*v < 0.0);
            } else {
                assert!(*v > 0.0);
            }
        }
    }

    #[test]
    fn reference_rejects_constant_images() {
        assert!(matches!(
            ReferenceEmbedder.embed(&Image::filled([90, 90, 90])),
            Err(EmbeddingError::DegenerateImage)
        ));
        let batch = vec![Image::from_fn(|x, _| [x as u8; 3]), Image::filled([1, 1, 1])];
        let err = ReferenceEmbedder.embed_batch(&batch).unwrap_err();
        assert!(matches!(err, EmbeddingError::AtIndex { index: 1, .. }));
        assert!(matches!(err.root(), EmbeddingError::DegenerateImage));
    }

    #[test]
    fn reference_block_locality() {
        let base = Image::from_fn(|x, y| [(x * 2) as u8, (y * 2) as u8, 40]);
        let mut changed = base.clone();
        for y in 24..32 {
            for x in 40..48 {
                changed.set_pixel(x, y, [255, 0, 255]);
            }
        }
        let a = ReferenceEmbedder::block_means(&base);
        let b = ReferenceEmbedder::block_means(&changed);
        let differing: Vec<usize> = (0..a.len()).filter(|&i| a[i] != b[i]).collect();
        assert_eq!(differing, vec![3 * GRID + 5]);
    }

    fn arb_image() -> impl Strategy<Value = Image> {
        proptest::collection::vec(any::<u8>(), FACE_SIZE * FACE_SIZE * 3)
            .prop_map(|v| Image::from_raw(v).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn reference_output_is_centered_unit(img in arb_image()) {
            let f = ReferenceEmbedder.embed(&img).unwrap();
            prop_assert_eq!(f.dimension(), 196);
            prop_assert!((f.norm() - 1.0).abs() < 1e-12);
            let mean = f.as_slice().iter().sum::<f64>() / 196.0;
            prop_assert!(mean.abs() < 1e-12);
            prop_assert_eq!(ReferenceEmbedder.embed(&img).unwrap(), f);
        }

        #[test]
        fn distance_symmetric_and_scale_invariant(
            a in proptest::collection::vec(-5.0f64..5.0, 8),
            b in proptest::collection::vec(-5.0f64..5.0, 8),
            c in 0.01f64..100.0,
        ) {
            prop_assume!(a.iter().any(|v| *v != 0.0) && b.iter().any(|v| *v != 0.0));
            let fa = fv(&a);
            let fb = fv(&b);
            prop_assert_eq!(cosine_distance(&fa, &fb).unwrap(), cosine_distance(&fb, &fa).unwrap());
            let scaled = fv(&a.iter().map(|v| v * c).collect::<Vec<_>>());
            prop_assert!(cosine_distance(&fa, &scaled).unwrap() < 1e-12);
            let d = cosine_distance(&fa, &fb).unwrap();
            prop_assert!((0.0..=2.0).contains(&d));
        }
    }
}
