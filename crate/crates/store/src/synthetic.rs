//! Labelled synthetic datasets for smoke tests and demos.

use std::path::{Path, PathBuf};

use xverify_core::confidence::FOLDS;
use xverify_core::synthetic::synthetic_face_variant;
use xverify_core::imaging::ImagingError;

use crate::pairs::{write_pairs, PairLabel, PairRecord, PairsError};

#[derive(Debug, thiserror::Error)]
pub enum SyntheticError {
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Pairs(#[from] PairsError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Writes `n_pairs` pairs of synthetic faces under `dir/images/` and a pairs
/// file `dir/<name>.csv`. Pairs alternate genuine/imposter and are spread
/// round-robin over the ten folds. Returns the pairs file path.
pub fn write_dataset(dir: &Path, name: &str, n_pairs: usize) -> Result<PathBuf, SyntheticError> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|source| SyntheticError::Io {
        path: images.clone(),
        source,
    })?;
    let mut pairs = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let identity = i as u64 + 1;
        let genuine = i % 2 == 0;
        let other = if genuine { identity } else { identity + 10_000 };
        let a = format!("images/{i:04}_a.png");
        let b = format!("images/{i:04}_b.png");
        synthetic_face_variant(identity, 1).save_png(dir.join(&a))?;
        synthetic_face_variant(other, 2).save_png(dir.join(&b))?;
        pairs.push(PairRecord {
            pair_id: format!("pair_{i:04}"),
            path1: a.into(),
            path2: b.into(),
            label: if genuine { PairLabel::Genuine } else { PairLabel::Imposter },
            fold: ((i / 2) % FOLDS) as u8,
            dataset: name.to_owned(),
        });
    }
    let csv = dir.join(format!("{name}.csv"));
    write_pairs(&csv, &pairs)?;
    Ok(csv)
}
