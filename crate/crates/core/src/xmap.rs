//! Similarity maps and blended explanation images (X-Maps) for an image pair.
//!
//! For every patch scale both images are swept with occlusions, the occluded
//! images are embedded, and the distances selected by a [`MethodKind`] are
//! compared with the distance of the unoccluded pair. The deviations weight the
//! occlusion masks, giving a signed map per image: positive where occluding
//! pushed the pair apart (the region was similar), negative where it pulled
//! them together (the region was dissimilar).

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cosine_distance, Concurrency, EmbeddingBackend, EmbeddingError, FeatureVector};
use crate::imaging::{
    diverging_color, gaussian_blur, hls_to_rgb, normalize_signed, odd_kernel, rgb_to_hls, rgb_to_hsv, Hls, Image,
    ImagingError, ScalarMap,
};
use crate::occlusion::{apply_patch, Mask, OcclusionError, PatchSpec};

/// Occlusions are generated and embedded in chunks of this size, so a default
/// sweep (N ≤ 441) is a single backend call.
const EMBED_CHUNK: usize = 1024;

#[derive(Debug, Error)]
pub enum XMapError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Occlusion(#[from] OcclusionError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error("embedding image {image}: {source}")]
    Source {
        image: u8,
        #[source]
        source: EmbeddingError,
    },
    #[error("embedding image {image}, patch size {patch_size}, occlusion {index}: {source}")]
    Occluded {
        image: u8,
        patch_size: usize,
        index: usize,
        #[source]
        source: EmbeddingError,
    },
    #[error(transparent)]
    Distance(EmbeddingError),
}

impl XMapError {
    pub fn embedding_error(&self) -> Option<&EmbeddingError> {
        match self {
            XMapError::Source { source, .. } | XMapError::Occluded { source, .. } | XMapError::Distance(source) => {
                Some(source)
            }
            _ => None,
        }
    }
}

/// Distance-selection scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MethodKind {
    /// Both images occluded; each occlusion compared with all occlusions of
    /// the other image and averaged.
    #[serde(rename = "I")]
    I,
    /// One image occluded, compared with the other unoccluded image.
    #[serde(rename = "II")]
    II,
    /// Co-located occlusions in both images. Yields identical maps for both.
    #[serde(rename = "III")]
    III,
}

impl MethodKind {
    pub const ALL: [MethodKind; 3] = [MethodKind::I, MethodKind::II, MethodKind::III];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodKind::I => "I",
            MethodKind::II => "II",
            MethodKind::III => "III",
        }
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodKind {
    type Err = XMapError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "I" | "1" => Ok(MethodKind::I),
            "II" | "2" => Ok(MethodKind::II),
            "III" | "3" => Ok(MethodKind::III),
            other => Err(XMapError::InvalidArgument(format!("unknown method {other:?}"))),
        }
    }
}

/// Selects the per-occlusion distances `(D1, D2)`.
///
/// `f1`/`f2` are the features of the unoccluded images; only Method II uses
/// them.
pub fn select_distances(
    feats1: &[FeatureVector],
    feats2: &[FeatureVector],
    f1: &FeatureVector,
    f2: &FeatureVector,
    method: MethodKind,
) -> Result<(Vec<f64>, Vec<f64>), XMapError> {
    let n = feats1.len();
    if n == 0 || feats2.len() != n {
        return Err(XMapError::InvalidArgument(format!(
            "feature lists must be non-empty and equal length, got {} and {}",
            n,
            feats2.len()
        )));
    }
    let d = |a: &FeatureVector, b: &FeatureVector| cosine_distance(a, b).map_err(XMapError::Distance);
    match method {
        MethodKind::I => {
            let matrix: Vec<Vec<f64>> = feats1
                .par_iter()
                .map(|a| feats2.iter().map(|b| d(a, b)).collect::<Result<Vec<_>, _>>())
                .collect::<Result<_, _>>()?;
            let nf = n as f64;
            let d1 = matrix.iter().map(|row| row.iter().sum::<f64>() / nf).collect();
            let mut col_sums = vec![0.0; n];
            for row in &matrix {
                for (acc, v) in col_sums.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            let d2 = col_sums.into_iter().map(|s| s / nf).collect();
            Ok((d1, d2))
        }
        MethodKind::II => {
            let d1 = feats1.iter().map(|a| d(a, f2)).collect::<Result<_, _>>()?;
            let d2 = feats2.iter().map(|b| d(f1, b)).collect::<Result<_, _>>()?;
            Ok((d1, d2))
        }
        MethodKind::III => {
            let d1: Vec<f64> = feats1
                .iter()
                .zip(feats2)
                .map(|(a, b)| d(a, b))
                .collect::<Result<_, _>>()?;
            Ok((d1.clone(), d1))
        }
    }
}

/// `S = Σᵢ (dᵢ − d_orig)·Mᵢ / N`.
pub fn similarity_map(distances: &[f64], masks: &[Mask], d_orig: f64) -> Result<ScalarMap, XMapError> {
    if distances.is_empty() || distances.len() != masks.len() {
        return Err(XMapError::InvalidArgument(format!(
            "{} distances for {} masks",
            distances.len(),
            masks.len()
        )));
    }
    let mut acc = ScalarMap::zeros();
    for (d, mask) in distances.iter().zip(masks) {
        mask.accumulate_into(&mut acc, d - d_orig);
    }
    Ok(acc.scaled(1.0 / distances.len() as f64))
}

/// Patch-area weighted mean: `Σᵢ Sᵢ / (pᵢ² · |p|)`.
pub fn merge_scales(maps: &[ScalarMap], sizes: &[usize]) -> Result<ScalarMap, XMapError> {
    if maps.is_empty() || maps.len() != sizes.len() {
        return Err(XMapError::InvalidArgument(format!(
            "{} maps for {} patch sizes",
            maps.len(),
            sizes.len()
        )));
    }
    let scales = maps.len() as f64;
    let mut merged = ScalarMap::zeros();
    for (map, &p) in maps.iter().zip(sizes) {
        merged.add_scaled(map, 1.0 / ((p * p) as f64 * scales));
    }
    Ok(merged)
}

/// Blurs with an `s×s` kernel (rounded up to odd) and `σ = s`, then scales
/// to `[-1, 1]`.
pub fn postprocess(map: &ScalarMap, stride: usize) -> Result<ScalarMap, XMapError> {
    let blurred = gaussian_blur(map, odd_kernel(stride.max(1)), stride.max(1) as f64)?;
    Ok(normalize_signed(&blurred))
}

/// Colors `img` by `map`: hue and saturation come from the diverging
/// rendering of the map, luminance from the image.
pub fn blend(img: &Image, map: &ScalarMap) -> Image {
    Image::from_fn(|x, y| {
        let color = diverging_color(map.get(x, y));
        hls_to_rgb(Hls {
            hue: rgb_to_hls(color).hue,
            luminance: rgb_to_hls(img.pixel(x, y)).luminance,
            saturation: rgb_to_hsv(color).saturation,
        })
    })
}

/// An image pair bound to a backend, with the unoccluded features cached.
pub struct PairExplainContext<'a> {
    pub img1: Image,
    pub img2: Image,
    pub backend: &'a dyn EmbeddingBackend,
    pub f1: FeatureVector,
    pub f2: FeatureVector,
    pub d_orig: f64,
    pub specs: Vec<PatchSpec>,
}

impl<'a> PairExplainContext<'a> {
    pub fn new(
        img1: Image,
        img2: Image,
        backend: &'a dyn EmbeddingBackend,
        specs: Vec<PatchSpec>,
    ) -> Result<Self, XMapError> {
        if specs.is_empty() {
            return Err(XMapError::InvalidArgument("at least one patch spec is required".into()));
        }
        for spec in &specs {
            spec.validate()?;
        }
        let f1 = backend.embed(&img1).map_err(|source| XMapError::Source { image: 1, source })?;
        let f2 = backend.embed(&img2).map_err(|source| XMapError::Source { image: 2, source })?;
        let d_orig = cosine_distance(&f1, &f2).map_err(XMapError::Distance)?;
        Ok(Self {
            img1,
            img2,
            backend,
            f1,
            f2,
            d_orig,
            specs,
        })
    }

    /// Stride used for the final blur: the largest stride among the specs.
    pub fn blur_stride(&self) -> usize {
        self.specs.iter().map(|s| s.stride).max().unwrap_or(PatchSpec::DEFAULT_STRIDE)
    }
}

/// Raw similarity maps of one patch scale.
#[derive(Clone, Debug)]
pub struct ScaleMaps {
    pub spec: PatchSpec,
    pub maps: [ScalarMap; 2],
}

#[derive(Clone, Debug)]
pub struct XMapResult {
    pub method: MethodKind,
    pub d_orig: f64,
    /// Merged, blurred and normalized maps in `[-1, 1]`.
    pub maps: [ScalarMap; 2],
    /// Merged maps before blur and normalization.
    pub merged: [ScalarMap; 2],
    pub blended: [Image; 2],
    pub per_scale: Vec<ScaleMaps>,
}

/// Features and masks of every occlusion of `img`, in sweep order.
pub fn sweep_features(
    img: &Image,
    spec: &PatchSpec,
    backend: &dyn EmbeddingBackend,
    image_no: u8,
) -> Result<(Vec<FeatureVector>, Vec<Mask>), XMapError> {
    spec.validate()?;
    let positions: Vec<(usize, usize)> = spec.positions().collect();
    let mut feats = Vec::with_capacity(positions.len());
    let mut masks = Vec::with_capacity(positions.len());
    for (chunk_no, chunk) in positions.chunks(EMBED_CHUNK).enumerate() {
        let (images, chunk_masks): (Vec<Image>, Vec<Mask>) = chunk
            .par_iter()
            .map(|&(x, y)| apply_patch(img, x, y, spec))
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .unzip();
        let embedded = backend.embed_batch(&images).map_err(|source| {
            let (offset, source) = match source {
                EmbeddingError::AtIndex { index, source } => (index, *source),
                other => (0, other),
            };
            XMapError::Occluded {
                image: image_no,
                patch_size: spec.size,
                index: chunk_no * EMBED_CHUNK + offset,
                source,
            }
        })?;
        feats.extend(embedded);
        masks.extend(chunk_masks);
    }
    Ok((feats, masks))
}

struct ScaleSweep {
    spec: PatchSpec,
    feats: [Vec<FeatureVector>; 2],
    masks: [Vec<Mask>; 2],
}

fn sweep_scale(ctx: &PairExplainContext<'_>, spec: &PatchSpec) -> Result<ScaleSweep, XMapError> {
    let (feats1, masks1) = sweep_features(&ctx.img1, spec, ctx.backend, 1)?;
    let (feats2, masks2) = sweep_features(&ctx.img2, spec, ctx.backend, 2)?;
    Ok(ScaleSweep {
        spec: spec.clone(),
        feats: [feats1, feats2],
        masks: [masks1, masks2],
    })
}

fn scale_maps(ctx: &PairExplainContext<'_>, sweep: &ScaleSweep, method: MethodKind) -> Result<ScaleMaps, XMapError> {
    let [feats1, feats2] = &sweep.feats;
    let (d1, d2) = select_distances(feats1, feats2, &ctx.f1, &ctx.f2, method)?;
    let s1 = similarity_map(&d1, &sweep.masks[0], ctx.d_orig)?;
    let s2 = if method == MethodKind::III {
        s1.clone()
    } else {
        similarity_map(&d2, &sweep.masks[1], ctx.d_orig)?
    };
    Ok(ScaleMaps {
        spec: sweep.spec.clone(),
        maps: [s1, s2],
    })
}

fn finish(ctx: &PairExplainContext<'_>, method: MethodKind, per_scale: Vec<ScaleMaps>) -> Result<XMapResult, XMapError> {
    let sizes: Vec<usize> = per_scale.iter().map(|s| s.spec.size).collect();
    let merge_side = |side: usize| {
        let maps: Vec<ScalarMap> = per_scale.iter().map(|s| s.maps[side].clone()).collect();
        merge_scales(&maps, &sizes)
    };
    let merged1 = merge_side(0)?;
    let stride = ctx.blur_stride();
    let map1 = postprocess(&merged1, stride)?;
    let (merged2, map2) = if method == MethodKind::III {
        (merged1.clone(), map1.clone())
    } else {
        let merged2 = merge_side(1)?;
        let map2 = postprocess(&merged2, stride)?;
        (merged2, map2)
    };
    let blended = [blend(&ctx.img1, &map1), blend(&ctx.img2, &map2)];
    Ok(XMapResult {
        method,
        d_orig: ctx.d_orig,
        maps: [map1, map2],
        merged: [merged1, merged2],
        blended,
        per_scale,
    })
}

pub fn explain_pair(ctx: &PairExplainContext<'_>, method: MethodKind) -> Result<XMapResult, XMapError> {
    let mut results = explain_pair_methods(ctx, &[method])?;
    Ok(results.remove(0))
}

/// Explains a pair under several methods while sweeping and embedding each
/// scale only once. Results follow the order of `methods`.
pub fn explain_pair_methods(ctx: &PairExplainContext<'_>, methods: &[MethodKind]) -> Result<Vec<XMapResult>, XMapError> {
    if methods.is_empty() {
        return Err(XMapError::InvalidArgument("at least one method is required".into()));
    }
    let sweeps: Vec<ScaleSweep> = match ctx.backend.concurrency() {
        Concurrency::Parallel => ctx
            .specs
            .par_iter()
            .map(|spec| sweep_scale(ctx, spec))
            .collect::<Result<_, _>>()?,
        Concurrency::Serial => ctx
            .specs
            .iter()
            .map(|spec| sweep_scale(ctx, spec))
            .collect::<Result<_, _>>()?,
    };
    methods
        .iter()
        .map(|&method| {
            let per_scale = sweeps
                .iter()
                .map(|sweep| scale_maps(ctx, sweep, method))
                .collect::<Result<Vec<_>, _>>()?;
            finish(ctx, method, per_scale)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::ReferenceEmbedder;
    use crate::imaging::FACE_SIZE;

    fn fv(v: &[f64]) -> FeatureVector {
        FeatureVector::new(v.to_vec()).unwrap()
    }

    fn face(seed: u32) -> Image {
        Image::from_fn(|x, y| {
            let v = ((x as u32 * 7 + y as u32 * 13 + seed * 31) * (seed + 3)) % 251;
            [v as u8, (v / 2) as u8, (255 - v) as u8]
        })
    }

    #[test]
    fn method_names_parse() {
        for m in MethodKind::ALL {
            assert_eq!(m.as_str().parse::<MethodKind>().unwrap(), m);
        }
        assert!("IV".parse::<MethodKind>().is_err());
    }

    #[test]
    fn single_occlusion_methods_agree() {
        let a = [fv(&[1.0, 0.2])];
        let b = [fv(&[0.3, 1.0])];
        let f = fv(&[1.0, 1.0]);
        let one = select_distances(&a, &b, &f, &f, MethodKind::I).unwrap();
        let three = select_distances(&a, &b, &f, &f, MethodKind::III).unwrap();
        assert_eq!(one, three);
    }

    #[test]
    fn method_one_matches_double_loop() {
        let f1s = [fv(&[1.0, 0.0, 0.5]), fv(&[0.2, 1.0, 0.0])];
        let f2s = [fv(&[0.0, 1.0, 1.0]), fv(&[1.0, 1.0, -0.3])];
        let f = fv(&[1.0, 1.0, 1.0]);
        let (d1, d2) = select_distances(&f1s, &f2s, &f, &f, MethodKind::I).unwrap();
        for i in 0..2 {
            let mut row = 0.0;
            let mut col = 0.0;
            for j in 0..2 {
                row += cosine_distance(&f1s[i], &f2s[j]).unwrap();
                col += cosine_distance(&f1s[j], &f2s[i]).unwrap();
            }
            assert!((d1[i] - row / 2.0).abs() < 1e-15);
            assert!((d2[i] - col / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn method_two_ignores_other_occlusions() {
        let f1s = [fv(&[1.0, 0.0]), fv(&[0.5, 0.5])];
        let f2s = [fv(&[0.0, 1.0]), fv(&[1.0, 1.0])];
        let mutated = [fv(&[-1.0, 3.0]), fv(&[2.0, -1.0])];
        let f1 = fv(&[1.0, 0.1]);
        let f2 = fv(&[0.1, 1.0]);
        let (a, _) = select_distances(&f1s, &f2s, &f1, &f2, MethodKind::II).unwrap();
        let (b, _) = select_distances(&f1s, &mutated, &f1, &f2, MethodKind::II).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn selection_rejects_mismatched_lengths() {
        let f = fv(&[1.0]);
        assert!(select_distances(std::slice::from_ref(&f), &[], &f, &f, MethodKind::III).is_err());
        assert!(select_distances(&[], &[], &f, &f, MethodKind::I).is_err());
    }

    #[test]
    fn similarity_map_single_term() {
        let spec = PatchSpec::new(7, 5);
        let (_, mask) = apply_patch(&face(1), 10, 20, &spec).unwrap();
        let s = similarity_map(&[0.4], &[mask], 0.3).unwrap();
        for y in 0..FACE_SIZE {
            for x in 0..FACE_SIZE {
                let inside = (10..17).contains(&x) && (20..27).contains(&y);
                let expected = if inside { 0.1 } else { 0.0 };
                assert!((s.get(x, y) - expected).abs() < 1e-12);
            }
        }
        let (_, mask) = apply_patch(&face(1), 0, 0, &spec).unwrap();
        assert_eq!(similarity_map(&[0.3, 0.3], &[mask.clone(), mask.clone()], 0.3).unwrap(), ScalarMap::zeros());
        assert!(similarity_map(&[0.3], &[mask.clone(), mask], 0.3).is_err());
    }

    #[test]
    fn merge_weights() {
        let ones = vec![ScalarMap::constant(1.0); 3];
        let merged = merge_scales(&ones, &[7, 14, 28]).unwrap();
        let expected = 1.0 / 147.0 + 1.0 / 588.0 + 1.0 / 2352.0;
        assert!((merged.get(0, 0) - expected).abs() < 1e-15);
        assert!((expected - 0.008928).abs() < 1e-6);

        let m = ScalarMap::from_fn(|x, y| (x as f64 - y as f64) * 0.01);
        let single = merge_scales(std::slice::from_ref(&m), &[7]).unwrap();
        assert!((single.get(100, 3) - m.get(100, 3) / 49.0).abs() < 1e-15);
        assert_eq!(merge_scales(&[ScalarMap::zeros()], &[14]).unwrap(), ScalarMap::zeros());
        assert!(merge_scales(&[m], &[7, 14]).is_err());
    }

    #[test]
    fn merge_is_linear() {
        let maps = vec![
            ScalarMap::from_fn(|x, _| x as f64),
            ScalarMap::from_fn(|_, y| -(y as f64)),
        ];
        let scaled: Vec<_> = maps.iter().map(|m| m.scaled(-2.5)).collect();
        let a = merge_scales(&scaled, &[7, 28]).unwrap();
        let b = merge_scales(&maps, &[7, 28]).unwrap().scaled(-2.5);
        for (u, v) in a.values().iter().zip(b.values()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn postprocess_contract() {
        assert_eq!(postprocess(&ScalarMap::zeros(), 5).unwrap(), ScalarMap::zeros());
        let mut impulse = ScalarMap::zeros();
        impulse.set(30, 70, 0.02);
        let out = postprocess(&impulse, 5).unwrap();
        assert_eq!(out.max_abs(), 1.0);
        assert_eq!(out.argmax_abs(), (30, 70));
        // smooth: neighbours are non-zero
        assert!(out.get(31, 70) > 0.0 && out.get(30, 72) > 0.0);
    }

    #[test]
    fn blend_neutral_and_green() {
        let img = face(4);
        let neutral = blend(&img, &ScalarMap::zeros());
        for y in (0..FACE_SIZE).step_by(7) {
            for x in (0..FACE_SIZE).step_by(5) {
                let p = neutral.pixel(x, y);
                assert_eq!(rgb_to_hsv(p).saturation, 0.0);
                let l0 = rgb_to_hls(img.pixel(x, y)).luminance;
                assert!((rgb_to_hls(p).luminance - l0).abs() <= 1.0 / 255.0);
            }
        }
        let green = blend(&img, &ScalarMap::constant(1.0));
        for p in green.pixels() {
            let hls = rgb_to_hls(p);
            if hls.saturation > 0.0 {
                assert!((hls.hue - 1.0 / 3.0).abs() < 1e-2);
            }
        }
    }

    #[test]
    fn identical_pair_method_three_is_neutral() {
        let img = face(2);
        let ctx = PairExplainContext::new(img.clone(), img, &ReferenceEmbedder, vec![PatchSpec::new(14, 5)]).unwrap();
        assert_eq!(ctx.d_orig, 0.0);
        let res = explain_pair(&ctx, MethodKind::III).unwrap();
        assert!(res.per_scale[0].maps[0].max_abs() <= 1e-9);
        assert_eq!(res.maps[0], res.maps[1]);
        assert!(res.blended[0].pixels().all(|p| p[0] == p[1] && p[1] == p[2]));
    }

    #[test]
    fn constant_image_error_names_the_image() {
        let err = PairExplainContext::new(face(1), Image::filled([9, 9, 9]), &ReferenceEmbedder, PatchSpec::default_sweep())
            .err()
            .unwrap();
        assert!(matches!(err, XMapError::Source { image: 2, .. }));
    }

    #[test]
    fn occlusion_error_carries_index() {
        struct FailAt(usize);
        impl EmbeddingBackend for FailAt {
            fn name(&self) -> &str {
                "fail"
            }
            fn dimension(&self) -> Option<usize> {
                Some(196)
            }
            fn embed(&self, img: &Image) -> Result<FeatureVector, EmbeddingError> {
                ReferenceEmbedder.embed(img)
            }
            fn embed_batch(&self, imgs: &[Image]) -> Result<Vec<FeatureVector>, EmbeddingError> {
                if imgs.len() > self.0 {
                    return Err(EmbeddingError::Backend("boom".into()).at_index(self.0));
                }
                imgs.iter().map(|i| self.embed(i)).collect()
            }
            fn concurrency(&self) -> Concurrency {
                Concurrency::Serial
            }
        }
        let backend = FailAt(17);
        let ctx = PairExplainContext::new(face(1), face(2), &backend, vec![PatchSpec::new(28, 5)]).unwrap();
        let err = explain_pair(&ctx, MethodKind::II).unwrap_err();
        match err {
            XMapError::Occluded {
                image,
                patch_size,
                index,
                ref source,
            } => {
                assert_eq!((image, patch_size, index), (1, 28, 17));
                assert!(source.is_backend_failure());
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
