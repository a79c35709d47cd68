//! Systematic image occluding.
//!
//! A patch of size `p` is slid over the image on a stride-`s` grid anchored at
//! the top-left corner. Each position yields an occluded copy of the image and
//! the mask that was painted. There are `⌊(112 − p)/s⌋` positions per axis,
//! visited row-major (y outer, x inner).

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{convolve_separable, gaussian_weights, Image, Rect, Rgb, ScalarMap, FACE_SIZE};

#[derive(Debug, Error)]
pub enum OcclusionError {
    #[error("invalid patch parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchShape {
    #[serde(alias = "rect")]
    Rectangular,
    Round,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchFill {
    Black,
    #[serde(alias = "grey")]
    Gray,
    White,
    Noise,
}

impl PatchFill {
    fn solid(self) -> Option<Rgb> {
        match self {
            PatchFill::Black => Some([0, 0, 0]),
            PatchFill::Gray => Some([128, 128, 128]),
            PatchFill::White => Some([255, 255, 255]),
            PatchFill::Noise => None,
        }
    }
}

impl FromStr for PatchShape {
    type Err = OcclusionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rect" | "rectangular" => Ok(PatchShape::Rectangular),
            "round" => Ok(PatchShape::Round),
            other => Err(OcclusionError::InvalidParameter(format!("unknown shape {other:?}"))),
        }
    }
}

impl fmt::Display for PatchShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PatchShape::Rectangular => "rect",
            PatchShape::Round => "round",
        })
    }
}

impl FromStr for PatchFill {
    type Err = OcclusionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "black" => Ok(PatchFill::Black),
            "gray" | "grey" => Ok(PatchFill::Gray),
            "white" => Ok(PatchFill::White),
            "noise" => Ok(PatchFill::Noise),
            other => Err(OcclusionError::InvalidParameter(format!("unknown fill {other:?}"))),
        }
    }
}

impl fmt::Display for PatchFill {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PatchFill::Black => "black",
            PatchFill::Gray => "gray",
            PatchFill::White => "white",
            PatchFill::Noise => "noise",
        })
    }
}

/// Gaussian softening of the patch edge.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeBlur {
    pub kernel: usize,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub size: usize,
    pub stride: usize,
    pub shape: PatchShape,
    pub fill: PatchFill,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge_blur: Option<EdgeBlur>,
    #[serde(default)]
    pub noise_seed: u64,
}

impl PatchSpec {
    pub const DEFAULT_SIZES: [usize; 3] = [7, 14, 28];
    pub const DEFAULT_STRIDE: usize = 5;

    /// Black, rectangular, hard-edged patch.
    pub fn new(size: usize, stride: usize) -> Self {
        Self {
            size,
            stride,
            shape: PatchShape::Rectangular,
            fill: PatchFill::Black,
            edge_blur: None,
            noise_seed: 0,
        }
    }

    /// The three default scales at stride 5.
    pub fn default_sweep() -> Vec<PatchSpec> {
        Self::DEFAULT_SIZES
            .iter()
            .map(|&p| Self::new(p, Self::DEFAULT_STRIDE))
            .collect()
    }

    pub fn with_shape(mut self, shape: PatchShape) -> Self {
        self.shape = shape;
        self
    }

    pub fn with_fill(mut self, fill: PatchFill) -> Self {
        self.fill = fill;
        self
    }

    pub fn with_edge_blur(mut self, kernel: usize, sigma: f64) -> Self {
        self.edge_blur = Some(EdgeBlur { kernel, sigma });
        self
    }

    pub fn with_noise_seed(mut self, seed: u64) -> Self {
        self.noise_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), OcclusionError> {
        let bad = |m: String| Err(OcclusionError::InvalidParameter(m));
        if self.size == 0 || self.size > FACE_SIZE {
            return bad(format!("patch size {} outside [1, {FACE_SIZE}]", self.size));
        }
        if self.stride == 0 {
            return bad("stride must be at least 1".into());
        }
        if let Some(blur) = self.edge_blur {
            if blur.kernel == 0 || !(blur.sigma > 0.0 && blur.sigma.is_finite()) {
                return bad(format!("invalid edge blur: kernel {}, sigma {}", blur.kernel, blur.sigma));
            }
        }
        if self.positions_per_axis() == 0 {
            return bad(format!(
                "patch size {} with stride {} yields no occlusions",
                self.size, self.stride
            ));
        }
        Ok(())
    }

    /// `⌊(112 − p)/s⌋`.
    pub fn positions_per_axis(&self) -> usize {
        if self.size > FACE_SIZE || self.stride == 0 {
            return 0;
        }
        (FACE_SIZE - self.size) / self.stride
    }

    /// Number of occlusions `N`.
    pub fn count(&self) -> usize {
        self.positions_per_axis().pow(2)
    }

    /// Top-left corners in sweep order.
    pub fn positions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n = self.positions_per_axis();
        (0..n).flat_map(move |j| (0..n).map(move |i| (i * self.stride, j * self.stride)))
    }
}

/// Sparse occlusion mask: weights in `[0, 1]` inside a window, zero elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    x0: usize,
    y0: usize,
    width: usize,
    height: usize,
    weights: Vec<f64>,
}

impl Mask {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        if x < self.x0 || y < self.y0 || x >= self.x0 + self.width || y >= self.y0 + self.height {
            return 0.0;
        }
        self.weights[(y - self.y0) * self.width + (x - self.x0)]
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Non-zero entries as `(x, y, weight)`, row-major.
    pub fn support(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.weights
            .iter()
            .enumerate()
            .filter(|(_, &w)| w != 0.0)
            .map(move |(i, &w)| (self.x0 + i % self.width, self.y0 + i / self.width, w))
    }

    /// `acc += factor * mask`.
    pub fn accumulate_into(&self, acc: &mut ScalarMap, factor: f64) {
        let values = acc.values_mut();
        for row in 0..self.height {
            let src = &self.weights[row * self.width..(row + 1) * self.width];
            let start = (self.y0 + row) * FACE_SIZE + self.x0;
            for (dst, w) in values[start..start + self.width].iter_mut().zip(src) {
                *dst += factor * w;
            }
        }
    }

    pub fn to_map(&self) -> ScalarMap {
        let mut map = ScalarMap::zeros();
        self.accumulate_into(&mut map, 1.0);
        map
    }
}

fn in_shape(shape: PatchShape, size: usize, u: usize, v: usize) -> bool {
    match shape {
        PatchShape::Rectangular => true,
        PatchShape::Round => {
            let center = (size as f64 - 1.0) / 2.0;
            let radius = size as f64 / 2.0;
            let du = u as f64 - center;
            let dv = v as f64 - center;
            du * du + dv * dv <= radius * radius
        }
    }
}

fn patch_mask(x: usize, y: usize, spec: &PatchSpec) -> Result<Mask, OcclusionError> {
    let p = spec.size;
    match spec.edge_blur {
        None => {
            let mut weights = vec![0.0; p * p];
            for v in 0..p {
                for u in 0..p {
                    if in_shape(spec.shape, p, u, v) {
                        weights[v * p + u] = 1.0;
                    }
                }
            }
            Ok(Mask {
                x0: x,
                y0: y,
                width: p,
                height: p,
                weights,
            })
        }
        Some(blur) => {
            let kernel = gaussian_weights(blur.kernel, blur.sigma)
                .map_err(|e| OcclusionError::InvalidParameter(e.to_string()))?;
            let mut hard = ScalarMap::zeros();
            for v in 0..p {
                for u in 0..p {
                    if in_shape(spec.shape, p, u, v) {
                        hard.set(x + u, y + v, 1.0);
                    }
                }
            }
            let window = Rect {
                x0: x,
                y0: y,
                x1: x + p,
                y1: y + p,
            }
            .grown(kernel.len() / 2);
            let soft = convolve_separable(&hard, &kernel, window);
            let width = window.x1 - window.x0;
            let height = window.y1 - window.y0;
            let mut weights = Vec::with_capacity(width * height);
            for yy in window.y0..window.y1 {
                for xx in window.x0..window.x1 {
                    weights.push(soft.get(xx, yy).clamp(0.0, 1.0));
                }
            }
            Ok(Mask {
                x0: window.x0,
                y0: window.y0,
                width,
                height,
                weights,
            })
        }
    }
}

fn noise_rng(seed: u64, x: usize, y: usize) -> ChaCha8Rng {
    let position = (y * FACE_SIZE + x) as u64;
    ChaCha8Rng::seed_from_u64(seed ^ position.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Occludes `img` with one patch whose top-left corner is `(x, y)`. Returns
/// the occluded image and the (possibly soft) mask that was applied.
pub fn apply_patch(img: &Image, x: usize, y: usize, spec: &PatchSpec) -> Result<(Image, Mask), OcclusionError> {
    spec.validate()?;
    if x + spec.size > FACE_SIZE || y + spec.size > FACE_SIZE {
        return Err(OcclusionError::InvalidParameter(format!(
            "patch of size {} at ({x}, {y}) leaves the image",
            spec.size
        )));
    }
    let mask = patch_mask(x, y, spec)?;
    let mut out = img.clone();
    let mut rng = (spec.fill == PatchFill::Noise).then(|| noise_rng(spec.noise_seed, x, y));
    for row in 0..mask.height {
        for col in 0..mask.width {
            let m = mask.weights[row * mask.width + col];
            let fill = match (spec.fill.solid(), rng.as_mut()) {
                (Some(rgb), _) => rgb,
                (None, Some(rng)) => rng.random::<[u8; 3]>(),
                (None, None) => unreachable!(),
            };
            if m == 0.0 {
                continue;
            }
            let (px, py) = (mask.x0 + col, mask.y0 + row);
            if m == 1.0 {
                out.set_pixel(px, py, fill);
            } else {
                let src = img.pixel(px, py);
                let blended: Rgb = std::array::from_fn(|c| {
                    ((1.0 - m) * src[c] as f64 + m * fill[c] as f64 + 0.5).floor().clamp(0.0, 255.0) as u8
                });
                out.set_pixel(px, py, blended);
            }
        }
    }
    Ok((out, mask))
}

/// Occluded images and their masks, in sweep order.
#[derive(Clone, Debug)]
pub struct OcclusionSet {
    pub occluded: Vec<Image>,
    pub masks: Vec<Mask>,
    pub spec: PatchSpec,
}

impl OcclusionSet {
    pub fn count(&self) -> usize {
        self.masks.len()
    }
}

pub fn occlude_sweep(img: &Image, spec: &PatchSpec) -> Result<OcclusionSet, OcclusionError> {
    spec.validate()?;
    let positions: Vec<(usize, usize)> = spec.positions().collect();
    let pairs = positions
        .par_iter()
        .map(|&(x, y)| apply_patch(img, x, y, spec))
        .collect::<Result<Vec<_>, _>>()?;
    let (occluded, masks) = pairs.into_iter().unzip();
    Ok(OcclusionSet {
        occluded,
        masks,
        spec: spec.clone(),
    })
}
