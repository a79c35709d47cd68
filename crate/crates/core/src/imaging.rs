//! Pixel-level primitives shared by the occlusion sweep, the explanation maps
//! and the reference embedder.
//!
//! Everything here operates on aligned face crops of exactly
//! [`FACE_SIZE`]×[`FACE_SIZE`] pixels. Colors use 8-bit RGB; scalar fields use
//! `f64` and are always finite.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, RgbImage};
use thiserror::Error;

/// Side length of every aligned face crop, in pixels.
pub const FACE_SIZE: usize = 112;

const PIXELS: usize = FACE_SIZE * FACE_SIZE;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("expected a {FACE_SIZE}x{FACE_SIZE} image, got {width}x{height}")]
    WrongDimensions { width: u32, height: u32 },
    #[error("expected {expected} samples, got {actual}")]
    WrongLength { expected: usize, actual: usize },
    #[error("scalar map contains a non-finite value at index {0}")]
    NonFinite(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("png: {0}")]
    Png(#[from] image::ImageError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Rgb = [u8; 3];

/// An aligned 112×112 8-bit RGB face crop, stored row-major.
#[derive(Clone, PartialEq, Eq)]
pub struct Image {
    data: Vec<u8>,
}

impl std::fmt::Debug for Image {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Image({FACE_SIZE}x{FACE_SIZE})")
    }
}

impl Image {
    pub fn from_raw(data: Vec<u8>) -> Result<Self, ImagingError> {
        if data.len() != PIXELS * 3 {
            return Err(ImagingError::WrongLength {
                expected: PIXELS * 3,
                actual: data.len(),
            });
        }
        Ok(Self { data })
    }

    pub fn filled(rgb: Rgb) -> Self {
        Self::from_fn(|_, _| rgb)
    }

    /// Builds an image by evaluating `f(x, y)` for every pixel.
    pub fn from_fn(mut f: impl FnMut(usize, usize) -> Rgb) -> Self {
        let mut data = Vec::with_capacity(PIXELS * 3);
        for y in 0..FACE_SIZE {
            for x in 0..FACE_SIZE {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self { data }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> Rgb {
        let i = (y * FACE_SIZE + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: Rgb) {
        let i = (y * FACE_SIZE + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    pub fn pixels(&self) -> impl Iterator<Item = Rgb> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    pub fn from_rgb_image(img: RgbImage) -> Result<Self, ImagingError> {
        let (width, height) = img.dimensions();
        if width as usize != FACE_SIZE || height as usize != FACE_SIZE {
            return Err(ImagingError::WrongDimensions { width, height });
        }
        Self::from_raw(img.into_raw())
    }

    pub fn to_rgb_image(&self) -> RgbImage {
        RgbImage::from_raw(FACE_SIZE as u32, FACE_SIZE as u32, self.data.clone())
            .expect("buffer length is fixed")
    }

    /// Decodes a PNG. Alpha is dropped; any other size than 112×112 is rejected.
    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self, ImagingError> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
        Self::from_rgb_image(img.to_rgb8())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self, ImagingError> {
        let bytes = std::fs::read(path)?;
        Self::from_png_bytes(&bytes)
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>, ImagingError> {
        let mut out = Cursor::new(Vec::new());
        self.to_rgb_image().write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), ImagingError> {
        std::fs::write(path, self.to_png_bytes()?)?;
        Ok(())
    }
}

/// A finite real-valued field with the same extent as [`Image`].
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarMap {
    data: Vec<f64>,
}

impl Default for ScalarMap {
    fn default() -> Self {
        Self::zeros()
    }
}

impl ScalarMap {
    pub fn zeros() -> Self {
        Self::constant(0.0)
    }

    pub fn constant(value: f64) -> Self {
        assert!(value.is_finite(), "scalar map values must be finite");
        Self {
            data: vec![value; PIXELS],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self, ImagingError> {
        if data.len() != PIXELS {
            return Err(ImagingError::WrongLength {
                expected: PIXELS,
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(ImagingError::NonFinite(i));
        }
        Ok(Self { data })
    }

    pub fn from_fn(mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(PIXELS);
        for y in 0..FACE_SIZE {
            for x in 0..FACE_SIZE {
                data.push(f(x, y));
            }
        }
        Self::from_vec(data).expect("from_fn produced a non-finite value")
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * FACE_SIZE + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        debug_assert!(value.is_finite());
        self.data[y * FACE_SIZE + x] = value;
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Index `(x, y)` of the first pixel with the largest magnitude.
    pub fn argmax_abs(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, v) in self.data.iter().enumerate() {
            if v.abs() > self.data[best].abs() {
                best = i;
            }
        }
        (best % FACE_SIZE, best / FACE_SIZE)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self::from_vec(self.data.iter().map(|v| v * factor).collect())
            .expect("scaling produced a non-finite value")
    }

    /// `self += factor * other`, element-wise.
    pub fn add_scaled(&mut self, other: &ScalarMap, factor: f64) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
    }
}

/// BT.601 luma.
#[inline]
pub fn luma(rgb: Rgb) -> f64 {
    0.299 * rgb[0] as f64 + 0.587 * rgb[1] as f64 + 0.114 * rgb[2] as f64
}

pub fn to_grayscale(img: &Image) -> ScalarMap {
    ScalarMap {
        data: img.pixels().map(luma).collect(),
    }
}

/// Rounds an even kernel size up to the next odd one.
pub fn odd_kernel(size: usize) -> usize {
    if size.is_multiple_of(2) {
        size + 1
    } else {
        size
    }
}

/// Normalized 1-D Gaussian weights for an odd kernel of the given size.
pub fn gaussian_weights(kernel: usize, sigma: f64) -> Result<Vec<f64>, ImagingError> {
    if kernel == 0 {
        return Err(ImagingError::InvalidParameter(
            "blur kernel size must be at least 1".into(),
        ));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(ImagingError::InvalidParameter(format!(
            "blur sigma must be positive, got {sigma}"
        )));
    }
    let kernel = odd_kernel(kernel);
    let radius = (kernel / 2) as f64;
    let mut weights: Vec<f64> = (0..kernel)
        .map(|i| {
            let offset = i as f64 - radius;
            (-(offset * offset) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(weights)
}

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub const FULL: Rect = Rect {
        x0: 0,
        y0: 0,
        x1: FACE_SIZE,
        y1: FACE_SIZE,
    };

    pub fn grown(self, by: usize) -> Rect {
        Rect {
            x0: self.x0.saturating_sub(by),
            y0: self.y0.saturating_sub(by),
            x1: (self.x1 + by).min(FACE_SIZE),
            y1: (self.y1 + by).min(FACE_SIZE),
        }
    }
}

#[inline]
fn clamp_index(i: isize) -> usize {
    i.clamp(0, FACE_SIZE as isize - 1) as usize
}

/// Separable clamp-to-edge convolution evaluated only inside `out_rect`.
/// Output pixels outside the rectangle are zero.
pub(crate) fn convolve_separable(map: &ScalarMap, weights: &[f64], out_rect: Rect) -> ScalarMap {
    let radius = (weights.len() / 2) as isize;
    let rows = out_rect.grown(weights.len() / 2);
    let mut tmp = vec![0.0; PIXELS];
    for y in rows.y0..rows.y1 {
        let row = &map.data[y * FACE_SIZE..(y + 1) * FACE_SIZE];
        for x in out_rect.x0..out_rect.x1 {
            let mut acc = 0.0;
            for (k, w) in weights.iter().enumerate() {
                acc += w * row[clamp_index(x as isize + k as isize - radius)];
            }
            tmp[y * FACE_SIZE + x] = acc;
        }
    }
    let mut out = vec![0.0; PIXELS];
    for y in out_rect.y0..out_rect.y1 {
        for x in out_rect.x0..out_rect.x1 {
            let mut acc = 0.0;
            for (k, w) in weights.iter().enumerate() {
                acc += w * tmp[clamp_index(y as isize + k as isize - radius) * FACE_SIZE + x];
            }
            out[y * FACE_SIZE + x] = acc;
        }
    }
    ScalarMap { data: out }
}

/// Gaussian blur with a `kernel`×`kernel` window and edge replication at the
/// borders. Even kernel sizes are rounded up to the next odd size.
pub fn gaussian_blur(map: &ScalarMap, kernel: usize, sigma: f64) -> Result<ScalarMap, ImagingError> {
    let weights = gaussian_weights(kernel, sigma)?;
    Ok(convolve_separable(map, &weights, Rect::FULL))
}

/// Divides by the largest magnitude so extremes land on ±1. The zero map is
/// returned unchanged.
pub fn normalize_signed(map: &ScalarMap) -> ScalarMap {
    let peak = map.max_abs();
    if peak == 0.0 {
        return ScalarMap::zeros();
    }
    ScalarMap {
        data: map.data.iter().map(|v| v / peak).collect(),
    }
}

#[inline]
fn round_channel(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Red (−1) through white (0) to green (+1).
pub fn diverging_color(value: f64) -> Rgb {
    let v = value.clamp(-1.0, 1.0);
    if v >= 0.0 {
        let fade = round_channel(255.0 * (1.0 - v));
        [fade, 255, fade]
    } else {
        let fade = round_channel(255.0 * (1.0 + v));
        [255, fade, fade]
    }
}

pub fn colormap_diverging(map: &ScalarMap) -> Image {
    Image {
        data: map.data.iter().flat_map(|&v| diverging_color(v)).collect(),
    }
}

/// Hue, luminance and saturation, each in `[0, 1]` (hue in `[0, 1)`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hls {
    pub hue: f64,
    pub luminance: f64,
    pub saturation: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hsv {
    pub hue: f64,
    pub saturation: f64,
    pub value: f64,
}

fn unit_rgb(rgb: Rgb) -> [f64; 3] {
    rgb.map(|c| c as f64 / 255.0)
}

fn hexcone_hue(r: f64, g: f64, b: f64, max: f64, range: f64) -> f64 {
    let rc = (max - r) / range;
    let gc = (max - g) / range;
    let bc = (max - b) / range;
    let h = if r == max {
        bc - gc
    } else if g == max {
        2.0 + rc - bc
    } else {
        4.0 + gc - rc
    };
    let h = (h / 6.0).rem_euclid(1.0);
    if h >= 1.0 {
        0.0
    } else {
        h
    }
}

pub fn rgb_to_hls(rgb: Rgb) -> Hls {
    let [r, g, b] = unit_rgb(rgb);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let luminance = (max + min) / 2.0;
    if max == min {
        return Hls {
            hue: 0.0,
            luminance,
            saturation: 0.0,
        };
    }
    let range = max - min;
    let saturation = if luminance <= 0.5 {
        range / (max + min)
    } else {
        range / (2.0 - max - min)
    };
    Hls {
        hue: hexcone_hue(r, g, b, max, range),
        luminance,
        saturation,
    }
}

pub fn rgb_to_hsv(rgb: Rgb) -> Hsv {
    let [r, g, b] = unit_rgb(rgb);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    if max == min {
        return Hsv {
            hue: 0.0,
            saturation: 0.0,
            value: max,
        };
    }
    let range = max - min;
    Hsv {
        hue: hexcone_hue(r, g, b, max, range),
        saturation: range / max,
        value: max,
    }
}

fn hls_channel(m1: f64, m2: f64, hue: f64) -> f64 {
    let hue = hue.rem_euclid(1.0);
    if hue < 1.0 / 6.0 {
        m1 + (m2 - m1) * hue * 6.0
    } else if hue < 0.5 {
        m2
    } else if hue < 2.0 / 3.0 {
        m1 + (m2 - m1) * (2.0 / 3.0 - hue) * 6.0
    } else {
        m1
    }
}

/// Inverse of [`rgb_to_hls`] as unit-range floats, before quantization.
pub fn hls_to_unit_rgb(hls: Hls) -> [f64; 3] {
    let Hls {
        hue,
        luminance: l,
        saturation: s,
    } = hls;
    if s == 0.0 {
        return [l, l, l];
    }
    let m2 = if l <= 0.5 { l * (1.0 + s) } else { l + s - l * s };
    let m1 = 2.0 * l - m2;
    [
        hls_channel(m1, m2, hue + 1.0 / 3.0),
        hls_channel(m1, m2, hue),
        hls_channel(m1, m2, hue - 1.0 / 3.0),
    ]
}

pub fn hls_to_rgb(hls: Hls) -> Rgb {
    hls_to_unit_rgb(hls).map(|c| round_channel(c * 255.0))
}

/// Per-pixel HLS decomposition of an image, row-major.
pub fn rgb_hls(img: &Image) -> Vec<Hls> {
    img.pixels().map(rgb_to_hls).collect()
}

/// Per-pixel HSV decomposition of an image, row-major.
pub fn rgb_hsv(img: &Image) -> Vec<Hsv> {
    img.pixels().map(rgb_to_hsv).collect()
}
