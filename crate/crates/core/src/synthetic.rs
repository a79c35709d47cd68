//! Deterministic synthetic face crops for tests, demos and smoke datasets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::imaging::{Image, Rgb, FACE_SIZE};

struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    color: Rgb,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }
}

/// A cartoon face: background gradient, head, eyes, nose and mouth whose
/// geometry and colors depend on `seed`, plus mild per-pixel texture.
pub fn synthetic_face(seed: u64) -> Image {
    synthetic_face_variant(seed, 0)
}

/// Another capture of identity `identity`: same geometry and colors, with
/// its own texture, a brightness change and a shift of up to two pixels.
pub fn synthetic_face_variant(identity: u64, variant: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(identity);
    let mut jitter = |lo: f64, hi: f64| rng.random_range(lo..hi);

    let bg_top: Rgb = [jitter(20.0, 120.0) as u8, jitter(20.0, 120.0) as u8, jitter(60.0, 200.0) as u8];
    let skin: Rgb = [jitter(150.0, 240.0) as u8, jitter(100.0, 190.0) as u8, jitter(70.0, 150.0) as u8];
    let head = Ellipse {
        cx: 56.0 + jitter(-4.0, 4.0),
        cy: 58.0 + jitter(-4.0, 4.0),
        rx: jitter(34.0, 44.0),
        ry: jitter(42.0, 52.0),
        color: skin,
    };
    let eye_y = 46.0 + jitter(-5.0, 5.0);
    let eye_gap = jitter(14.0, 22.0);
    let eye_color: Rgb = [jitter(0.0, 80.0) as u8, jitter(0.0, 80.0) as u8, jitter(0.0, 120.0) as u8];
    let eye_r = jitter(4.0, 8.0);
    let features = [
        Ellipse {
            cx: 56.0 - eye_gap,
            cy: eye_y,
            rx: eye_r * 1.4,
            ry: eye_r,
            color: eye_color,
        },
        Ellipse {
            cx: 56.0 + eye_gap,
            cy: eye_y,
            rx: eye_r * 1.4,
            ry: eye_r,
            color: eye_color,
        },
        Ellipse {
            cx: 56.0 + jitter(-3.0, 3.0),
            cy: 64.0 + jitter(-4.0, 4.0),
            rx: jitter(3.0, 7.0),
            ry: jitter(6.0, 12.0),
            color: [skin[0].saturating_sub(50), skin[1].saturating_sub(50), skin[2].saturating_sub(40)],
        },
        Ellipse {
            cx: 56.0 + jitter(-3.0, 3.0),
            cy: 84.0 + jitter(-4.0, 4.0),
            rx: jitter(9.0, 18.0),
            ry: jitter(3.0, 6.0),
            color: [jitter(120.0, 220.0) as u8, jitter(20.0, 80.0) as u8, jitter(30.0, 90.0) as u8],
        },
    ];
    let mut capture = ChaCha8Rng::seed_from_u64(identity ^ variant.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let texture: Vec<i16> = (0..FACE_SIZE * FACE_SIZE).map(|_| capture.random_range(-12..=12)).collect();
    let (shift_x, shift_y, gain) = if variant == 0 {
        (0.0, 0.0, 0)
    } else {
        (capture.random_range(-2.0..=2.0), capture.random_range(-2.0..=2.0), capture.random_range(-15..=15))
    };

    Image::from_fn(|x, y| {
        let (fx, fy) = (x as f64 + 0.5 - shift_x, y as f64 + 0.5 - shift_y);
        let mut color = {
            let t = fy / FACE_SIZE as f64;
            bg_top.map(|c| (c as f64 * (1.0 - 0.5 * t)) as u8)
        };
        if head.contains(fx, fy) {
            color = head.color;
        }
        for f in &features {
            if f.contains(fx, fy) {
                color = f.color;
            }
        }
        let n = texture[y * FACE_SIZE + x] + gain;
        color.map(|c| (c as i16 + n).clamp(0, 255) as u8)
    })
}

/// `target` with its left half (columns `0..56`) replaced by `source`'s.
pub fn paste_left_half(source: &Image, target: &Image) -> Image {
    Image::from_fn(|x, y| {
        if x < FACE_SIZE / 2 {
            source.pixel(x, y)
        } else {
            target.pixel(x, y)
        }
    })
}
