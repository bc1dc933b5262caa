//! Integer-only line rendering in three styles.
//!
//! Layout: lines are [`LINE_HEIGHT`] pixels tall; glyph cells are scaled by
//! [`GLYPH_SCALE`] and placed every [`CHAR_ADVANCE`] pixels starting at
//! `x = LEFT_MARGIN`, `y = TOP_MARGIN`. Ink is bright (up to 255) on a dark
//! background (0 for printed and handwritten lines).
//!
//! Style perturbations, all drawn from one [`SplitMix64`] stream seeded with
//! the render seed, in this order:
//!
//! - handwritten, per character: `dx ∈ [-1, 1]`, `dy ∈ [-1, 1]`, shear
//!   `s ∈ [-1, 1]` and ink `∈ [170, 255]`. A glyph pixel at scaled row `y`
//!   shifts right by `s · (13 − y) / 13` (integer division, truncating).
//! - scene: background level `∈ [0, 40]`, ink `∈ [150, 255]`, then additive noise
//!   `∈ [0, 40]` per pixel in row-major order, then 1–2 straight occluding
//!   strokes (Bresenham) of intensity `∈ [100, 180]`.
//!
//! Overlapping ink takes the maximum; additions saturate at 255.

use ndarray::Array3;

use super::font::{glyph, is_set, GLYPH_HEIGHT, GLYPH_WIDTH};
use super::Style;
use crate::rng::SplitMix64;
use crate::{Error, Result};

pub const LINE_HEIGHT: usize = 32;
pub const GLYPH_SCALE: usize = 2;
pub const CHAR_ADVANCE: usize = 16;
pub const LEFT_MARGIN: usize = 3;
pub const TOP_MARGIN: usize = 9;
/// Largest horizontal shift of a handwritten character.
pub const HAND_SHIFT_X: i64 = 1;
/// Largest vertical shift of a handwritten character.
pub const HAND_SHIFT_Y: i64 = 1;
/// Largest shear offset (pixels at the top row) of a handwritten character.
pub const HAND_SHEAR: i64 = 1;

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, fill: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![fill; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// `1 × height × width` intensities scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Array3<f64> {
        Array3::from_shape_fn((1, self.height, self.width), |(_, y, x)| {
            f64::from(self.get(x, y)) / 255.0
        })
    }

    fn put_max(&mut self, x: i64, y: i64, value: u8) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let p = &mut self.pixels[y as usize * self.width + x as usize];
            *p = (*p).max(value);
        }
    }

    fn put(&mut self, x: i64, y: i64, value: u8) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.pixels[y as usize * self.width + x as usize] = value;
        }
    }
}

/// Width in pixels of a line holding up to `max_chars` characters.
pub fn line_width(max_chars: usize) -> usize {
    max_chars * CHAR_ADVANCE
}

struct Placement {
    dx: i64,
    dy: i64,
    shear: i64,
    ink: u8,
}

fn draw_glyph(img: &mut GrayImage, ch: char, slot: usize, place: &Placement) {
    let Some(rows) = glyph(ch) else { return };
    let x0 = (slot * CHAR_ADVANCE + LEFT_MARGIN) as i64 + place.dx;
    let y0 = TOP_MARGIN as i64 + place.dy;
    let last_row = (GLYPH_HEIGHT * GLYPH_SCALE - 1) as i64;
    for gy in 0..GLYPH_HEIGHT {
        for gx in 0..GLYPH_WIDTH {
            if !is_set(rows, gx, gy) {
                continue;
            }
            for sy in 0..GLYPH_SCALE {
                let y = (gy * GLYPH_SCALE + sy) as i64;
                let offset = place.shear * (last_row - y) / last_row;
                for sx in 0..GLYPH_SCALE {
                    let x = (gx * GLYPH_SCALE + sx) as i64;
                    img.put_max(x0 + x + offset, y0 + y, place.ink);
                }
            }
        }
    }
}

fn draw_stroke(img: &mut GrayImage, from: (i64, i64), to: (i64, i64), value: u8) {
    let (mut x, mut y) = from;
    let dx = (to.0 - x).abs();
    let dy = -(to.1 - y).abs();
    let sx = if x < to.0 { 1 } else { -1 };
    let sy = if y < to.1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        img.put(x, y, value);
        if (x, y) == to {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Renders `text` into a `LINE_HEIGHT × line_width(max_chars)` image.
///
/// Characters without a glyph render blank. Identical arguments give
/// bit-identical images.
pub fn render_line(text: &str, style: Style, seed: u64, max_chars: usize) -> Result<GrayImage> {
    let len = text.chars().count();
    if len > max_chars {
        return Err(Error::Generation(format!(
            "text has {len} characters but lines hold at most {max_chars}"
        )));
    }
    let mut rng = SplitMix64::new(seed);
    let width = line_width(max_chars);
    match style {
        Style::Printed => {
            let mut img = GrayImage::new(width, LINE_HEIGHT, 0);
            let place = Placement {
                dx: 0,
                dy: 0,
                shear: 0,
                ink: 255,
            };
            for (slot, ch) in text.chars().enumerate() {
                draw_glyph(&mut img, ch, slot, &place);
            }
            Ok(img)
        }
        Style::Handwritten => {
            let mut img = GrayImage::new(width, LINE_HEIGHT, 0);
            for (slot, ch) in text.chars().enumerate() {
                let place = Placement {
                    dx: rng.range_inclusive(-HAND_SHIFT_X, HAND_SHIFT_X),
                    dy: rng.range_inclusive(-HAND_SHIFT_Y, HAND_SHIFT_Y),
                    shear: rng.range_inclusive(-HAND_SHEAR, HAND_SHEAR),
                    ink: rng.range_inclusive(170, 255) as u8,
                };
                draw_glyph(&mut img, ch, slot, &place);
            }
            Ok(img)
        }
        Style::Scene => {
            let background = rng.range_inclusive(0, 40) as u8;
            let ink = rng.range_inclusive(150, 255) as u8;
            let mut img = GrayImage::new(width, LINE_HEIGHT, background);
            let place = Placement {
                dx: 0,
                dy: 0,
                shear: 0,
                ink,
            };
            for (slot, ch) in text.chars().enumerate() {
                draw_glyph(&mut img, ch, slot, &place);
            }
            for p in img.pixels.iter_mut() {
                *p = p.saturating_add(rng.range_inclusive(0, 40) as u8);
            }
            let strokes = rng.range_inclusive(1, 2);
            for _ in 0..strokes {
                let w = width as i64 - 1;
                let h = LINE_HEIGHT as i64 - 1;
                let from = (rng.range_inclusive(0, w), rng.range_inclusive(0, h));
                let to = (rng.range_inclusive(0, w), rng.range_inclusive(0, h));
                let value = rng.range_inclusive(100, 180) as u8;
                draw_stroke(&mut img, from, to, value);
            }
            Ok(img)
        }
    }
}
