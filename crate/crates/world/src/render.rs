//! Rasterization of glyphs onto a field.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::color::{field_color, Rgb};
use crate::identity::GlyphIdentity;
use crate::vocab::{Hue, Style};

/// Inner width of the outline ring drawn for hollow glyphs, in pixels.
pub const RING_WIDTH: f64 = 2.0;
/// Stripe color is the third palette color scaled by this factor.
pub const STRIPE_SHADE: f64 = 0.3;

/// Pixel box `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) as f64 / 2.0, (self.y0 + self.y1) as f64 / 2.0)
    }

    pub fn iou(&self, o: &BBox) -> f64 {
        let ix = self.x1.min(o.x1).saturating_sub(self.x0.max(o.x0));
        let iy = self.y1.min(o.y1).saturating_sub(self.y0.max(o.y0));
        let inter = (ix * iy) as f64;
        inter / ((self.area() + o.area()) as f64 - inter).max(f64::MIN_POSITIVE)
    }

    /// Bounding box of the set pixels of an `h x w` predicate.
    pub fn of(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Option<BBox> {
        let mut b: Option<BBox> = None;
        for y in 0..h {
            for x in 0..w {
                if f(y, x) {
                    let bb = b.get_or_insert(BBox { x0: x, y0: y, x1: x + 1, y1: y + 1 });
                    bb.x0 = bb.x0.min(x);
                    bb.y0 = bb.y0.min(y);
                    bb.x1 = bb.x1.max(x + 1);
                    bb.y1 = bb.y1.max(y + 1);
                }
            }
        }
        b
    }
}

/// Row-major RGB canvas with a panoptic label per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Canvas {
    pub height: usize,
    pub width: usize,
    pub rgb: Vec<f64>,
    pub labels: Vec<u8>,
}

impl Canvas {
    /// Field color plus independent uniform noise of amplitude `noise`.
    pub fn field(height: usize, width: usize, hue: Hue, noise: f64, rng: &mut impl Rng) -> Canvas {
        let base = field_color(hue);
        let mut rgb = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            for c in base {
                let n = if noise > 0.0 { rng.random_range(-noise..=noise) } else { 0.0 };
                rgb.push((c + n).clamp(0.0, 1.0));
            }
        }
        Canvas { height, width, rgb, labels: vec![0; height * width] }
    }

    pub fn set(&mut self, y: usize, x: usize, c: Rgb) {
        let i = (y * self.width + x) * 3;
        self.rgb[i..i + 3].copy_from_slice(&c);
    }

    pub fn get(&self, y: usize, x: usize) -> Rgb {
        let i = (y * self.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }
}

/// Largest whole-pixel offset of a painted pixel from the glyph's center pixel.
pub fn extent(id: &GlyphIdentity) -> usize {
    let s = &id.shape;
    (s.radius * (1.0 + s.amplitude)).min(crate::identity::MAX_EXTENT).floor() as usize
}

/// Paints a glyph centered on pixel `(cy, cx)` and labels its pixels `label`.
/// Returns the number of pixels painted.
pub fn draw_glyph(canvas: &mut Canvas, id: &GlyphIdentity, style: Style, cy: usize, cx: usize, label: u8) -> usize {
    let e = extent(id) as isize;
    let mut painted = 0;
    for dy in -e..=e {
        for dx in -e..=e {
            let (y, x) = (cy as isize + dy, cx as isize + dx);
            if y < 0 || x < 0 || y >= canvas.height as isize || x >= canvas.width as isize {
                continue;
            }
            let d = ((dy * dy + dx * dx) as f64).sqrt();
            let r = id.shape.outline((dy as f64).atan2(dx as f64));
            if d > r {
                continue;
            }
            let (y, x) = (y as usize, x as usize);
            let color = match style {
                Style::Hollow if d <= r - RING_WIDTH => continue,
                Style::Hollow => id.palette[0],
                Style::Striped if (y / 2) % 2 == 1 => id.palette[2].map(|v| v * STRIPE_SHADE),
                _ if d < 0.5 * r => id.palette[1],
                _ => id.palette[0],
            };
            canvas.set(y, x, color);
            canvas.labels[y * canvas.width + x] = label;
            painted += 1;
        }
    }
    painted
}
