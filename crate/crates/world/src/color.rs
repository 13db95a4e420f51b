//! Color helpers and the pastel field palette.

use crate::vocab::Hue;

pub type Rgb = [f64; 3];

pub const FIELD_SATURATION: f64 = 0.3;
pub const FIELD_VALUE: f64 = 0.9;

pub fn hsv(h: f64, s: f64, v: f64) -> Rgb {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// `(h, s, v)` with `h` in `[0, 1)`.
pub fn to_hsv(c: Rgb) -> (f64, f64, f64) {
    let max = c[0].max(c[1]).max(c[2]);
    let min = c[0].min(c[1]).min(c[2]);
    let d = max - min;
    let s = if max > 0.0 { d / max } else { 0.0 };
    let h = if d == 0.0 {
        0.0
    } else if max == c[0] {
        ((c[1] - c[2]) / d).rem_euclid(6.0) / 6.0
    } else if max == c[1] {
        ((c[2] - c[0]) / d + 2.0) / 6.0
    } else {
        ((c[0] - c[1]) / d + 4.0) / 6.0
    };
    (h, s, max)
}

pub fn field_color(h: Hue) -> Rgb {
    hsv(h.angle(), FIELD_SATURATION, FIELD_VALUE)
}

/// Saturated reference color for a hue word.
pub fn glyph_color(h: Hue) -> Rgb {
    hsv(h.angle(), 0.85, 0.9)
}

pub fn dist(a: Rgb, b: Rgb) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Closest field color and its distance.
pub fn nearest_field(c: Rgb) -> (Hue, f64) {
    Hue::ALL
        .iter()
        .map(|&h| (h, dist(c, field_color(h))))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hsv_round_trip() {
        for i in 0..50 {
            let h = i as f64 / 50.0;
            let (h2, s2, v2) = to_hsv(hsv(h, 0.8, 0.7));
            assert!((h - h2).abs() < 1e-9 && (s2 - 0.8).abs() < 1e-9 && (v2 - 0.7).abs() < 1e-9);
        }
    }

    #[test]
    fn field_colors_are_distinct() {
        for a in Hue::ALL {
            for b in Hue::ALL {
                if a != b {
                    assert!(dist(field_color(a), field_color(b)) > 0.08, "{a:?} {b:?}");
                }
            }
            assert_eq!(nearest_field(field_color(a)).0, a);
        }
    }
}
