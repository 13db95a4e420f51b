//! Procedural prompt consistency: checks the field color, the subject count
//! and the style named by a caption against measurements of the image.

use glyphcomp_core::{LatentGrid, SegmentationMask};
use glyphcomp_world::color::nearest_field;
use glyphcomp_world::{parse_caption, Hue, Style};
use serde::{Deserialize, Serialize};

use crate::detect::{detect_subjects, Detection, DetectorConfig};
use crate::error::Result;

/// A pixel counts towards the field histogram when it is this close to a
/// field color.
pub const FIELD_MATCH: f64 = 0.12;
/// Glyph pixels whose brightest channel is below this are stripe pixels.
pub const DARK_LEVEL: f64 = 0.45;
pub const STRIPED_FRACTION: f64 = 0.2;
pub const HOLLOW_FRACTION: f64 = 0.15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptCheck {
    pub score: f64,
    pub field: Option<Hue>,
    pub count: usize,
    pub style: Option<Style>,
    pub field_ok: Option<bool>,
    pub count_ok: bool,
    pub style_ok: bool,
}

/// Most common nearest field color among non-subject pixels close to one.
pub fn measure_field(image: &LatentGrid<f32>, detections: &[Detection]) -> Option<Hue> {
    let mut hist = [0usize; Hue::ALL.len()];
    for y in 0..image.height() {
        for x in 0..image.width() {
            if detections.iter().any(|d| d.mask.get(y, x)) {
                continue;
            }
            let p = image.pixel(y, x);
            let (h, d) = nearest_field([p[0] as f64, p[1] as f64, p[2] as f64]);
            if d < FIELD_MATCH {
                hist[h as usize] += 1;
            }
        }
    }
    let (best, &n) = hist.iter().enumerate().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))?;
    (n > 0).then_some(Hue::ALL[best])
}

/// Fraction of pixels enclosed by the component (not reachable from outside
/// its bounding box without crossing it) among component plus enclosed.
pub fn hole_fraction(mask: &SegmentationMask) -> f64 {
    let (h, w) = (mask.height + 2, mask.width + 2);
    let inside = |y: usize, x: usize| y >= 1 && x >= 1 && y <= mask.height && x <= mask.width && mask.get(y - 1, x - 1);
    let mut outside = vec![false; h * w];
    let mut stack = vec![(0usize, 0usize)];
    outside[0] = true;
    while let Some((y, x)) = stack.pop() {
        let n = [(y.wrapping_sub(1), x), (y + 1, x), (y, x.wrapping_sub(1)), (y, x + 1)];
        for (ny, nx) in n {
            if ny < h && nx < w && !outside[ny * w + nx] && !inside(ny, nx) {
                outside[ny * w + nx] = true;
                stack.push((ny, nx));
            }
        }
    }
    let area = mask.count();
    let holes = (0..h * w).filter(|&i| !outside[i] && !inside(i / w, i % w)).count();
    if area + holes == 0 {
        return 0.0;
    }
    holes as f64 / (area + holes) as f64
}

pub fn dark_fraction(image: &LatentGrid<f32>, mask: &SegmentationMask) -> f64 {
    let (mut dark, mut n) = (0usize, 0usize);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(y, x) {
                n += 1;
                let m = image.pixel(y, x).iter().fold(0.0f32, |a, &b| a.max(b));
                dark += ((m as f64) < DARK_LEVEL) as usize;
            }
        }
    }
    dark as f64 / n.max(1) as f64
}

pub fn classify_style(image: &LatentGrid<f32>, d: &Detection) -> Style {
    if dark_fraction(image, &d.mask) > STRIPED_FRACTION {
        Style::Striped
    } else if hole_fraction(&d.mask) > HOLLOW_FRACTION {
        Style::Hollow
    } else {
        Style::Plain
    }
}

/// Majority style over detections; ties go to the earlier style in
/// [`Style::ALL`].
pub fn measure_style(image: &LatentGrid<f32>, detections: &[Detection]) -> Option<Style> {
    let mut votes = [0usize; 3];
    for d in detections {
        votes[classify_style(image, d) as usize] += 1;
    }
    let (best, &n) = votes.iter().enumerate().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))?;
    (n > 0).then_some(Style::ALL[best])
}

/// Fraction of the caption's attributes (field color if named, subject
/// count, style with "plain" when none is named) that the image satisfies.
pub fn prompt_consistency(image: &LatentGrid<f32>, caption: &[usize], detector: &DetectorConfig) -> Result<PromptCheck> {
    let parsed = parse_caption(caption)?;
    let detections = detect_subjects(image, detector);
    let field = measure_field(image, &detections);
    let style = measure_style(image, &detections);
    let field_ok = parsed.field.map(|f| field == Some(f));
    let count_ok = detections.len() == parsed.subject_count();
    let style_ok = style == Some(parsed.style.unwrap_or(Style::Plain));
    let (mut hit, mut total) = (count_ok as usize + style_ok as usize, 2);
    if let Some(ok) = field_ok {
        hit += ok as usize;
        total += 1;
    }
    Ok(PromptCheck { score: hit as f64 / total as f64, field, count: detections.len(), style, field_ok, count_ok, style_ok })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring_has_a_hole_and_disc_does_not() {
        let ring = SegmentationMask::from_fn(9, 9, |y, x| {
            let d = ((y as f64 - 4.0).powi(2) + (x as f64 - 4.0).powi(2)).sqrt();
            (2.0..=4.0).contains(&d)
        });
        assert!(hole_fraction(&ring) > 0.15);
        let disc = SegmentationMask::from_fn(9, 9, |y, x| ((y as f64 - 4.0).powi(2) + (x as f64 - 4.0).powi(2)).sqrt() <= 4.0);
        assert_eq!(hole_fraction(&disc), 0.0);
        // 3x3 square with its center missing: one hole pixel out of nine.
        let sq = SegmentationMask::from_fn(3, 3, |y, x| !(y == 1 && x == 1));
        assert!((hole_fraction(&sq) - 1.0 / 9.0).abs() < 1e-12);
    }
}
