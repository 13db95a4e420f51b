//! Procedural glyph detector: foreground/background color separation
//! followed by connected components.

use glyphcomp_core::{LatentGrid, SegmentationMask};
use glyphcomp_world::color::{dist, Rgb};
use glyphcomp_world::sample::crop_window;
use glyphcomp_world::{BBox, CROP_SIZE};
use serde::{Deserialize, Serialize};

/// Value written outside the subject mask of a normalized crop.
pub const CROP_BACKGROUND: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// RGB distance from the background above which a pixel is foreground.
    pub threshold: f64,
    /// Components smaller than this many pixels are dropped.
    pub min_area: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig { threshold: 0.15, min_area: 8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    /// `CROP_SIZE` square crop with everything outside the component set to
    /// [`CROP_BACKGROUND`].
    pub crop: LatentGrid<f32>,
    pub bbox: BBox,
    pub confidence: f64,
    /// Component pixels at image resolution.
    pub mask: SegmentationMask,
}

impl Detection {
    pub fn area(&self) -> usize {
        self.mask.count()
    }
}

fn pixel(image: &LatentGrid<f32>, y: usize, x: usize) -> Rgb {
    let p = image.pixel(y, x);
    [p[0] as f64, p[1] as f64, p[2] as f64]
}

/// Per-channel median of the one-pixel image border.
pub fn estimate_background(image: &LatentGrid<f32>) -> Rgb {
    let (h, w) = (image.height(), image.width());
    let mut border = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if y == 0 || x == 0 || y + 1 == h || x + 1 == w {
                border.push(pixel(image, y, x));
            }
        }
    }
    [0, 1, 2].map(|c| {
        let mut v: Vec<f64> = border.iter().map(|p| p[c]).collect();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    })
}

pub fn foreground(image: &LatentGrid<f32>, threshold: f64) -> SegmentationMask {
    let bg = estimate_background(image);
    SegmentationMask::from_fn(image.height(), image.width(), |y, x| dist(pixel(image, y, x), bg) > threshold)
}

/// 8-connected components of `mask`, each as a list of `(y, x)` in scan order.
pub fn components(mask: &SegmentationMask) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = (mask.height, mask.width);
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) || seen[y * w + x] {
                continue;
            }
            seen[y * w + x] = true;
            let mut stack = vec![(y, x)];
            let mut comp = Vec::new();
            while let Some((cy, cx)) = stack.pop() {
                comp.push((cy, cx));
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let (ny, nx) = (cy as isize + dy, cx as isize + dx);
                        if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if mask.get(ny, nx) && !seen[ny * w + nx] {
                            seen[ny * w + nx] = true;
                            stack.push((ny, nx));
                        }
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
    }
    out
}

/// `CROP_SIZE` window centered on `bbox` with pixels outside `mask` set to
/// [`CROP_BACKGROUND`]. Used for detections and references alike so the
/// identity embedder sees both the same way.
pub fn masked_crop(image: &LatentGrid<f32>, mask: &SegmentationMask, bbox: &BBox) -> LatentGrid<f32> {
    let (h, w) = (image.height(), image.width());
    let (y0, x0) = crop_window(bbox, CROP_SIZE, h, w);
    let mut crop = image.crop(y0, x0, CROP_SIZE, CROP_SIZE).expect("crop window lies inside the image");
    for y in 0..CROP_SIZE {
        for x in 0..CROP_SIZE {
            if !mask.get(y0 + y, x0 + x) {
                for c in 0..3 {
                    crop.set(y, x, c, CROP_BACKGROUND);
                }
            }
        }
    }
    crop
}

/// One detection per foreground component of at least `min_area` pixels,
/// largest first (ties by top-left pixel).
pub fn detect_subjects(image: &LatentGrid<f32>, cfg: &DetectorConfig) -> Vec<Detection> {
    assert_eq!(image.channels(), 3, "RGB image expected");
    let (h, w) = (image.height(), image.width());
    if h < CROP_SIZE || w < CROP_SIZE {
        return Vec::new();
    }
    let bg = estimate_background(image);
    let fg = foreground(image, cfg.threshold);
    let mut comps: Vec<_> = components(&fg).into_iter().filter(|c| c.len() >= cfg.min_area).collect();
    comps.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    comps
        .into_iter()
        .map(|comp| {
            let mut mask = SegmentationMask::new(h, w);
            let mut strength = 0.0;
            for &(y, x) in &comp {
                mask.set(y, x, true);
                strength += (dist(pixel(image, y, x), bg) / (2.0 * cfg.threshold)).min(1.0);
            }
            let bbox = BBox::of(h, w, |y, x| mask.get(y, x)).expect("component is non-empty");
            Detection { crop: masked_crop(image, &mask, &bbox), bbox, confidence: strength / comp.len() as f64, mask }
        })
        .collect()
}
