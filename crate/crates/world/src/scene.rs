//! World configuration, identity splits and lazily generated scenes.

use glyphcomp_core::{GridShape, LatentGrid, SegmentationMask};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, WorldError};
use crate::grammar::{chunk_phrases, compose_caption, PhraseSpan};
use crate::identity::{generate_identities, GlyphIdentity};
use crate::render::{draw_glyph, extent, BBox, Canvas};
use crate::vocab::{Hue, Style};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub height: usize,
    pub width: usize,
    pub train_identities: usize,
    pub heldout_identities: usize,
    /// Relative weight of 1, 2, ... subjects per scene (at most 4 entries).
    pub count_weights: Vec<f64>,
    /// Relative weights of plain, striped and hollow scenes.
    pub style_weights: [f64; 3],
    /// Chance that a singular phrase names its glyph's color.
    pub color_word_prob: f64,
    /// Chance that a multi-subject caption uses a numbered plural.
    pub plural_prob: f64,
    /// Amplitude of the uniform per-channel noise on the field.
    pub field_noise: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            height: 32,
            width: 32,
            train_identities: 64,
            heldout_identities: 16,
            count_weights: vec![0.3, 0.4, 0.2, 0.1],
            style_weights: [1.0, 1.0, 1.0],
            color_word_prob: 0.5,
            plural_prob: 0.3,
            field_noise: 0.02,
        }
    }
}

/// Cells must hold the largest glyph (14 px) plus a one-pixel margin.
const MIN_CELL: usize = 14;

impl WorldConfig {
    pub fn max_subjects(&self) -> usize {
        self.count_weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(WorldError::Config(m));
        if self.height == 0 || self.width == 0 {
            return bad("image dimensions must be positive".into());
        }
        if self.train_identities + self.heldout_identities == 0 {
            return bad("identity pool is empty".into());
        }
        if self.count_weights.is_empty() || self.count_weights.len() > 4 {
            return bad(format!("count weights must cover 1..=k subjects with k in 1..=4, got {}", self.count_weights.len()));
        }
        if self.count_weights.iter().chain(&self.style_weights).any(|w| !w.is_finite() || *w < 0.0)
            || self.count_weights.iter().sum::<f64>() <= 0.0
            || self.style_weights.iter().sum::<f64>() <= 0.0
        {
            return bad("weights must be non-negative with a positive sum".into());
        }
        for p in [self.color_word_prob, self.plural_prob] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("probability {p} outside [0, 1]"));
            }
        }
        if !(0.0..0.5).contains(&self.field_noise) {
            return bad(format!("field noise {} outside [0, 0.5)", self.field_noise));
        }
        let need = if self.max_subjects() > 1 { 2 * MIN_CELL + 4 } else { MIN_CELL + 2 };
        if self.height < need || self.width < need {
            return bad(format!("{}x{} image cannot hold {} glyphs; need at least {need}x{need}", self.height, self.width, self.max_subjects()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Heldout => "heldout",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    /// Panoptic label, `1..=k`.
    pub id: u8,
    pub identity: u32,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub split: Split,
    pub index: u64,
    /// `H x W x 3`, values in `[0, 1]`.
    pub image: LatentGrid<f32>,
    /// `H x W` labels: 0 is background, `k` the k-th segment.
    pub panoptic: Vec<u8>,
    pub segments: Vec<Segment>,
    /// Caption as generated (numbered plurals not yet expanded).
    pub caption: Vec<usize>,
    /// Phrase spans in the expanded caption paired with segment labels.
    pub gt_pairs: Vec<(PhraseSpan, u8)>,
    pub field: Hue,
    pub style: Style,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn segment_mask(&self, label: u8) -> SegmentationMask {
        let w = self.width();
        SegmentationMask::from_fn(self.height(), w, |y, x| self.panoptic[y * w + x] == label)
    }

    pub fn segment(&self, label: u8) -> Option<&Segment> {
        self.segments.iter().find(|s| s.id == label)
    }
}

/// Glyphs laid out on a field, before any caption is attached.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub canvas: Canvas,
    /// Segments in caption order (left to right, then top to bottom).
    pub segments: Vec<Segment>,
}

fn cells(h: usize, w: usize, k: usize, rng: &mut impl Rng) -> Vec<BBox> {
    // One-pixel border and a one-pixel gutter between cells.
    let (hy, hx) = (h / 2, w / 2);
    let full = BBox { x0: 1, y0: 1, x1: w - 1, y1: h - 1 };
    let left = BBox { x1: hx, ..full };
    let right = BBox { x0: hx + 1, ..full };
    let top = BBox { y1: hy, ..full };
    let bottom = BBox { y0: hy + 1, ..full };
    let quad = |a: BBox, b: BBox| BBox { x0: a.x0.max(b.x0), y0: a.y0.max(b.y0), x1: a.x1.min(b.x1), y1: a.y1.min(b.y1) };
    let quads = [quad(left, top), quad(right, top), quad(left, bottom), quad(right, bottom)];
    match k {
        1 => vec![full],
        2 if rng.random::<bool>() => vec![left, right],
        2 => vec![top, bottom],
        3 => match rng.random_range(0..4) {
            0 => vec![left, quads[1], quads[3]],
            1 => vec![right, quads[0], quads[2]],
            2 => vec![top, quads[2], quads[3]],
            _ => vec![bottom, quads[0], quads[1]],
        },
        _ => quads.to_vec(),
    }
}

/// Places each identity in its own cell of a fresh field and draws it.
pub fn render_layout(
    height: usize,
    width: usize,
    identities: &[&GlyphIdentity],
    field: Hue,
    style: Style,
    field_noise: f64,
    rng: &mut impl Rng,
) -> Layout {
    assert!((1..=4).contains(&identities.len()), "1..=4 glyphs per scene");
    let mut canvas = Canvas::field(height, width, field, field_noise, rng);
    let cells = cells(height, width, identities.len(), rng);
    let mut placed = Vec::with_capacity(identities.len());
    for (id, cell) in identities.iter().zip(&cells) {
        let e = extent(id);
        let cy = rng.random_range(cell.y0 + e..cell.y1 - e);
        let cx = rng.random_range(cell.x0 + e..cell.x1 - e);
        placed.push((cx, cy, *id));
    }
    placed.sort_by_key(|p| (p.0, p.1));
    let mut segments = Vec::with_capacity(placed.len());
    for (i, (cx, cy, id)) in placed.into_iter().enumerate() {
        let label = i as u8 + 1;
        draw_glyph(&mut canvas, id, style, cy, cx, label);
        let labels = &canvas.labels;
        let bbox = BBox::of(height, width, |y, x| labels[y * width + x] == label).expect("glyph paints pixels");
        segments.push(Segment { id: label, identity: id.id, bbox });
    }
    Layout { canvas, segments }
}

pub fn canvas_to_grid(c: &Canvas) -> LatentGrid<f32> {
    LatentGrid::from_vec(GridShape::new(c.height, c.width, 3), c.rgb.iter().map(|&v| v as f32).collect())
        .expect("canvas has H*W*3 values")
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream for `(seed, stream, index)`.
pub fn derived_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(mix(seed) ^ stream) ^ index))
}

fn categorical(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Identity pool split into training and held-out identities. Scenes are
/// generated on demand from `(seed, split, index)`.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub seed: u64,
    pub identities: Vec<GlyphIdentity>,
}

pub fn generate_world(config: WorldConfig, seed: u64) -> Result<World> {
    config.validate()?;
    let n = config.train_identities + config.heldout_identities;
    let identities = generate_identities(n, &mut derived_rng(seed, 0x1de5, 0));
    Ok(World { config, seed, identities })
}

impl World {
    pub fn pool(&self, split: Split) -> &[GlyphIdentity] {
        let t = self.config.train_identities;
        match split {
            Split::Train => &self.identities[..t],
            Split::Heldout => &self.identities[t..],
        }
    }

    pub fn identity(&self, id: u32) -> &GlyphIdentity {
        &self.identities[id as usize]
    }

    /// Scene `index` of `split`. Pure in `(config, seed, split, index)`.
    pub fn scene(&self, split: Split, index: u64) -> Result<Scene> {
        let pool = self.pool(split);
        if pool.is_empty() {
            return Err(WorldError::Config(format!("{} split has no identities", split.name())));
        }
        let cfg = &self.config;
        let mut rng = derived_rng(self.seed, 1 + split as u64, index);
        let k = (categorical(&cfg.count_weights, &mut rng) + 1).min(pool.len());
        let mut chosen: Vec<&GlyphIdentity> = pool.iter().collect();
        chosen.shuffle(&mut rng);
        chosen.truncate(k);
        let field = Hue::ALL[rng.random_range(0..Hue::ALL.len())];
        let style = Style::ALL[categorical(&cfg.style_weights, &mut rng)];
        let layout = render_layout(cfg.height, cfg.width, &chosen, field, style, cfg.field_noise, &mut rng);
        let plural = k >= 2 && rng.random::<f64>() < cfg.plural_prob;
        let colors: Vec<Option<Hue>> = layout
            .segments
            .iter()
            .map(|s| {
                let named = rng.random::<f64>() < cfg.color_word_prob;
                (named && !plural).then(|| self.identity(s.identity).hue_name())
            })
            .collect();
        let caption = compose_caption(&colors, plural, Some(field), style);
        let spans = chunk_phrases(&caption)?.spans;
        let gt_pairs = spans.into_iter().zip(layout.segments.iter().map(|s| s.id)).collect();
        Ok(Scene {
            split,
            index,
            image: canvas_to_grid(&layout.canvas),
            panoptic: layout.canvas.labels,
            segments: layout.segments,
            caption,
            gt_pairs,
            field,
            style,
        })
    }

    pub fn scenes(&self, split: Split, count: u64) -> Result<Vec<Scene>> {
        (0..count).map(|i| self.scene(split, i)).collect()
    }
}
