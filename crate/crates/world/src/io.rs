//! PNG encoding and the on-disk dataset layout.
//!
//! ```text
//! <dir>/<split>/images/00000.png   RGB, 8 bit
//! <dir>/<split>/masks/00000.png    gray, 8 bit panoptic labels
//! <dir>/<split>.json               manifest
//! ```

use std::fs;
use std::io::{BufReader, Cursor};
use std::path::{Path, PathBuf};

use glyphcomp_core::{GridShape, LatentGrid};
use serde::{Deserialize, Serialize};

use crate::error::{Result, WorldError};
use crate::grammar::PhraseSpan;
use crate::identity::GlyphIdentity;
use crate::scene::{Scene, Segment, Split, World, WorldConfig};
use crate::vocab::{detokenize, Hue, Style};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PngColor {
    Gray,
    Rgb,
}

impl PngColor {
    fn channels(self) -> usize {
        match self {
            PngColor::Gray => 1,
            PngColor::Rgb => 3,
        }
    }
}

/// Encodes 8-bit pixels with optional `tEXt` chunks. Output depends only on
/// the inputs.
pub fn encode_png(width: usize, height: usize, color: PngColor, data: &[u8], text: &[(&str, &str)]) -> Vec<u8> {
    assert_eq!(data.len(), width * height * color.channels(), "png buffer size");
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(match color {
            PngColor::Gray => png::ColorType::Grayscale,
            PngColor::Rgb => png::ColorType::Rgb,
        });
        enc.set_depth(png::BitDepth::Eight);
        for (k, v) in text {
            enc.add_text_chunk(k.to_string(), v.to_string()).expect("latin-1 text chunk");
        }
        let mut w = enc.write_header().expect("in-memory png header");
        w.write_image_data(data).expect("in-memory png data");
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedPng {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
    pub text: Vec<(String, String)>,
}

pub fn decode_png(bytes: &[u8], path: &Path) -> Result<DecodedPng> {
    let dec = png::Decoder::new(BufReader::new(Cursor::new(bytes)));
    let mut reader = dec.read_info().map_err(|e| WorldError::format(path, e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| WorldError::format(path, "png too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| WorldError::format(path, e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(WorldError::format(path, "only 8-bit images are supported"));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(WorldError::format(path, format!("unsupported color type {other:?}"))),
    };
    buf.truncate(info.buffer_size());
    let text = reader.info().uncompressed_latin1_text.iter().map(|t| (t.keyword.clone(), t.text.clone())).collect();
    Ok(DecodedPng { width: info.width as usize, height: info.height as usize, channels, data: buf, text })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| WorldError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| WorldError::io(path, e))
}

pub fn read_png(path: &Path) -> Result<DecodedPng> {
    let bytes = fs::read(path).map_err(|e| WorldError::io(path, e))?;
    decode_png(&bytes, path)
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn grid_to_png(g: &LatentGrid<f32>, text: &[(&str, &str)]) -> Vec<u8> {
    assert_eq!(g.channels(), 3, "RGB grid expected");
    let data: Vec<u8> = g.data.iter().map(|&v| quantize(v)).collect();
    encode_png(g.width(), g.height(), PngColor::Rgb, &data, text)
}

pub fn png_to_grid(p: &DecodedPng, path: &Path) -> Result<LatentGrid<f32>> {
    if p.channels != 3 {
        return Err(WorldError::format(path, "expected an RGB image"));
    }
    let data = p.data.iter().map(|&b| b as f32 / 255.0).collect();
    Ok(LatentGrid::from_vec(GridShape::new(p.height, p.width, 3), data)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub span: PhraseSpan,
    pub segment: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub index: u64,
    pub image: String,
    pub panoptic: String,
    pub caption: String,
    pub caption_tokens: Vec<usize>,
    pub field: Hue,
    pub style: Style,
    pub segments: Vec<Segment>,
    pub gt_pairs: Vec<PairRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub world_seed: u64,
    pub split: Split,
    pub world: WorldConfig,
    pub identities: Vec<GlyphIdentity>,
    pub scenes: Vec<SceneRecord>,
}

pub fn manifest_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.json", split.name()))
}

/// Writes `count` scenes of `split` with their manifest.
pub fn write_split(dir: &Path, world: &World, split: Split, count: u64, config_hash: &str) -> Result<Manifest> {
    let mut scenes = Vec::with_capacity(count as usize);
    let text = [("config_hash", config_hash)];
    for i in 0..count {
        let s = world.scene(split, i)?;
        let image = format!("{}/images/{i:05}.png", split.name());
        let panoptic = format!("{}/masks/{i:05}.png", split.name());
        write_file(&dir.join(&image), &grid_to_png(&s.image, &text))?;
        write_file(&dir.join(&panoptic), &encode_png(s.width(), s.height(), PngColor::Gray, &s.panoptic, &text))?;
        scenes.push(SceneRecord {
            index: i,
            image,
            panoptic,
            caption: detokenize(&s.caption),
            caption_tokens: s.caption.clone(),
            field: s.field,
            style: s.style,
            segments: s.segments.clone(),
            gt_pairs: s.gt_pairs.iter().map(|&(span, segment)| PairRecord { span, segment }).collect(),
        });
    }
    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        config_hash: config_hash.to_string(),
        world_seed: world.seed,
        split,
        world: world.config.clone(),
        identities: world.pool(split).to_vec(),
        scenes,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_file(&manifest_path(dir, split), &json)?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let bytes = fs::read(path).map_err(|e| WorldError::io(path, e))?;
    let v: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| WorldError::format(path, e.to_string()))?;
    match v.get("schema_version").and_then(|s| s.as_u64()) {
        Some(n) if n == MANIFEST_SCHEMA_VERSION as u64 => {}
        Some(n) => return Err(WorldError::format(path, format!("unsupported manifest schema_version {n}"))),
        None => return Err(WorldError::format(path, "manifest has no schema_version")),
    }
    serde_json::from_value(v).map_err(|e| WorldError::format(path, e.to_string()))
}

/// Loads a persisted scene (image values are 8-bit quantized).
pub fn load_scene(dir: &Path, split: Split, rec: &SceneRecord) -> Result<Scene> {
    let ipath = dir.join(&rec.image);
    let image = png_to_grid(&read_png(&ipath)?, &ipath)?;
    let mpath = dir.join(&rec.panoptic);
    let mask = read_png(&mpath)?;
    if mask.channels != 1 || mask.width != image.width() || mask.height != image.height() {
        return Err(WorldError::format(&mpath, "panoptic mask must be single-channel and match the image size"));
    }
    Ok(Scene {
        split,
        index: rec.index,
        image,
        panoptic: mask.data,
        segments: rec.segments.clone(),
        caption: rec.caption_tokens.clone(),
        gt_pairs: rec.gt_pairs.iter().map(|p| (p.span, p.segment)).collect(),
        field: rec.field,
        style: rec.style,
    })
}
