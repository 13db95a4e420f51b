//! Greedy phrase-to-segment matching.

use crate::color::{glyph_color, Rgb};
use crate::grammar::PhraseSpan;
use crate::scene::Scene;
use crate::vocab::{Hue, GLYPH};

/// One selected pair, in selection order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchPair {
    pub phrase: usize,
    pub segment: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    pub pairs: Vec<MatchPair>,
    /// Segment index for each phrase, if matched.
    pub phrase_to_segment: Vec<Option<usize>>,
}

/// Repeatedly takes the globally best remaining `(row, col)` of `scores`
/// (ties: lowest row, then lowest column), removing both, until either side
/// runs out or the best score falls below `threshold`.
pub fn greedy_assign(scores: &[Vec<f64>], cols: usize, threshold: f64) -> Vec<MatchPair> {
    let rows = scores.len();
    let mut row_used = vec![false; rows];
    let mut col_used = vec![false; cols];
    let mut pairs = Vec::new();
    loop {
        let mut best: Option<MatchPair> = None;
        for (i, row) in scores.iter().enumerate() {
            if row_used[i] {
                continue;
            }
            for (j, &s) in row.iter().enumerate().take(cols) {
                if col_used[j] {
                    continue;
                }
                if best.is_none_or(|b| s > b.score) {
                    best = Some(MatchPair { phrase: i, segment: j, score: s });
                }
            }
        }
        match best {
            Some(b) if b.score >= threshold => {
                row_used[b.phrase] = true;
                col_used[b.segment] = true;
                pairs.push(b);
            }
            _ => return pairs,
        }
    }
}

/// Matches phrases to segments by `image_sim * label_sim`.
pub fn greedy_match<P, G>(
    phrases: &[P],
    segments: &[G],
    image_sim: impl Fn(&P, &G) -> f64,
    label_sim: impl Fn(&P, &G) -> f64,
    threshold: f64,
) -> Matching {
    let scores: Vec<Vec<f64>> =
        phrases.iter().map(|p| segments.iter().map(|g| image_sim(p, g) * label_sim(p, g)).collect()).collect();
    let pairs = greedy_assign(&scores, segments.len(), threshold);
    let mut phrase_to_segment = vec![None; phrases.len()];
    for p in &pairs {
        phrase_to_segment[p.phrase] = Some(p.segment);
    }
    Matching { pairs, phrase_to_segment }
}

/// A phrase as seen by the matcher: its head token and optional color word.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhraseDesc {
    pub head_label: usize,
    pub color: Option<Hue>,
}

/// A segment as seen by the matcher: class token and typical pixel color.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentDesc {
    pub class_label: usize,
    pub mean_color: Rgb,
}

pub fn describe_phrases(tokens: &[usize], spans: &[PhraseSpan]) -> Vec<PhraseDesc> {
    spans
        .iter()
        .map(|s| PhraseDesc { head_label: s.head_label, color: tokens[s.start..s.end].iter().find_map(|&t| Hue::from_token(t)) })
        .collect()
}

/// Segment color is the per-channel median over its brightest pixels
/// (max channel above 0.4), which ignores stripe shading.
pub fn describe_segments(scene: &Scene) -> Vec<SegmentDesc> {
    let (h, w) = (scene.height(), scene.width());
    scene
        .segments
        .iter()
        .map(|s| {
            let mut px: Vec<Rgb> = Vec::new();
            let mut all: Vec<Rgb> = Vec::new();
            for y in 0..h {
                for x in 0..w {
                    if scene.panoptic[y * w + x] == s.id {
                        let p = [0, 1, 2].map(|c| scene.image.get(y, x, c) as f64);
                        if p.iter().cloned().fold(0.0, f64::max) > 0.4 {
                            px.push(p);
                        }
                        all.push(p);
                    }
                }
            }
            let src = if px.is_empty() { &all } else { &px };
            SegmentDesc { class_label: GLYPH, mean_color: median_color(src) }
        })
        .collect()
}

fn median_color(px: &[Rgb]) -> Rgb {
    if px.is_empty() {
        return [0.5; 3];
    }
    [0, 1, 2].map(|c| {
        let mut v: Vec<f64> = px.iter().map(|p| p[c]).collect();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    })
}

/// Normalized correlation between the segment color and the color the phrase
/// names, each centered on its own channel mean (so only chroma counts),
/// mapped to `[0, 1]`.
/// Phrases without a color word score 0.5 against every segment.
pub fn color_image_sim(p: &PhraseDesc, g: &SegmentDesc) -> f64 {
    let Some(h) = p.color else { return 0.5 };
    let a = chroma(glyph_color(h));
    let b = chroma(g.mean_color);
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.5;
    }
    (1.0 + (dot / (na * nb)).clamp(-1.0, 1.0)) / 2.0
}

fn chroma(c: Rgb) -> Rgb {
    let m = (c[0] + c[1] + c[2]) / 3.0;
    c.map(|v| v - m)
}

/// 1 when the phrase head names the segment's class, 0.1 otherwise.
pub fn class_label_sim(p: &PhraseDesc, g: &SegmentDesc) -> f64 {
    if p.head_label == g.class_label {
        1.0
    } else {
        0.1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_candidate() {
        let m = greedy_assign(&[vec![0.9]], 1, 0.0);
        assert_eq!(m, vec![MatchPair { phrase: 0, segment: 0, score: 0.9 }]);
    }

    #[test]
    fn hand_simulated_order() {
        let m = greedy_assign(&[vec![0.9, 0.2], vec![0.8, 0.7]], 2, 0.0);
        let got: Vec<(usize, usize)> = m.iter().map(|p| (p.phrase, p.segment)).collect();
        assert_eq!(got, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn threshold_and_ties() {
        assert!(greedy_assign(&[vec![0.3]], 1, 0.5).is_empty());
        let m = greedy_assign(&[vec![0.5, 0.5], vec![0.5, 0.5]], 2, 0.0);
        let got: Vec<(usize, usize)> = m.iter().map(|p| (p.phrase, p.segment)).collect();
        assert_eq!(got, vec![(0, 0), (1, 1)]);
        assert!(greedy_assign(&[], 3, 0.0).is_empty());
        assert!(greedy_assign(&[vec![], vec![]], 0, 0.0).is_empty());
    }

    #[test]
    fn similarity_ranges() {
        let p = PhraseDesc { head_label: GLYPH, color: Some(Hue::Red) };
        let red = SegmentDesc { class_label: GLYPH, mean_color: glyph_color(Hue::Red) };
        let cyan = SegmentDesc { class_label: GLYPH, mean_color: glyph_color(Hue::Cyan) };
        assert!((color_image_sim(&p, &red) - 1.0).abs() < 1e-12);
        assert!(color_image_sim(&p, &cyan) < 0.2);
        let q = PhraseDesc { head_label: GLYPH, color: None };
        assert_eq!(color_image_sim(&q, &red), 0.5);
        assert_eq!(class_label_sim(&PhraseDesc { head_label: 0, color: None }, &red), 0.1);
    }
}
