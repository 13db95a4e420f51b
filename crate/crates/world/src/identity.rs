//! Glyph identities: a polar-harmonic outline and a three-color palette.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::color::{dist, field_color, hsv, Rgb};
use crate::vocab::Hue;

/// Outline `r(theta) = radius * (1 + amplitude * cos(lobes * theta - 2 pi phase))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub lobes: u32,
    pub amplitude: f64,
    /// Fraction of a full turn, in `[0, 1)`.
    pub phase: f64,
    pub radius: f64,
}

/// Parameter box for generated shapes.
pub const LOBES: (u32, u32) = (2, 5);
pub const AMPLITUDE: (f64, f64) = (0.12, 0.28);
pub const RADIUS: (f64, f64) = (4.2, 5.4);
/// Largest outline radius; keeps every glyph inside a 14x14 box.
pub const MAX_EXTENT: f64 = 6.9;

/// Two identities must differ by at least this much in one shape parameter
/// (lobe counts differ by whole numbers, so any difference there counts).
pub const MARGIN_AMPLITUDE: f64 = 0.04;
pub const MARGIN_PHASE: f64 = 0.1;
pub const MARGIN_RADIUS: f64 = 0.3;

/// Minimum RGB distance between any palette color and any field color.
pub const PALETTE_FIELD_GAP: f64 = 0.3;

impl ShapeParams {
    pub fn outline(&self, theta: f64) -> f64 {
        let tau = std::f64::consts::TAU;
        (self.radius * (1.0 + self.amplitude * (self.lobes as f64 * theta - tau * self.phase).cos())).min(MAX_EXTENT)
    }

    pub fn in_box(&self) -> bool {
        (LOBES.0..=LOBES.1).contains(&self.lobes)
            && (AMPLITUDE.0..=AMPLITUDE.1).contains(&self.amplitude)
            && (0.0..1.0).contains(&self.phase)
            && (RADIUS.0..=RADIUS.1).contains(&self.radius)
    }

    pub fn separated(&self, other: &ShapeParams) -> bool {
        let dp = (self.phase - other.phase).rem_euclid(1.0);
        self.lobes != other.lobes
            || (self.amplitude - other.amplitude).abs() >= MARGIN_AMPLITUDE
            || dp.min(1.0 - dp) >= MARGIN_PHASE
            || (self.radius - other.radius).abs() >= MARGIN_RADIUS
    }

    pub fn as_vec(&self) -> Vec<f64> {
        vec![self.lobes as f64, self.amplitude, self.phase, self.radius]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlyphIdentity {
    pub id: u32,
    pub shape: ShapeParams,
    /// Body, core and stripe colors.
    pub palette: [Rgb; 3],
}

impl GlyphIdentity {
    /// Color word for the body color.
    pub fn hue_name(&self) -> Hue {
        Hue::nearest(crate::color::to_hsv(self.palette[0]).0)
    }
}

fn saturated(rng: &mut impl Rng, hue: f64) -> Rgb {
    loop {
        let c = hsv(hue, rng.random_range(0.7..1.0), rng.random_range(0.75..1.0));
        if Hue::ALL.iter().all(|&h| dist(c, field_color(h)) >= PALETTE_FIELD_GAP) {
            return c;
        }
    }
}

fn random_palette(rng: &mut impl Rng) -> [Rgb; 3] {
    let h0: f64 = rng.random();
    let h1 = h0 + rng.random_range(0.25..0.75);
    let h2: f64 = rng.random();
    [saturated(rng, h0), saturated(rng, h1), saturated(rng, h2)]
}

/// Draws `n` identities whose shapes are pairwise separated.
pub fn generate_identities(n: usize, rng: &mut impl Rng) -> Vec<GlyphIdentity> {
    let mut out: Vec<GlyphIdentity> = Vec::with_capacity(n);
    while out.len() < n {
        let shape = ShapeParams {
            lobes: rng.random_range(LOBES.0..=LOBES.1),
            amplitude: rng.random_range(AMPLITUDE.0..=AMPLITUDE.1),
            phase: rng.random_range(0.0..1.0),
            radius: rng.random_range(RADIUS.0..=RADIUS.1),
        };
        if out.iter().any(|o| !o.shape.separated(&shape)) {
            continue;
        }
        let palette = random_palette(rng);
        out.push(GlyphIdentity { id: out.len() as u32, shape, palette });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identities_are_unique_separated_and_in_box() {
        let ids = generate_identities(80, &mut ChaCha8Rng::seed_from_u64(1));
        for (i, a) in ids.iter().enumerate() {
            assert_eq!(a.id as usize, i);
            assert!(a.shape.in_box());
            for b in &ids[i + 1..] {
                assert!(a.shape.separated(&b.shape));
            }
            for c in a.palette {
                assert!(c.iter().all(|v| (0.0..=1.0).contains(v)));
                for h in Hue::ALL {
                    assert!(dist(c, field_color(h)) >= PALETTE_FIELD_GAP);
                }
            }
        }
    }

    #[test]
    fn outline_is_bounded() {
        let s = ShapeParams { lobes: 3, amplitude: AMPLITUDE.1, phase: 0.0, radius: RADIUS.1 };
        for i in 0..360 {
            let r = s.outline(i as f64 / 360.0 * std::f64::consts::TAU);
            assert!(r <= MAX_EXTENT && r >= RADIUS.1 * (1.0 - AMPLITUDE.1) - 1e-12);
        }
    }
}
