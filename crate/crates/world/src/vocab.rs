//! Token vocabulary of the caption grammar.

use serde::{Deserialize, Serialize};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const A: usize = 2;
pub const GLYPH: usize = 3;
pub const AND: usize = 4;
pub const ON: usize = 5;
pub const FIELD: usize = 6;
pub const COMMA: usize = 7;
pub const TWO: usize = 8;
pub const THREE: usize = 9;
pub const FOUR: usize = 10;
const FIRST_HUE: usize = 11;
const FIRST_STYLE: usize = FIRST_HUE + Hue::ALL.len();

pub const WORDS: [&str; 21] = [
    "<bos>", "<eos>", "a", "glyph", "and", "on", "field", ",", "two", "three", "four", "red", "orange", "yellow", "green",
    "cyan", "blue", "purple", "pink", "striped", "hollow",
];

pub const VOCAB_SIZE: usize = WORDS.len();

/// Named hues used for field colors and glyph color words.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hue {
    Red,
    Orange,
    Yellow,
    Green,
    Cyan,
    Blue,
    Purple,
    Pink,
}

impl Hue {
    pub const ALL: [Hue; 8] = [Hue::Red, Hue::Orange, Hue::Yellow, Hue::Green, Hue::Cyan, Hue::Blue, Hue::Purple, Hue::Pink];

    /// Hue angle as a fraction of the color wheel.
    pub fn angle(self) -> f64 {
        match self {
            Hue::Red => 0.0,
            Hue::Orange => 30.0 / 360.0,
            Hue::Yellow => 60.0 / 360.0,
            Hue::Green => 120.0 / 360.0,
            Hue::Cyan => 180.0 / 360.0,
            Hue::Blue => 230.0 / 360.0,
            Hue::Purple => 280.0 / 360.0,
            Hue::Pink => 330.0 / 360.0,
        }
    }

    pub fn token(self) -> usize {
        FIRST_HUE + self as usize
    }

    pub fn from_token(t: usize) -> Option<Hue> {
        (FIRST_HUE..FIRST_STYLE).contains(&t).then(|| Hue::ALL[t - FIRST_HUE])
    }

    /// Name of the hue closest (circularly) to `h` in `[0, 1)`.
    pub fn nearest(h: f64) -> Hue {
        let dist = |a: f64| {
            let d = (h - a).rem_euclid(1.0);
            d.min(1.0 - d)
        };
        *Hue::ALL
            .iter()
            .min_by(|a, b| dist(a.angle()).total_cmp(&dist(b.angle())))
            .unwrap()
    }
}

/// Rendering style shared by every glyph of a scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    Plain,
    Striped,
    Hollow,
}

impl Style {
    pub const ALL: [Style; 3] = [Style::Plain, Style::Striped, Style::Hollow];

    /// Plain glyphs carry no style word.
    pub fn token(self) -> Option<usize> {
        match self {
            Style::Plain => None,
            Style::Striped => Some(FIRST_STYLE),
            Style::Hollow => Some(FIRST_STYLE + 1),
        }
    }

    pub fn from_token(t: usize) -> Option<Style> {
        match t.checked_sub(FIRST_STYLE) {
            Some(0) => Some(Style::Striped),
            Some(1) => Some(Style::Hollow),
            _ => None,
        }
    }
}

pub fn number_token(n: usize) -> Option<usize> {
    match n {
        2 => Some(TWO),
        3 => Some(THREE),
        4 => Some(FOUR),
        _ => None,
    }
}

pub fn number_value(t: usize) -> Option<usize> {
    match t {
        TWO => Some(2),
        THREE => Some(3),
        FOUR => Some(4),
        _ => None,
    }
}

pub fn word(t: usize) -> &'static str {
    WORDS.get(t).copied().unwrap_or("<unk>")
}

pub fn token_id(w: &str) -> Option<usize> {
    WORDS.iter().position(|&x| x == w)
}

/// Space-separated words to token ids.
pub fn tokenize(text: &str) -> Option<Vec<usize>> {
    text.split_whitespace().map(token_id).collect()
}

pub fn detokenize(tokens: &[usize]) -> String {
    tokens.iter().map(|&t| word(t)).collect::<Vec<_>>().join(" ")
}
