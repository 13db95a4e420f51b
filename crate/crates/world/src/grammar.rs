//! Caption grammar, parser, noun-phrase chunking and plural expansion.
//!
//! ```text
//! caption := [<bos>] list "on" "a" [hue] "field" ["," style] [<eos>]
//! list    := item ("and" item)*
//! item    := "a" [hue] "glyph" | number [hue] "glyph"
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, WorldError};
use crate::vocab::{self, Hue, Style, A, AND, BOS, COMMA, EOS, FIELD, GLYPH, ON};

/// One subject mention as written (a numbered plural counts several).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub color: Option<Hue>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedCaption {
    pub mentions: Vec<Mention>,
    pub field: Option<Hue>,
    pub style: Option<Style>,
}

impl ParsedCaption {
    pub fn subject_count(&self) -> usize {
        self.mentions.iter().map(|m| m.count).sum()
    }
}

/// Token range `[start, end)` of a singular noun phrase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PhraseSpan {
    pub start: usize,
    pub end: usize,
    /// Token naming the subject class.
    pub head_label: usize,
}

impl PhraseSpan {
    /// Position of the head token (the last token of the phrase).
    pub fn head_index(&self) -> usize {
        self.end - 1
    }
}

struct Cursor<'a> {
    toks: &'a [usize],
    pos: usize,
}

impl Cursor<'_> {
    fn peek(&self) -> Option<usize> {
        self.toks.get(self.pos).copied()
    }

    fn err(&self, expected: &str) -> WorldError {
        let found = match self.peek() {
            Some(t) if t < vocab::VOCAB_SIZE => format!("'{}'", vocab::word(t)),
            Some(t) => format!("unknown token id {t}"),
            None => "end of caption".to_string(),
        };
        WorldError::Parse { position: self.pos, message: format!("expected {expected}, found {found}") }
    }

    fn expect(&mut self, t: usize, what: &str) -> Result<()> {
        if self.peek() == Some(t) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(what))
        }
    }

    fn hue(&mut self) -> Option<Hue> {
        let h = self.peek().and_then(Hue::from_token)?;
        self.pos += 1;
        Some(h)
    }
}

pub fn parse_caption(tokens: &[usize]) -> Result<ParsedCaption> {
    let mut c = Cursor { toks: tokens, pos: 0 };
    let bos = c.peek() == Some(BOS);
    if bos {
        c.pos += 1;
    }
    let mut mentions = Vec::new();
    loop {
        let count = match c.peek() {
            Some(A) => 1,
            Some(t) if vocab::number_value(t).is_some() => vocab::number_value(t).unwrap(),
            _ => return Err(c.err("'a' or a number")),
        };
        c.pos += 1;
        let color = c.hue();
        c.expect(GLYPH, "'glyph'")?;
        mentions.push(Mention { color, count });
        if c.peek() == Some(AND) {
            c.pos += 1;
        } else {
            break;
        }
    }
    c.expect(ON, "'and' or 'on'")?;
    c.expect(A, "'a'")?;
    let field = c.hue();
    c.expect(FIELD, "a color or 'field'")?;
    let mut style = None;
    if c.peek() == Some(COMMA) {
        c.pos += 1;
        style = c.peek().and_then(Style::from_token);
        if style.is_none() {
            return Err(c.err("a style"));
        }
        c.pos += 1;
    }
    if bos {
        c.expect(EOS, "'<eos>'")?;
    } else if c.peek() == Some(EOS) {
        return Err(c.err("end of caption (no matching '<bos>')"));
    }
    if c.pos != tokens.len() {
        return Err(c.err("end of caption"));
    }
    Ok(ParsedCaption { mentions, field, style })
}

/// Result of chunking: the caption with numbered plurals expanded, and one
/// span per singular subject phrase in that expanded caption.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunked {
    pub tokens: Vec<usize>,
    pub spans: Vec<PhraseSpan>,
}

/// Rewrites "two [hue] glyph" as "a [hue] glyph and a [hue] glyph" and
/// returns the noun-phrase spans of the rewritten caption, ordered by start.
pub fn chunk_phrases(caption: &[usize]) -> Result<Chunked> {
    let parsed = parse_caption(caption)?;
    let mut tokens = Vec::with_capacity(caption.len() + 8);
    let mut spans = Vec::new();
    if caption.first() == Some(&BOS) {
        tokens.push(BOS);
    }
    let mut first = true;
    for m in &parsed.mentions {
        for _ in 0..m.count {
            if !first {
                tokens.push(AND);
            }
            first = false;
            let start = tokens.len();
            tokens.push(A);
            if let Some(h) = m.color {
                tokens.push(h.token());
            }
            tokens.push(GLYPH);
            spans.push(PhraseSpan { start, end: tokens.len(), head_label: GLYPH });
        }
    }
    // Everything after the subject list is copied unchanged.
    let tail = caption.iter().position(|&t| t == ON).expect("parsed caption has 'on'");
    tokens.extend_from_slice(&caption[tail..]);
    Ok(Chunked { tokens, spans })
}

/// Builds caption tokens for subjects listed in order.
pub fn compose_caption(colors: &[Option<Hue>], plural: bool, field: Option<Hue>, style: Style) -> Vec<usize> {
    let mut t = vec![BOS];
    if plural && colors.len() >= 2 && colors.iter().all(|c| *c == colors[0]) {
        t.push(vocab::number_token(colors.len()).expect("2..=4 subjects"));
        if let Some(h) = colors[0] {
            t.push(h.token());
        }
        t.push(GLYPH);
    } else {
        for (i, c) in colors.iter().enumerate() {
            if i > 0 {
                t.push(AND);
            }
            t.push(A);
            if let Some(h) = c {
                t.push(h.token());
            }
            t.push(GLYPH);
        }
    }
    t.extend([ON, A]);
    if let Some(h) = field {
        t.push(h.token());
    }
    t.push(FIELD);
    if let Some(s) = style.token() {
        t.extend([COMMA, s]);
    }
    t.push(EOS);
    t
}

/// Random caption from the grammar plus its true singular-subject count.
pub fn sample_caption(rng: &mut impl Rng) -> (Vec<usize>, usize) {
    let n = rng.random_range(1..=4);
    let hue = |rng: &mut dyn rand::RngCore| (rng.random::<f64>() < 0.5).then(|| Hue::ALL[rng.random_range(0..Hue::ALL.len())]);
    let plural = n >= 2 && rng.random::<f64>() < 0.4;
    let colors: Vec<Option<Hue>> = if plural {
        let c = hue(rng);
        vec![c; n]
    } else {
        (0..n).map(|_| hue(rng)).collect()
    };
    let field = hue(rng);
    let style = Style::ALL[rng.random_range(0..3)];
    (compose_caption(&colors, plural, field, style), n)
}
