//! Seeded synthetic corpora whose labels depend on layout.
//!
//! `Tables`: a title, then a header row over 2 to 4 columns and 3 to 6 data
//! rows. Every data cell is labelled `B-<TYPE>` by its column header, while
//! cell texts come from one pool shared by all columns. Headers are `O`.
//! The reading order shuffles the header row and each data row
//! independently, so neither the text nor the 1D order reveals a cell's
//! column. Column pitch exceeds the table height, which puts a cell's own
//! header in the upward angle bins and every other header in the sideways
//! ones.
//!
//! `Forms`: 3 to 6 key/value pairs on a slot grid, each value to the right
//! of or below its key. Pairs appear in shuffled order. Value tokens are
//! labelled by their key and drawn from a shared pool.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Document, Token};
use crate::error::{Error, Result};
use crate::rng::{domain, shuffle, stream};

pub const DEFAULT_EVAL_FRACTION: f64 = 0.25;

const PAGE_WIDTH: u32 = 850;
const PAGE_HEIGHT: u32 = 1100;
const CHAR_WIDTH: u32 = 9;
const LINE_HEIGHT: u32 = 14;

const COLUMN_TYPES: [(&str, &str); 6] = [
    ("qty", "QTY"),
    ("price", "PRICE"),
    ("tax", "TAX"),
    ("total", "TOTAL"),
    ("amount", "AMOUNT"),
    ("rate", "RATE"),
];

const CELL_VALUES: [&str; 30] = [
    "1", "2", "3", "4", "5", "8", "10", "12", "15", "20", "24", "30", "45", "50", "60", "75", "99",
    "100", "120", "150", "1.50", "2.75", "4.99", "7.20", "9.95", "12.00", "18.40", "25.00", "64.10",
    "99.90",
];

const TITLE_WORDS: [&str; 8] = [
    "invoice", "receipt", "order", "statement", "summary", "quote", "bill", "report",
];

const FORM_KEYS: [(&str, &str); 6] = [
    ("name", "NAME"),
    ("date", "DATE"),
    ("city", "CITY"),
    ("phone", "PHONE"),
    ("account", "ACCOUNT"),
    ("company", "COMPANY"),
];

const FORM_VALUES: [&str; 24] = [
    "north", "river", "alpha", "green", "stone", "lake", "park", "hill", "maple", "grant", "oak",
    "delta", "17", "42", "305", "2024", "11", "08", "7731", "cedar", "west", "bay", "orion", "vale",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusKind {
    Forms,
    Tables,
}

impl core::str::FromStr for CorpusKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forms" => Ok(CorpusKind::Forms),
            "tables" => Ok(CorpusKind::Tables),
            other => Err(Error::Config(format!("unknown corpus kind {other:?}"))),
        }
    }
}

impl core::fmt::Display for CorpusKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            CorpusKind::Forms => "forms",
            CorpusKind::Tables => "tables",
        })
    }
}

/// Generated documents; the last `n_eval` form the held-out split.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub kind: CorpusKind,
    pub seed: u64,
    pub docs: Vec<Document>,
    pub n_eval: usize,
}

impl SyntheticCorpus {
    pub fn train(&self) -> &[Document] {
        &self.docs[..self.docs.len() - self.n_eval]
    }

    pub fn eval(&self) -> &[Document] {
        &self.docs[self.docs.len() - self.n_eval..]
    }

    /// Moves the split so that `round(fraction · n)` documents are held out.
    pub fn with_eval_fraction(mut self, fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Config(format!("eval fraction {fraction} outside [0, 1)")));
        }
        self.n_eval = libm::round(fraction * self.docs.len() as f64) as usize;
        Ok(self)
    }
}

/// Document `i` depends only on `(seed, kind, i)`, so growing `n_docs`
/// extends the corpus without changing earlier documents.
pub fn generate_synthetic_corpus(kind: CorpusKind, n_docs: usize, seed: u64) -> Result<SyntheticCorpus> {
    if n_docs == 0 {
        return Err(Error::Config("n_docs must be at least 1".into()));
    }
    let docs = (0..n_docs)
        .map(|i| {
            let mut rng = stream(seed, domain::SYNTH, i as u64);
            let id = format!("{kind}-{seed}-{i:04}");
            match kind {
                CorpusKind::Tables => table_document(id, &mut rng),
                CorpusKind::Forms => form_document(id, &mut rng),
            }
        })
        .collect();
    SyntheticCorpus {
        kind,
        seed,
        docs,
        n_eval: 0,
    }
    .with_eval_fraction(DEFAULT_EVAL_FRACTION)
}

/// Token in layout units (thousandths of the page) awaiting conversion to pixels.
struct Placed {
    text: String,
    x0: u32,
    y0: u32,
    label: String,
}

impl Placed {
    fn new(text: &str, x0: u32, y0: u32, label: String) -> Self {
        Placed {
            text: text.to_string(),
            x0,
            y0,
            label,
        }
    }

    fn width(&self) -> u32 {
        text_width(&self.text)
    }

    fn x1(&self) -> u32 {
        self.x0 + self.width()
    }
}

fn text_width(text: &str) -> u32 {
    CHAR_WIDTH * text.chars().count() as u32 + 6
}

fn centered_at(text: &str, cx: i64) -> u32 {
    (cx - text_width(text) as i64 / 2).max(0) as u32
}

fn to_document(id: String, placed: Vec<Placed>) -> Document {
    let px = |v: u32, extent: u32| (v.min(1000) as u64 * extent as u64 / 1000) as u32;
    let (tokens, labels) = placed
        .into_iter()
        .map(|p| {
            let bbox = [
                px(p.x0, PAGE_WIDTH),
                px(p.y0, PAGE_HEIGHT),
                px(p.x1(), PAGE_WIDTH),
                px(p.y0 + LINE_HEIGHT, PAGE_HEIGHT),
            ];
            (Token { text: p.text, bbox }, p.label)
        })
        .unzip();
    Document {
        id,
        page_width: PAGE_WIDTH,
        page_height: PAGE_HEIGHT,
        tokens,
        labels: Some(labels),
    }
}

fn pick<'a, T>(items: &'a [T], rng: &mut ChaCha8Rng) -> &'a T {
    &items[rng.gen_range(0..items.len())]
}

fn table_document(id: String, rng: &mut ChaCha8Rng) -> Document {
    let n_cols = rng.gen_range(2..=4usize);
    let n_rows = rng.gen_range(3..=6u32);
    let pitch = rng.gen_range(220..=300u32).min(920 / n_cols as u32);
    let row_pitch = rng.gen_range(25..=35u32);
    let left = rng.gen_range(40..=(960 - pitch * n_cols as u32).max(40));
    let top = rng.gen_range(150..=500u32);

    let mut types: Vec<usize> = (0..COLUMN_TYPES.len()).collect();
    shuffle(&mut types, rng);
    types.truncate(n_cols);

    let mut placed = Vec::new();
    let title_y = top - rng.gen_range(60..=100u32);
    let mut x = left;
    for _ in 0..rng.gen_range(1..=2) {
        let word = pick(&TITLE_WORDS, rng);
        placed.push(Placed::new(word, x, title_y, "O".into()));
        x += text_width(word) + 10;
    }

    let col_center = |c: usize| left as i64 + pitch as i64 * c as i64 + pitch as i64 / 2;
    let jitter = |rng: &mut ChaCha8Rng| rng.gen_range(-3..=3i64);

    let mut header: Vec<Placed> = types
        .iter()
        .enumerate()
        .map(|(c, &t)| {
            let text = COLUMN_TYPES[t].0;
            Placed::new(text, centered_at(text, col_center(c) + jitter(rng)), top, "O".into())
        })
        .collect();
    shuffle(&mut header, rng);
    placed.extend(header);

    for r in 1..=n_rows {
        let y = top + r * row_pitch;
        let mut row: Vec<Placed> = types
            .iter()
            .enumerate()
            .map(|(c, &t)| {
                let text = pick(&CELL_VALUES, rng);
                let label = format!("B-{}", COLUMN_TYPES[t].1);
                Placed::new(text, centered_at(text, col_center(c) + jitter(rng)), y, label)
            })
            .collect();
        shuffle(&mut row, rng);
        placed.extend(row);
    }
    to_document(id, placed)
}

fn form_document(id: String, rng: &mut ChaCha8Rng) -> Document {
    let n_pairs = rng.gen_range(3..=6usize);
    let mut keys: Vec<usize> = (0..FORM_KEYS.len()).collect();
    shuffle(&mut keys, rng);
    keys.truncate(n_pairs);
    let mut slots: Vec<(u32, u32)> = (0..16u32).map(|s| (60 + 460 * (s % 2), 120 + 90 * (s / 2))).collect();
    shuffle(&mut slots, rng);

    let mut pairs: Vec<Vec<Placed>> = keys
        .iter()
        .zip(&slots)
        .map(|(&k, &(sx, sy))| {
            let (key_text, kind) = FORM_KEYS[k];
            let kx = sx + rng.gen_range(0..=40u32);
            let ky = sy + rng.gen_range(0..=20u32);
            let key = Placed::new(key_text, kx, ky, "O".into());
            let (mut vx, vy) = if rng.gen_bool(0.5) {
                (key.x1() + rng.gen_range(10..=20u32), ky)
            } else {
                (kx, ky + rng.gen_range(22..=30u32))
            };
            let mut pair = alloc::vec![key];
            for v in 0..rng.gen_range(1..=3) {
                let text = pick(&FORM_VALUES, rng);
                let prefix = if v == 0 { "B" } else { "I" };
                let tok = Placed::new(text, vx, vy, format!("{prefix}-{kind}"));
                vx = tok.x1() + 8;
                pair.push(tok);
            }
            pair
        })
        .collect();
    shuffle(&mut pairs, rng);
    to_document(id, pairs.into_iter().flatten().collect())
}
