use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, COORD_MAX};

/// One OCR token with its box in raw page pixels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub bbox: [u32; 4],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub page_width: u32,
    pub page_height: u32,
    pub tokens: Vec<Token>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
}

impl Document {
    pub fn validate(&self) -> Result<()> {
        if self.page_width == 0 || self.page_height == 0 {
            return Err(Error::Record(self.id.clone(), "page dimensions must be positive".into()));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.tokens.len() {
                return Err(Error::Record(
                    self.id.clone(),
                    format!("{} labels for {} tokens", labels.len(), self.tokens.len()),
                ));
            }
        }
        for (i, tok) in self.tokens.iter().enumerate() {
            let [x0, y0, x1, y1] = tok.bbox;
            let reason = if x1 < x0 || y1 < y0 {
                Some(format!("inverted bbox {:?}", tok.bbox))
            } else if x1 > self.page_width || y1 > self.page_height {
                Some(format!(
                    "bbox {:?} outside {}x{} page",
                    tok.bbox, self.page_width, self.page_height
                ))
            } else {
                None
            };
            if let Some(reason) = reason {
                return Err(Error::Document {
                    doc: self.id.clone(),
                    token: i,
                    reason,
                });
            }
        }
        Ok(())
    }

    pub fn normalized_boxes(&self) -> Vec<BBox> {
        self.tokens
            .iter()
            .map(|t| normalize_bbox(t.bbox, self.page_width, self.page_height))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Maps each pixel coordinate to `floor(1000 · v / extent)`, clamped to `[0, 1000]`.
pub fn normalize_bbox(raw: [u32; 4], page_width: u32, page_height: u32) -> BBox {
    let scale = |v: u32, extent: u32| -> u32 {
        let extent = extent.max(1) as u64;
        ((COORD_MAX as u64 * v as u64) / extent).min(COORD_MAX as u64) as u32
    };
    BBox {
        x0: scale(raw[0], page_width),
        y0: scale(raw[1], page_height),
        x1: scale(raw[2], page_width),
        y1: scale(raw[3], page_height),
    }
}

/// Contiguous run of tokens sharing one normalized bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

pub fn segments(boxes: &[BBox]) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::new();
    for (i, b) in boxes.iter().enumerate() {
        match out.last_mut() {
            Some(seg) if boxes[seg.start] == *b => seg.end = i + 1,
            _ => out.push(Segment { start: i, end: i + 1 }),
        }
    }
    out
}
