use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use super::document::{segments, Segment};
use super::vocab::{Vocab, CLS, PAD, SEP};
use super::Document;
use crate::error::{Error, Result};
use crate::geometry::{
    cartesian_relative_bins, center, relative_bins, BBox, BinningConfig, Center, PairMatrix, PolarBinPair,
};
use crate::model::{BiasMode, ModelConfig};
use crate::tensor::IGNORE_INDEX;

/// A document mapped to ids, normalized boxes and pairwise polar bins,
/// framed by `[CLS]` and `[SEP]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedDoc {
    pub id: String,
    pub token_ids: Vec<usize>,
    pub bboxes: Vec<BBox>,
    /// Original token index for each position; `None` for `[CLS]`/`[SEP]`.
    pub source_index: Vec<Option<usize>>,
    /// Gold tags for the kept source tokens, if the document had labels.
    pub tags: Option<Vec<String>>,
    pub n_source_tokens: usize,
    pub segments: Vec<Segment>,
    pub polar: PairMatrix<PolarBinPair>,
}

impl EncodedDoc {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Number of source tokens that survived truncation.
    pub fn kept_tokens(&self) -> usize {
        self.len() - 2
    }

    pub fn truncated(&self) -> bool {
        self.kept_tokens() < self.n_source_tokens
    }

    pub fn centers(&self) -> Vec<Center> {
        self.bboxes.iter().map(center).collect()
    }
}

/// Encodes a validated document. `[CLS]` and `[SEP]` take the hull of the
/// real token boxes (the full page when there are none), so the encoding
/// commutes with translating every box. Truncates to `max_seq_len`.
pub fn encode(doc: &Document, vocab: &Vocab, cfg: &ModelConfig) -> Result<EncodedDoc> {
    doc.validate()?;
    if cfg.max_seq_len < 2 {
        return Err(Error::Config("max_seq_len must leave room for [CLS] and [SEP]".into()));
    }
    let keep = doc.len().min(cfg.max_seq_len - 2);
    let boxes = doc.normalized_boxes();
    let frame = BBox::hull(&boxes[..keep]).unwrap_or(BBox::FULL_PAGE);

    let mut token_ids = Vec::with_capacity(keep + 2);
    let mut bboxes = Vec::with_capacity(keep + 2);
    let mut source_index = Vec::with_capacity(keep + 2);
    token_ids.push(CLS);
    bboxes.push(frame);
    source_index.push(None);
    for (i, (t, b)) in doc.tokens.iter().zip(&boxes).take(keep).enumerate() {
        token_ids.push(vocab.id(&t.text));
        bboxes.push(*b);
        source_index.push(Some(i));
    }
    token_ids.push(SEP);
    bboxes.push(frame);
    source_index.push(None);

    let centers: Vec<Center> = bboxes.iter().map(center).collect();
    Ok(EncodedDoc {
        id: doc.id.clone(),
        segments: segments(&bboxes),
        polar: relative_bins(&centers, &cfg.binning),
        token_ids,
        bboxes,
        source_index,
        tags: doc.labels.as_ref().map(|l| l[..keep].to_vec()),
        n_source_tokens: doc.len(),
    })
}

/// Tag inventory for token classification; `O` is always id 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    tags: Vec<String>,
}

impl LabelSet {
    /// Collects every tag in the labelled documents, plus the `I-` partner of
    /// every `B-` tag so continuation predictions are always representable.
    pub fn from_documents(docs: &[Document]) -> Result<Self> {
        let mut set = BTreeSet::new();
        for doc in docs {
            for tag in doc.labels.iter().flatten() {
                let tag = tag.as_str();
                if tag == "O" {
                    continue;
                }
                let kind = tag
                    .strip_prefix("B-")
                    .or_else(|| tag.strip_prefix("I-"))
                    .filter(|k| !k.is_empty())
                    .ok_or_else(|| Error::UnknownTag(tag.to_string()))?;
                set.insert(alloc::format!("B-{kind}"));
                set.insert(alloc::format!("I-{kind}"));
            }
        }
        Self::from_tags(core::iter::once("O".to_string()).chain(set))
    }

    pub fn from_tags<I: IntoIterator<Item = String>>(tags: I) -> Result<Self> {
        let tags: Vec<String> = tags.into_iter().collect();
        if tags.first().map(String::as_str) != Some("O") {
            return Err(Error::Config("label set must start with O".into()));
        }
        Ok(LabelSet { tags })
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn id(&self, tag: &str) -> Result<usize> {
        self.tags
            .iter()
            .position(|t| t == tag)
            .ok_or_else(|| Error::UnseenLabel(tag.to_string()))
    }

    pub fn tag(&self, id: usize) -> &str {
        &self.tags[id]
    }
}

/// Padded mini-batch. Per-position arrays are `[size, seq_len]`, pair arrays
/// `[size, seq_len, seq_len]`, all row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub seq_len: usize,
    pub lengths: Vec<usize>,
    pub token_ids: Vec<usize>,
    pub pos_ids: Vec<usize>,
    pub bboxes: Vec<BBox>,
    /// `true` at real (non-padding) positions.
    pub keep: Vec<bool>,
    /// Distance (polar) or dx (cartesian) bins; zeros when the bias is off.
    pub pair_first: Vec<usize>,
    /// Angle (polar) or dy (cartesian) bins.
    pub pair_second: Vec<usize>,
    pub mlm_targets: Vec<usize>,
    pub lop_targets: Vec<usize>,
    pub ner_targets: Vec<usize>,
}

impl Batch {
    pub fn n_positions(&self) -> usize {
        self.size * self.seq_len
    }
}

/// Pads to the longest item. NER targets are filled when `labels` is given
/// and every item carries tags; `[CLS]`, `[SEP]` and padding are ignored.
pub fn collate(
    items: &[&EncodedDoc],
    mode: BiasMode,
    binning: &BinningConfig,
    labels: Option<&LabelSet>,
) -> Result<Batch> {
    if items.is_empty() {
        return Err(Error::Contract("cannot collate an empty batch".into()));
    }
    let size = items.len();
    let n = items.iter().map(|e| e.len()).max().unwrap_or(0);
    let mut b = Batch {
        size,
        seq_len: n,
        lengths: items.iter().map(|e| e.len()).collect(),
        token_ids: vec![PAD; size * n],
        pos_ids: vec![0; size * n],
        bboxes: vec![BBox::default(); size * n],
        keep: vec![false; size * n],
        pair_first: vec![0; size * n * n],
        pair_second: vec![0; size * n * n],
        mlm_targets: vec![IGNORE_INDEX; size * n],
        lop_targets: vec![IGNORE_INDEX; size * n],
        ner_targets: vec![IGNORE_INDEX; size * n],
    };
    for (bi, item) in items.iter().enumerate() {
        let len = item.len();
        for t in 0..len {
            let p = bi * n + t;
            b.token_ids[p] = item.token_ids[t];
            b.pos_ids[p] = t;
            b.bboxes[p] = item.bboxes[t];
            b.keep[p] = true;
        }
        let cart = (mode == BiasMode::Cartesian).then(|| cartesian_relative_bins(&item.bboxes, binning));
        for i in 0..len {
            for j in 0..len {
                let q = (bi * n + i) * n + j;
                let (first, second) = match (mode, &cart) {
                    (BiasMode::Polar, _) => {
                        let pb = item.polar.get(i, j);
                        (pb.dist_bin, pb.angle_bin)
                    }
                    (BiasMode::Cartesian, Some(c)) => {
                        let cb = c.get(i, j);
                        (cb.dx_bin, cb.dy_bin)
                    }
                    _ => (0, 0),
                };
                b.pair_first[q] = first;
                b.pair_second[q] = second;
            }
        }
        if let (Some(set), Some(tags)) = (labels, &item.tags) {
            for (t, src) in item.source_index.iter().enumerate() {
                if let Some(s) = src {
                    b.ner_targets[bi * n + t] = set.id(&tags[*s])?;
                }
            }
        }
    }
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocab, Token, UNK};

    fn doc(n: usize, shift: u32) -> Document {
        Document {
            id: "d".into(),
            page_width: 1000,
            page_height: 1000,
            tokens: (0..n as u32)
                .map(|i| Token {
                    text: alloc::format!("w{}", i % 3),
                    bbox: [shift + 40 * i, shift + 7 * i, shift + 40 * i + 30, shift + 7 * i + 10],
                })
                .collect(),
            labels: Some((0..n).map(|i| if i == 1 { "B-X".into() } else { "O".into() }).collect()),
        }
    }

    fn cfg(max_seq_len: usize) -> ModelConfig {
        ModelConfig {
            max_seq_len,
            ..ModelConfig::desk(50)
        }
    }

    #[test]
    fn encode_frames_and_truncates() {
        let d = doc(10, 0);
        let v = build_vocab(core::slice::from_ref(&d), 1).unwrap();
        let e = encode(&d, &v, &cfg(6)).unwrap();
        assert_eq!(e.len(), 6);
        assert_eq!(e.token_ids[0], CLS);
        assert_eq!(e.token_ids[5], SEP);
        assert_eq!(e.kept_tokens(), 4);
        assert!(e.truncated());
        assert_eq!(e.bboxes[0], BBox::hull(&e.bboxes[1..5]).unwrap());
        assert_eq!(e.tags.as_ref().unwrap().len(), 4);
        assert_eq!(e.polar.len(), 6);
    }

    #[test]
    fn empty_document_uses_full_page_frame() {
        let mut d = doc(0, 0);
        d.labels = None;
        let v = Vocab::from_tokens(crate::data::SPECIAL_TOKENS.map(String::from)).unwrap();
        let e = encode(&d, &v, &cfg(8)).unwrap();
        assert_eq!(e.token_ids, vec![CLS, SEP]);
        assert_eq!(e.bboxes, vec![BBox::FULL_PAGE; 2]);
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let d = doc(3, 0);
        let v = Vocab::from_tokens(crate::data::SPECIAL_TOKENS.map(String::from)).unwrap();
        let e = encode(&d, &v, &cfg(8)).unwrap();
        assert!(e.token_ids[1..4].iter().all(|&t| t == UNK));
    }

    #[test]
    fn translation_leaves_bins_unchanged() {
        let a = doc(7, 0);
        let b = doc(7, 100);
        let v = build_vocab(core::slice::from_ref(&a), 1).unwrap();
        let ea = encode(&a, &v, &cfg(16)).unwrap();
        let eb = encode(&b, &v, &cfg(16)).unwrap();
        assert_eq!(ea.polar, eb.polar);
    }

    #[test]
    fn collate_pads_and_labels() {
        let (a, b) = (doc(2, 0), doc(4, 0));
        let v = build_vocab(&[a.clone(), b.clone()], 1).unwrap();
        let c = cfg(16);
        let (ea, eb) = (encode(&a, &v, &c).unwrap(), encode(&b, &v, &c).unwrap());
        let labels = LabelSet::from_documents(&[a, b]).unwrap();
        assert_eq!(labels.tags(), &["O", "B-X", "I-X"]);
        let batch = collate(&[&ea, &eb], BiasMode::Polar, &c.binning, Some(&labels)).unwrap();
        assert_eq!((batch.size, batch.seq_len), (2, 6));
        assert_eq!(batch.keep[..6], [true, true, true, true, false, false]);
        assert_eq!(batch.token_ids[4], PAD);
        assert_eq!(batch.ner_targets[..4], [IGNORE_INDEX, 0, 1, IGNORE_INDEX]);
        let pb = ea.polar.get(1, 2);
        assert_eq!(batch.pair_first[6 + 2], pb.dist_bin);
        assert_eq!(batch.pair_second[6 + 2], pb.angle_bin);
    }

    #[test]
    fn unseen_label_is_reported() {
        let set = LabelSet::from_tags(["O".to_string()]).unwrap();
        assert!(matches!(set.id("B-Y"), Err(Error::UnseenLabel(_))));
    }
}
