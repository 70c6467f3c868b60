use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use super::Document;
use crate::error::{Error, Result};

/// Entity span over token indices `[start, end)`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Entity {
    pub kind: String,
    pub start: usize,
    pub end: usize,
}

impl Entity {
    pub fn new(kind: &str, start: usize, end: usize) -> Self {
        Entity {
            kind: kind.to_string(),
            start,
            end,
        }
    }
}

enum Tag<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

fn parse_tag(tag: &str) -> Result<Tag<'_>> {
    if tag == "O" {
        return Ok(Tag::Outside);
    }
    let bad = || Error::UnknownTag(tag.to_string());
    if let Some(kind) = tag.strip_prefix("B-") {
        return if kind.is_empty() { Err(bad()) } else { Ok(Tag::Begin(kind)) };
    }
    if let Some(kind) = tag.strip_prefix("I-") {
        return if kind.is_empty() { Err(bad()) } else { Ok(Tag::Inside(kind)) };
    }
    Err(bad())
}

/// Lenient BIO decoding: an `I-T` that does not continue an open `T` entity
/// starts a new one.
pub fn bio_decode<S: AsRef<str>>(tags: &[S]) -> Result<Vec<Entity>> {
    let mut out: Vec<Entity> = Vec::new();
    let mut open: Option<usize> = None;
    for (i, tag) in tags.iter().enumerate() {
        match parse_tag(tag.as_ref())? {
            Tag::Outside => open = None,
            Tag::Begin(kind) => {
                out.push(Entity::new(kind, i, i + 1));
                open = Some(out.len() - 1);
            }
            Tag::Inside(kind) => match open {
                Some(e) if out[e].kind == kind => out[e].end = i + 1,
                _ => {
                    out.push(Entity::new(kind, i, i + 1));
                    open = Some(out.len() - 1);
                }
            },
        }
    }
    Ok(out)
}

/// Writes entities as BIO tags over `len` tokens. Later spans overwrite
/// earlier ones where they overlap.
pub fn bio_encode(entities: &[Entity], len: usize) -> Vec<String> {
    let mut tags = vec!["O".to_string(); len];
    for e in entities {
        for (i, tag) in tags.iter_mut().enumerate().take(e.end.min(len)).skip(e.start) {
            let prefix = if i == e.start { "B" } else { "I" };
            *tag = format!("{prefix}-{}", e.kind);
        }
    }
    tags
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct F1Report {
    pub true_positives: usize,
    pub n_pred: usize,
    pub n_gold: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl F1Report {
    fn from_counts(tp: usize, n_pred: usize, n_gold: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, n_pred);
        let recall = ratio(tp, n_gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        F1Report {
            true_positives: tp,
            n_pred,
            n_gold,
            precision,
            recall,
            f1,
        }
    }
}

/// Micro-averaged exact-match entity F1 over `(id, pred tags, gold tags)` triples.
pub fn entity_f1_tags<S: AsRef<str>>(docs: &[(&str, &[S], &[S])]) -> Result<F1Report> {
    let (mut tp, mut n_pred, mut n_gold) = (0, 0, 0);
    for (id, pred, gold) in docs {
        if pred.len() != gold.len() {
            return Err(Error::LengthMismatch(format!(
                "document {id}: {} predicted tags for {} gold tags",
                pred.len(),
                gold.len()
            )));
        }
        let mut p = bio_decode(pred)?;
        let g = bio_decode(gold)?;
        n_pred += p.len();
        n_gold += g.len();
        p.sort();
        for e in &g {
            if let Ok(k) = p.binary_search(e) {
                p.remove(k);
                tp += 1;
            }
        }
    }
    Ok(F1Report::from_counts(tp, n_pred, n_gold))
}

fn doc_labels<'a>(d: &'a Document, empty: &'a [String]) -> Result<&'a [String]> {
    match &d.labels {
        Some(l) => Ok(l.as_slice()),
        None if d.is_empty() => Ok(empty),
        None => Err(Error::Record(d.id.clone(), "missing labels".into())),
    }
}

/// [`entity_f1_tags`] over aligned labelled documents.
pub fn entity_f1(pred: &[Document], gold: &[Document]) -> Result<F1Report> {
    if pred.len() != gold.len() {
        return Err(Error::LengthMismatch(format!(
            "{} predicted documents for {} gold documents",
            pred.len(),
            gold.len()
        )));
    }
    let empty: Vec<String> = Vec::new();
    let mut triples = Vec::with_capacity(pred.len());
    for (p, g) in pred.iter().zip(gold) {
        if p.id != g.id || p.len() != g.len() {
            return Err(Error::LengthMismatch(format!(
                "document {}: not aligned with gold document {}",
                p.id, g.id
            )));
        }
        triples.push((p.id.as_str(), doc_labels(p, &empty)?, doc_labels(g, &empty)?));
    }
    entity_f1_tags(&triples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn decode_examples() {
        assert_eq!(bio_decode(&["B-X", "I-X", "O"]).unwrap(), vec![Entity::new("X", 0, 2)]);
        assert!(bio_decode(&["O", "O"]).unwrap().is_empty());
        assert_eq!(
            bio_decode(&["I-X", "B-X"]).unwrap(),
            vec![Entity::new("X", 0, 1), Entity::new("X", 1, 2)]
        );
        assert_eq!(
            bio_decode(&["B-X", "I-Y"]).unwrap(),
            vec![Entity::new("X", 0, 1), Entity::new("Y", 1, 2)]
        );
    }

    #[test]
    fn unknown_tags_are_errors() {
        for bad in ["B-", "X", "E-X", ""] {
            assert!(matches!(bio_decode(&[bad]), Err(Error::UnknownTag(_))), "{bad}");
        }
    }

    #[test]
    fn one_correct_one_spurious() {
        let gold = ["B-A", "O", "B-B", "O"];
        let pred = ["B-A", "B-C", "O", "O"];
        let r = entity_f1_tags(&[("d", &pred[..], &gold[..])]).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.5, 0.5, 0.5));
    }

    #[test]
    fn length_mismatch_names_document() {
        let err = entity_f1_tags(&[("doc-7", &["O"][..], &["O", "O"][..])]).unwrap_err();
        assert!(alloc::format!("{err}").contains("doc-7"));
    }

    fn spans() -> impl Strategy<Value = (Vec<Entity>, usize)> {
        proptest::collection::vec((0usize..3, 1usize..4, 0usize..3), 0..6).prop_map(|parts| {
            let mut pos = 0;
            let mut out = Vec::new();
            let mut last_kind: Option<usize> = None;
            for (kind, len, gap) in parts {
                // same-type spans must not touch
                let gap = if gap == 0 && last_kind == Some(kind) { 1 } else { gap };
                pos += gap;
                out.push(Entity::new(["A", "B", "C"][kind], pos, pos + len));
                pos += len;
                last_kind = Some(kind);
            }
            (out, pos + 1)
        })
    }

    proptest! {
        #[test]
        fn decode_inverts_encode((entities, len) in spans()) {
            prop_assert_eq!(bio_decode(&bio_encode(&entities, len)).unwrap(), entities);
        }

        #[test]
        fn swapping_pred_and_gold_swaps_p_and_r(
            (a, la) in spans(), (b, lb) in spans()
        ) {
            let len = la.max(lb);
            let (ta, tb) = (bio_encode(&a, len), bio_encode(&b, len));
            let ab = entity_f1_tags(&[("d", &ta[..], &tb[..])]).unwrap();
            let ba = entity_f1_tags(&[("d", &tb[..], &ta[..])]).unwrap();
            prop_assert_eq!(ab.precision, ba.recall);
            prop_assert_eq!(ab.recall, ba.precision);
            prop_assert_eq!(ab.f1, ba.f1);
        }
    }
}
