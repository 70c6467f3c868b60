//! Documents, vocabulary, batching, entity metrics and synthetic corpora.

mod bio;
mod document;
mod encode;
mod synth;
mod vocab;

pub use bio::{bio_decode, bio_encode, entity_f1, entity_f1_tags, Entity, F1Report};
pub use document::{normalize_bbox, segments, Document, Segment, Token};
pub use encode::{collate, encode, Batch, EncodedDoc, LabelSet};
pub use synth::{generate_synthetic_corpus, CorpusKind, SyntheticCorpus, DEFAULT_EVAL_FRACTION};
pub use vocab::{build_vocab, normalize_text, Vocab, CLS, MASK, N_SPECIAL, PAD, SEP, SPECIAL_TOKENS, UNK};
