#![allow(dead_code)]

use polar_layout_core::data::{
    build_vocab, collate, encode, generate_synthetic_corpus, Batch, CorpusKind, Document, EncodedDoc, Vocab,
};
use polar_layout_core::geometry::{relative_bins, BBox, Center};
use polar_layout_core::model::{BiasMode, BoundParams, Dropout, ModelConfig, ParameterStore, HeadSet};
use polar_layout_core::tensor::{Tape, IGNORE_INDEX};

/// Batch of one sequence built directly from ids and boxes.
pub fn single_batch(ids: &[usize], boxes: &[BBox], cfg: &ModelConfig) -> Batch {
    let n = ids.len();
    let centers: Vec<Center> = boxes.iter().map(|b| b.center()).collect();
    let polar = relative_bins(&centers, &cfg.binning);
    let cart = polar_layout_core::geometry::cartesian_relative_bins(boxes, &cfg.binning);
    let mut first = vec![0; n * n];
    let mut second = vec![0; n * n];
    for i in 0..n {
        for j in 0..n {
            let (a, b) = match cfg.bias_mode {
                BiasMode::Polar => (polar.get(i, j).dist_bin, polar.get(i, j).angle_bin),
                BiasMode::Cartesian => (cart.get(i, j).dx_bin, cart.get(i, j).dy_bin),
                BiasMode::None => (0, 0),
            };
            first[i * n + j] = a;
            second[i * n + j] = b;
        }
    }
    Batch {
        size: 1,
        seq_len: n,
        lengths: vec![n],
        token_ids: ids.to_vec(),
        pos_ids: (0..n).collect(),
        bboxes: boxes.to_vec(),
        keep: vec![true; n],
        pair_first: first,
        pair_second: second,
        mlm_targets: vec![IGNORE_INDEX; n],
        lop_targets: vec![IGNORE_INDEX; n],
        ner_targets: vec![IGNORE_INDEX; n],
    }
}

/// Synthetic documents re-expressed on a 1000×1000 page so pixel and
/// normalized coordinates coincide.
pub fn unit_page_docs(kind: CorpusKind, n: usize, seed: u64) -> Vec<Document> {
    generate_synthetic_corpus(kind, n, seed)
        .unwrap()
        .docs
        .into_iter()
        .map(|d| {
            let boxes = d.normalized_boxes();
            let mut d = d;
            for (t, b) in d.tokens.iter_mut().zip(boxes) {
                t.bbox = [b.x0, b.y0, b.x1, b.y1];
            }
            d.page_width = 1000;
            d.page_height = 1000;
            d
        })
        .collect()
}

pub fn encode_all(docs: &[Document], vocab: &Vocab, cfg: &ModelConfig) -> Vec<EncodedDoc> {
    docs.iter().map(|d| encode(d, vocab, cfg).unwrap()).collect()
}

pub fn vocab_for(docs: &[Document]) -> Vocab {
    build_vocab(docs, 1).unwrap()
}

/// Evaluation-mode encoder output for `batch`.
pub fn hidden(cfg: &ModelConfig, store: &ParameterStore, batch: &Batch) -> Vec<f64> {
    let mut tape = Tape::new();
    let p: BoundParams = store.bind(&mut tape, false);
    let h = polar_layout_core::model::encoder_forward(&mut tape, &p, cfg, batch, &mut Dropout::Off, None).unwrap();
    tape.value(h).data().to_vec()
}

pub fn store(cfg: &ModelConfig, seed: u64) -> ParameterStore {
    ParameterStore::init(cfg, HeadSet::PRETRAIN, seed).unwrap()
}

pub fn collate_one(e: &EncodedDoc, cfg: &ModelConfig) -> Batch {
    collate(&[e], cfg.bias_mode, &cfg.binning, None).unwrap()
}
