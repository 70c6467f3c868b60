use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::loss::collect_grads;
use super::optim::{clip_grad_norm, AdamW, AdamWConfig};
use super::pretrain::Observer;
use super::schedule::LrPolicy;
use crate::data::{collate, encode, entity_f1_tags, Document, EncodedDoc, F1Report, LabelSet, Vocab};
use crate::error::{Error, Result};
use crate::model::{encoder_forward, ner_head, Dropout, HeadSet, ModelConfig, ParameterStore};
use crate::rng::{domain, shuffle, stream};
use crate::tensor::{Tape, IGNORE_INDEX};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrPolicy,
    pub seed: u64,
    pub clip_norm: f64,
    pub adamw: AdamWConfig,
    /// Score the eval split after every epoch, not only the last.
    pub eval_every_epoch: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 30,
            batch_size: 16,
            lr: LrPolicy::Constant { lr: 5e-5 },
            seed: 0,
            clip_norm: 1.0,
            adamw: AdamWConfig::default(),
            eval_every_epoch: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_f1: Option<f64>,
}

/// Encoded train/eval splits with a label set drawn from the train split.
#[derive(Debug, Clone)]
pub struct NerData {
    pub train: Vec<EncodedDoc>,
    pub eval: Vec<EncodedDoc>,
    pub eval_docs: Vec<Document>,
    pub labels: LabelSet,
}

/// Fails with `UnseenLabel` when the eval split uses a tag the train split lacks.
pub fn prepare_ner(train: &[Document], eval: &[Document], vocab: &Vocab, cfg: &ModelConfig) -> Result<NerData> {
    if train.is_empty() {
        return Err(Error::Contract("fine-tuning needs at least one training document".into()));
    }
    for d in train.iter().chain(eval) {
        if d.labels.is_none() {
            return Err(Error::Record(d.id.clone(), "document has no labels".into()));
        }
    }
    let labels = LabelSet::from_documents(train)?;
    for d in eval {
        for tag in d.labels.iter().flatten() {
            labels.id(tag).map_err(|_| Error::UnseenLabel(format!("{tag} (document {})", d.id)))?;
        }
    }
    let enc = |docs: &[Document]| docs.iter().map(|d| encode(d, vocab, cfg)).collect::<Result<Vec<_>>>();
    Ok(NerData {
        train: enc(train)?,
        eval: enc(eval)?,
        eval_docs: eval.to_vec(),
        labels,
    })
}

/// Copies every tensor of `from` whose name and shape exist in `into`.
/// Returns the number of tensors copied.
pub fn transfer_parameters(from: &ParameterStore, into: &mut ParameterStore) -> usize {
    let mut copied = 0;
    for (name, t) in from.iter() {
        if let Some(dst) = into.get_mut(name) {
            if dst.shape() == t.shape() {
                *dst = t.clone();
                copied += 1;
            }
        }
    }
    copied
}

pub fn init_finetuning(
    cfg: &ModelConfig,
    n_labels: usize,
    pretrained: Option<&ParameterStore>,
    seed: u64,
) -> Result<ParameterStore> {
    let mut params = ParameterStore::init(cfg, HeadSet::ner(n_labels), seed)?;
    if let Some(pre) = pretrained {
        transfer_parameters(pre, &mut params);
    }
    Ok(params)
}

/// Most likely tag per source token. Tokens cut by truncation get `O`.
pub fn predict_tags(
    docs: &[EncodedDoc],
    params: &ParameterStore,
    cfg: &ModelConfig,
    labels: &LabelSet,
    batch_size: usize,
) -> Result<Vec<Vec<String>>> {
    let mut out = Vec::with_capacity(docs.len());
    for chunk in docs.chunks(batch_size.max(1)) {
        let items: Vec<&EncodedDoc> = chunk.iter().collect();
        let batch = collate(&items, cfg.bias_mode, &cfg.binning, None)?;
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let h = encoder_forward(&mut tape, &p, cfg, &batch, &mut Dropout::Off, None)?;
        let logits = ner_head(&mut tape, &p, cfg, h, &mut Dropout::Off)?;
        let l = tape.value(logits);
        let c = l.last_dim();
        for (b, item) in chunk.iter().enumerate() {
            let mut tags = alloc::vec!["O".to_string(); item.n_source_tokens];
            for (t, src) in item.source_index.iter().enumerate() {
                if let Some(s) = *src {
                    let row = &l.data()[(b * batch.seq_len + t) * c..][..c];
                    let best = (0..c).fold(0, |best, k| if row[k] > row[best] { k } else { best });
                    tags[s] = labels.tag(best).to_string();
                }
            }
            out.push(tags);
        }
    }
    Ok(out)
}

/// Entity-level micro F1 of the model's predictions on the eval split.
pub fn evaluate_ner(data: &NerData, params: &ParameterStore, cfg: &ModelConfig, batch_size: usize) -> Result<F1Report> {
    let pred = predict_tags(&data.eval, params, cfg, &data.labels, batch_size)?;
    let triples: Vec<(&str, &[String], &[String])> = data
        .eval_docs
        .iter()
        .zip(&pred)
        .map(|(d, p)| (d.id.as_str(), p.as_slice(), d.labels.as_deref().unwrap_or(&[])))
        .collect();
    entity_f1_tags(&triples)
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub params: ParameterStore,
    pub epochs: Vec<EpochMetrics>,
    pub report: F1Report,
}

/// Fixed-schedule training of encoder and NER head, starting from
/// `pretrained` where parameter names and shapes match.
pub fn run_finetuning(
    data: &NerData,
    cfg: &ModelConfig,
    run: &FinetuneConfig,
    pretrained: Option<&ParameterStore>,
    observer: &mut dyn Observer,
) -> Result<FinetuneOutcome> {
    if run.epochs == 0 || run.batch_size == 0 {
        return Err(Error::Config("epochs and batch_size must be positive".into()));
    }
    let mut params = init_finetuning(cfg, data.labels.len(), pretrained, run.seed)?;
    let mut opt = AdamW::new(run.adamw);
    let n = data.train.len();
    let per_epoch = n.div_ceil(run.batch_size);
    let total_steps = per_epoch * run.epochs;
    let mut step = 0;
    let mut epochs = Vec::with_capacity(run.epochs);
    for epoch in 0..run.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        shuffle(&mut order, &mut stream(run.seed, domain::BATCH_ORDER, epoch as u64));
        let mut loss_sum = 0.0;
        for chunk in order.chunks(run.batch_size) {
            let items: Vec<&EncodedDoc> = chunk.iter().map(|&i| &data.train[i]).collect();
            let batch = collate(&items, cfg.bias_mode, &cfg.binning, Some(&data.labels))?;
            let mut tape = Tape::new();
            let p = params.bind(&mut tape, true);
            let mut rng = stream(run.seed, domain::DROPOUT, step as u64);
            let mut dropout = Dropout::On(&mut rng);
            let h = encoder_forward(&mut tape, &p, cfg, &batch, &mut dropout, None)?;
            let logits = ner_head(&mut tape, &p, cfg, h, &mut dropout)?;
            let loss = tape.cross_entropy(logits, &batch.ner_targets, IGNORE_INDEX)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("fine-tuning loss {value} at step {}", step + 1)));
            }
            loss_sum += value;
            let mut grads = if batch.ner_targets.iter().any(|&t| t != IGNORE_INDEX) {
                tape.backward(loss)?;
                collect_grads(&tape, &p)
            } else {
                BTreeMap::new()
            };
            clip_grad_norm(&mut grads, run.clip_norm);
            opt.step(&mut params, &grads, run.lr.lr(step, total_steps)?)?;
            step += 1;
        }
        let last = epoch + 1 == run.epochs;
        let eval_f1 = if (run.eval_every_epoch || last) && !data.eval.is_empty() {
            Some(evaluate_ner(data, &params, cfg, run.batch_size)?.f1)
        } else {
            None
        };
        let m = EpochMetrics {
            epoch: epoch + 1,
            train_loss: loss_sum / per_epoch as f64,
            eval_f1,
        };
        observer.on_epoch(&m)?;
        epochs.push(m);
    }
    let report = evaluate_ner(data, &params, cfg, run.batch_size)?;
    Ok(FinetuneOutcome {
        params,
        epochs,
        report,
    })
}

/// Mean and sample standard deviation over per-seed scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub stdev: f64,
}

pub fn summarize(scores: &[f64]) -> SeedSummary {
    let n = scores.len() as f64;
    let mean = if scores.is_empty() { 0.0 } else { scores.iter().sum::<f64>() / n };
    let stdev = if scores.len() < 2 {
        0.0
    } else {
        libm::sqrt(scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0))
    };
    SeedSummary {
        per_seed: scores.to_vec(),
        mean,
        stdev,
    }
}

/// Sequential multi-seed fine-tuning; seed `k` runs with `run.seed + k`.
pub fn run_finetuning_seeds(
    data: &NerData,
    cfg: &ModelConfig,
    run: &FinetuneConfig,
    pretrained: Option<&ParameterStore>,
    n_seeds: usize,
) -> Result<SeedSummary> {
    let scores = (0..n_seeds as u64)
        .map(|k| {
            let r = FinetuneConfig {
                seed: run.seed + k,
                ..run.clone()
            };
            run_finetuning(data, cfg, &r, pretrained, &mut ()).map(|o| o.report.f1)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(&scores))
}

