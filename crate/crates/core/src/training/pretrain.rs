use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::loss::{collect_grads, pretrain_loss, Hits};
use super::masking::{apply_lop_masking, apply_mlm_corruption, make_masking_plan};
use super::optim::{clip_grad_norm, AdamW, AdamWConfig};
use super::schedule::LrPolicy;
use crate::data::{collate, Batch, EncodedDoc};
use crate::error::{Error, Result};
use crate::model::{masked_position_id, Dropout, HeadSet, ModelConfig, ParameterStore};
use crate::rng::{domain, shuffle, stream};
use crate::tensor::checkpoint::Archive;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: LrPolicy,
    pub seed: u64,
    /// Redraw masks every epoch instead of once per document.
    pub dynamic_masking: bool,
    pub clip_norm: f64,
    pub adamw: AdamWConfig,
    /// Checkpoint period in steps; 0 checkpoints only at the end.
    pub checkpoint_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 500,
            batch_size: 16,
            lr: LrPolicy::WarmupCosine {
                target_lr: 1e-4,
                warmup_fraction: 0.05,
            },
            seed: 0,
            dynamic_masking: false,
            clip_norm: 1.0,
            adamw: AdamWConfig::default(),
            checkpoint_every: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        self.lr.lr(0, self.steps).map(|_| ())
    }
}

/// Everything needed to continue a run bitwise: parameters, optimizer
/// moments and the index of the next step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub params: ParameterStore,
    pub optimizer: AdamW,
}

const STEP_KEY: &str = "train.step";
const ADAM_STEP_KEY: &str = "adamw.step";
const M_PREFIX: &str = "adamw.m.";
const V_PREFIX: &str = "adamw.v.";

impl TrainState {
    pub fn new(params: ParameterStore, adamw: AdamWConfig) -> Self {
        TrainState {
            step: 0,
            params,
            optimizer: AdamW::new(adamw),
        }
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::default();
        a.manifest.insert(STEP_KEY.into(), self.step.to_string());
        a.manifest.insert(ADAM_STEP_KEY.into(), self.optimizer.step.to_string());
        for (name, t) in self.params.iter() {
            a.tensors.insert(name.clone(), t.clone());
            for (prefix, moments) in [(M_PREFIX, &self.optimizer.m), (V_PREFIX, &self.optimizer.v)] {
                if let Some(m) = moments.get(name) {
                    let mt = Tensor::new(t.shape().to_vec(), m.clone()).expect("moment matches parameter");
                    a.tensors.insert(format!("{prefix}{name}"), mt);
                }
            }
        }
        a
    }

    pub fn from_archive(a: &Archive, adamw: AdamWConfig) -> Result<Self> {
        let num = |key: &str| -> Result<u64> {
            a.manifest
                .get(key)
                .ok_or_else(|| Error::Checkpoint(format!("manifest lacks {key}")))?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("manifest {key} is not an integer")))
        };
        let mut params = BTreeMap::new();
        let mut opt = AdamW::new(adamw);
        for (name, t) in &a.tensors {
            if let Some(p) = name.strip_prefix(M_PREFIX) {
                opt.m.insert(p.to_string(), t.data().to_vec());
            } else if let Some(p) = name.strip_prefix(V_PREFIX) {
                opt.v.insert(p.to_string(), t.data().to_vec());
            } else {
                params.insert(name.clone(), t.clone());
            }
        }
        for key in opt.m.keys().chain(opt.v.keys()) {
            if !params.contains_key(key) {
                return Err(Error::Checkpoint(format!("optimizer moment for unknown parameter {key}")));
            }
        }
        opt.step = num(ADAM_STEP_KEY)?;
        Ok(TrainState {
            step: num(STEP_KEY)? as usize,
            params: ParameterStore::from_tensors(params),
            optimizer: opt,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    /// 1-based index of the completed step.
    pub step: usize,
    pub loss: f64,
    pub mlm_loss: f64,
    pub lop_loss: f64,
    pub mlm_accuracy: f64,
    pub lop_accuracy: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Hooks for logging and checkpointing; both default to doing nothing.
pub trait Observer {
    fn on_step(&mut self, _m: &StepMetrics) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _state: &TrainState) -> Result<()> {
        Ok(())
    }

    fn on_epoch(&mut self, _m: &super::finetune::EpochMetrics) -> Result<()> {
        Ok(())
    }
}

impl Observer for () {}

pub fn init_pretraining(cfg: &ModelConfig, run: &PretrainConfig) -> Result<TrainState> {
    run.validate()?;
    let params = ParameterStore::init(cfg, HeadSet::PRETRAIN, run.seed)?;
    Ok(TrainState::new(params, run.adamw))
}

/// Document indices of the batch at `step`: consecutive chunks of a
/// per-epoch permutation. Returns `(epoch, indices)`.
pub fn batch_indices(n_docs: usize, batch_size: usize, seed: u64, step: usize) -> (usize, Vec<usize>) {
    let per_epoch = n_docs.div_ceil(batch_size);
    let (epoch, chunk) = (step / per_epoch, step % per_epoch);
    let mut order: Vec<usize> = (0..n_docs).collect();
    shuffle(&mut order, &mut stream(seed, domain::BATCH_ORDER, epoch as u64));
    let end = ((chunk + 1) * batch_size).min(n_docs);
    (epoch, order[chunk * batch_size..end].to_vec())
}

/// Collates `indices` and applies their masking plans. With static masking
/// a document's plan depends only on `(seed, document index)`.
pub fn masked_batch(
    corpus: &[EncodedDoc],
    indices: &[usize],
    epoch: usize,
    cfg: &ModelConfig,
    run: &PretrainConfig,
) -> Result<Batch> {
    let items: Vec<&EncodedDoc> = indices.iter().map(|&i| &corpus[i]).collect();
    let mut batch = collate(&items, cfg.bias_mode, &cfg.binning, None)?;
    let n = batch.seq_len;
    for (b, (&doc, item)) in indices.iter().zip(&items).enumerate() {
        let key = if run.dynamic_masking {
            (epoch * corpus.len() + doc) as u64
        } else {
            doc as u64
        };
        let special: Vec<bool> = item.source_index.iter().map(Option::is_none).collect();
        let plan = make_masking_plan(&special, run.seed, key);
        let range = b * n..b * n + item.len();
        let (ids, mlm_t) = apply_mlm_corruption(&item.token_ids, &plan, cfg.vocab_size, run.seed, key);
        let positions: Vec<usize> = (0..item.len()).collect();
        let (pos, lop_t) = apply_lop_masking(&positions, &plan, masked_position_id(cfg));
        batch.token_ids[range.clone()].copy_from_slice(&ids);
        batch.mlm_targets[range.clone()].copy_from_slice(&mlm_t);
        batch.pos_ids[range.clone()].copy_from_slice(&pos);
        batch.lop_targets[range].copy_from_slice(&lop_t);
    }
    Ok(batch)
}

/// The batch consumed at `step`; a pure function of the corpus, configs and step.
pub fn pretrain_batch(corpus: &[EncodedDoc], cfg: &ModelConfig, run: &PretrainConfig, step: usize) -> Result<Batch> {
    let (epoch, indices) = batch_indices(corpus.len(), run.batch_size, run.seed, step);
    masked_batch(corpus, &indices, epoch, cfg, run)
}

/// One optimizer step on `batch`. Returns metrics for the completed step.
pub fn train_step(
    state: &mut TrainState,
    batch: &Batch,
    cfg: &ModelConfig,
    run: &PretrainConfig,
    lr: f64,
) -> Result<StepMetrics> {
    let mut tape = Tape::new();
    let p = state.params.bind(&mut tape, true);
    let mut rng = stream(run.seed, domain::DROPOUT, state.step as u64);
    let out = pretrain_loss(&mut tape, &p, cfg, batch, &mut Dropout::On(&mut rng))?;
    let loss = tape.value(out.loss).item();
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("pre-training loss {loss} at step {}", state.step + 1)));
    }
    let mut grads = if tape.requires_grad(out.loss) {
        tape.backward(out.loss)?;
        collect_grads(&tape, &p)
    } else {
        BTreeMap::new()
    };
    let grad_norm = clip_grad_norm(&mut grads, run.clip_norm);
    state.optimizer.step(&mut state.params, &grads, lr)?;
    state.step += 1;
    Ok(StepMetrics {
        step: state.step,
        loss,
        mlm_loss: out.mlm,
        lop_loss: out.lop,
        mlm_accuracy: out.mlm_hits.accuracy(),
        lop_accuracy: out.lop_hits.accuracy(),
        lr,
        grad_norm,
    })
}

/// Runs from `state.step` up to `run.steps`, reporting every step and
/// checkpointing every `checkpoint_every` steps and at the end.
pub fn run_pretraining(
    corpus: &[EncodedDoc],
    cfg: &ModelConfig,
    run: &PretrainConfig,
    mut state: TrainState,
    observer: &mut dyn Observer,
) -> Result<TrainState> {
    if corpus.is_empty() {
        return Err(Error::Contract("pre-training corpus is empty".into()));
    }
    run.validate()?;
    state.params.check(cfg, HeadSet::PRETRAIN)?;
    while state.step < run.steps {
        let batch = pretrain_batch(corpus, cfg, run, state.step)?;
        let lr = run.lr.lr(state.step, run.steps)?;
        let m = train_step(&mut state, &batch, cfg, run, lr)?;
        observer.on_step(&m)?;
        let periodic = run.checkpoint_every > 0 && state.step.is_multiple_of(run.checkpoint_every);
        if periodic || state.step == run.steps {
            observer.on_checkpoint(&state)?;
        }
    }
    Ok(state)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainEval {
    pub mlm_loss: f64,
    pub lop_loss: f64,
    pub mlm: Hits,
    pub lop: Hits,
}

/// Dropout-free losses and accuracies over the whole corpus under the
/// masks of epoch 0, weighted by target count.
pub fn evaluate_pretraining(
    corpus: &[EncodedDoc],
    params: &ParameterStore,
    cfg: &ModelConfig,
    run: &PretrainConfig,
) -> Result<PretrainEval> {
    let mut eval = PretrainEval {
        mlm_loss: 0.0,
        lop_loss: 0.0,
        mlm: Hits::default(),
        lop: Hits::default(),
    };
    let all: Vec<usize> = (0..corpus.len()).collect();
    for chunk in all.chunks(run.batch_size.max(1)) {
        let batch = masked_batch(corpus, chunk, 0, cfg, run)?;
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let out = pretrain_loss(&mut tape, &p, cfg, &batch, &mut Dropout::Off)?;
        eval.mlm_loss += out.mlm * out.mlm_hits.total as f64;
        eval.lop_loss += out.lop * out.lop_hits.total as f64;
        eval.mlm.add(out.mlm_hits);
        eval.lop.add(out.lop_hits);
    }
    eval.mlm_loss /= eval.mlm.total.max(1) as f64;
    eval.lop_loss /= eval.lop.total.max(1) as f64;
    Ok(eval)
}

/// Observer that keeps every step's metrics.
#[derive(Debug, Default)]
pub struct History {
    pub steps: Vec<StepMetrics>,
    pub checkpoints: Vec<usize>,
}

impl Observer for History {
    fn on_step(&mut self, m: &StepMetrics) -> Result<()> {
        self.steps.push(*m);
        Ok(())
    }

    fn on_checkpoint(&mut self, state: &TrainState) -> Result<()> {
        self.checkpoints.push(state.step);
        Ok(())
    }
}

