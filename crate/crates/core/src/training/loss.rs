use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::data::Batch;
use crate::error::Result;
use crate::model::{encoder_forward, lop_head, mlm_head, BoundParams, Dropout, ModelConfig};
use crate::tensor::{Tape, Tensor, Var, IGNORE_INDEX};

/// Correct predictions out of scored positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Hits {
    pub correct: usize,
    pub total: usize,
}

impl Hits {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    pub fn add(&mut self, other: Hits) {
        self.correct += other.correct;
        self.total += other.total;
    }
}

pub struct PretrainLoss {
    /// `mlm + lop`, scalar.
    pub loss: Var,
    pub mlm: f64,
    pub lop: f64,
    pub mlm_hits: Hits,
    pub lop_hits: Hits,
}

/// Row-wise argmax agreement with `targets`.
pub fn count_hits(logits: &Tensor, targets: &[usize]) -> Hits {
    let c = logits.last_dim();
    let correct = logits
        .data()
        .chunks(c)
        .zip(targets)
        .filter(|(row, &t)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            best.0 == t
        })
        .count();
    Hits {
        correct,
        total: targets.len(),
    }
}

fn objective(
    tape: &mut Tape,
    targets: &[usize],
    head: impl FnOnce(&mut Tape, &[usize]) -> Result<Var>,
) -> Result<(Var, f64, Hits)> {
    let rows: Vec<usize> = (0..targets.len()).filter(|&i| targets[i] != IGNORE_INDEX).collect();
    if rows.is_empty() {
        let zero = tape.constant(Tensor::scalar(0.0));
        return Ok((zero, 0.0, Hits::default()));
    }
    let picked: Vec<usize> = rows.iter().map(|&r| targets[r]).collect();
    let logits = head(tape, &rows)?;
    let hits = count_hits(tape.value(logits), &picked);
    let ce = tape.cross_entropy(logits, &picked, IGNORE_INDEX)?;
    let value = tape.value(ce).item();
    Ok((ce, value, hits))
}

/// Unweighted sum of the MLM and 1-LOP cross-entropies over the targets
/// carried by `batch`. An objective without targets contributes 0.
pub fn pretrain_loss(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &ModelConfig,
    batch: &Batch,
    dropout: &mut Dropout<'_>,
) -> Result<PretrainLoss> {
    let hidden = encoder_forward(tape, p, cfg, batch, dropout, None)?;
    let (mlm, mlm_value, mlm_hits) = objective(tape, &batch.mlm_targets, |t, rows| mlm_head(t, p, cfg, hidden, rows))?;
    let (lop, lop_value, lop_hits) = objective(tape, &batch.lop_targets, |t, rows| lop_head(t, p, hidden, rows))?;
    let loss = tape.add(mlm, lop)?;
    Ok(PretrainLoss {
        loss,
        mlm: mlm_value,
        lop: lop_value,
        mlm_hits,
        lop_hits,
    })
}

/// Gradients of every bound parameter, zero where the loss does not reach.
pub fn collect_grads(tape: &Tape, p: &BoundParams) -> BTreeMap<String, Vec<f64>> {
    p.iter()
        .map(|(name, &v)| {
            let g = match tape.grad(v) {
                Some(g) => g.to_vec(),
                None => alloc::vec![0.0; tape.value(v).len()],
            };
            (name.clone(), g)
        })
        .collect()
}
