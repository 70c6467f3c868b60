use super::encoder::Dropout;
use super::params::BoundParams;
use super::ModelConfig;
use crate::error::Result;
use crate::tensor::{Tape, Var};

/// Dense + GELU + layer norm, then logits against the token table (tied).
/// `rows` selects which positions of `hidden` to score.
pub fn mlm_head(tape: &mut Tape, p: &BoundParams, cfg: &ModelConfig, hidden: Var, rows: &[usize]) -> Result<Var> {
    let h = tape.gather_rows(hidden, rows)?;
    let w = p.var("mlm.dense.weight")?;
    let b = p.var("mlm.dense.bias")?;
    let h = tape.matmul(h, w)?;
    let h = tape.add_bias(h, b)?;
    let h = tape.gelu(h, cfg.activation);
    let h = tape.layer_norm(h, p.var("mlm.ln.gain")?, p.var("mlm.ln.bias")?, cfg.layer_norm_eps)?;
    let logits = tape.matmul_nt(h, p.var("embeddings.tok")?)?;
    tape.add_bias(logits, p.var("mlm.out_bias")?)
}

/// Linear classifier over the `max_seq_len` 1D positions.
pub fn lop_head(tape: &mut Tape, p: &BoundParams, hidden: Var, rows: &[usize]) -> Result<Var> {
    let h = tape.gather_rows(hidden, rows)?;
    let y = tape.matmul(h, p.var("lop.weight")?)?;
    tape.add_bias(y, p.var("lop.bias")?)
}

/// Dropout + linear token classifier over every row of `hidden`.
pub fn ner_head(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &ModelConfig,
    hidden: Var,
    dropout: &mut Dropout<'_>,
) -> Result<Var> {
    let h = dropout.apply(tape, hidden, cfg.dropout)?;
    let y = tape.matmul(h, p.var("ner.weight")?)?;
    tape.add_bias(y, p.var("ner.bias")?)
}
