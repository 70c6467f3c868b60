use alloc::format;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use super::params::{BoundParams, ABS_2D_AXES};
use super::{BiasMode, ModelConfig};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::tensor::{PairConvention, Tape, Tensor, Var};

/// Dropout source for one forward pass; `Off` for evaluation.
pub enum Dropout<'a> {
    Off,
    On(&'a mut ChaCha8Rng),
}

impl Dropout<'_> {
    pub(crate) fn apply(&mut self, tape: &mut Tape, x: Var, p: f64) -> Result<Var> {
        match self {
            Dropout::On(rng) if p > 0.0 => tape.dropout(x, p, &mut **rng),
            _ => Ok(x),
        }
    }
}

/// Per-layer attention internals, each `[batch·heads, seq, seq]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// Unscaled pair bias from the distance (or dx) table, if any.
    pub bias_first: Option<Tensor>,
    /// Unscaled pair bias from the angle (or dy) table, if any.
    pub bias_second: Option<Tensor>,
    /// Post-softmax attention weights.
    pub probs: Tensor,
}

pub type AttentionTrace = Vec<LayerTrace>;

fn linear(tape: &mut Tape, p: &BoundParams, x: Var, prefix: &str) -> Result<Var> {
    let w = p.var(&format!("{prefix}.weight"))?;
    let b = p.var(&format!("{prefix}.bias"))?;
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

fn layer_norm(tape: &mut Tape, p: &BoundParams, x: Var, prefix: &str, eps: f64) -> Result<Var> {
    let gain = p.var(&format!("{prefix}.gain"))?;
    let bias = p.var(&format!("{prefix}.bias"))?;
    tape.layer_norm(x, gain, bias, eps)
}

/// Token + 1D position (+ four absolute 2D lookups), then layer norm and
/// dropout. Returns `[batch·seq, d_model]`.
pub fn embed_inputs(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &ModelConfig,
    batch: &Batch,
    dropout: &mut Dropout<'_>,
) -> Result<Var> {
    if batch.seq_len > cfg.max_seq_len {
        return Err(Error::Contract(format!(
            "sequence length {} exceeds max_seq_len {}; truncate before encoding",
            batch.seq_len, cfg.max_seq_len
        )));
    }
    let tok = tape.gather_rows(p.var("embeddings.tok")?, &batch.token_ids)?;
    let pos = tape.gather_rows(p.var("embeddings.pos1d")?, &batch.pos_ids)?;
    let mut x = tape.add(tok, pos)?;
    if cfg.use_abs_2d {
        for (a, axis) in ABS_2D_AXES.iter().enumerate() {
            let coords: Vec<usize> = batch
                .bboxes
                .iter()
                .map(|b| [b.x0, b.y0, b.x1, b.y1][a] as usize)
                .collect();
            let e = tape.gather_rows(p.var(&format!("embeddings.abs2d.{axis}"))?, &coords)?;
            x = tape.add(x, e)?;
        }
    }
    let x = layer_norm(tape, p, x, "embeddings.ln", cfg.layer_norm_eps)?;
    dropout.apply(tape, x, cfg.dropout)
}

/// Multi-head self-attention with the relative layout bias of `layer`.
///
/// For output position `i` and context position `j` each head scores
/// `(Q_j·k_i + Q_j·E₁[b₁(i,j)] + Q_j·E₂[b₂(i,j)]) / √d_head`, where the
/// considered token supplies the key and the context token the query.
/// `standard_qk` swaps the roles to `Q_i·k_j + Q_i·E…`. `E₁, E₂` are the
/// distance/angle tables (polar) or dx/dy tables (cartesian); with
/// `bias_mode = none` only the content term remains. Padded context
/// positions are excluded from the softmax.
#[allow(clippy::too_many_arguments)]
pub fn polar_attention(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &ModelConfig,
    layer: usize,
    h: Var,
    batch: &Batch,
    dropout: &mut Dropout<'_>,
    trace: Option<&mut AttentionTrace>,
) -> Result<Var> {
    let (bsz, n, heads, dh) = (batch.size, batch.seq_len, cfg.n_heads, cfg.d_head());
    let pre = |s: &str| format!("layers.{layer}.attn.{s}");

    let q = linear(tape, p, h, &pre("q"))?;
    let k = linear(tape, p, h, &pre("k"))?;
    let v = linear(tape, p, h, &pre("v"))?;
    let q = tape.split_heads(q, bsz, n, heads)?;
    let k = tape.split_heads(k, bsz, n, heads)?;
    let v = tape.split_heads(v, bsz, n, heads)?;

    let (convention, mut scores) = if cfg.standard_qk {
        (PairConvention::Own, tape.matmul_nt(q, k)?)
    } else {
        (PairConvention::Context, tape.matmul_nt(k, q)?)
    };
    let mut biases = [None, None];
    if let Some(tables) = cfg.bias_table_rows() {
        let bins = [&batch.pair_first, &batch.pair_second];
        for (k, ((name, _), bins)) in tables.iter().zip(bins).enumerate() {
            let table = p.var(&pre(name))?;
            let per_bin = tape.matmul_nt(q, table)?;
            let bias = tape.gather_pairs(per_bin, bins, heads, convention)?;
            biases[k] = Some(bias);
            scores = tape.add(scores, bias)?;
        }
    } else {
        debug_assert_eq!(cfg.bias_mode, BiasMode::None);
    }
    let scores = tape.scale(scores, 1.0 / libm::sqrt(dh as f64));

    let keep: Vec<bool> = (0..bsz * heads)
        .flat_map(|g| {
            let b = g / heads;
            batch.keep[b * n..(b + 1) * n].iter().copied()
        })
        .collect();
    let probs = tape.masked_softmax(scores, Some(&keep), n)?;
    if let Some(t) = trace {
        let [first, second] = biases.map(|b| b.map(|v| tape.value(v).clone()));
        t.push(LayerTrace {
            bias_first: first,
            bias_second: second,
            probs: tape.value(probs).clone(),
        });
    }
    let probs = dropout.apply(tape, probs, cfg.dropout)?;
    let ctx = tape.matmul(probs, v)?;
    let ctx = tape.merge_heads(ctx, bsz, n, heads)?;
    linear(tape, p, ctx, &pre("out"))
}

/// Embeddings followed by `n_layers` post-norm blocks. Returns the final
/// hidden states `[batch·seq, d_model]`.
pub fn encoder_forward(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &ModelConfig,
    batch: &Batch,
    dropout: &mut Dropout<'_>,
    mut trace: Option<&mut AttentionTrace>,
) -> Result<Var> {
    let mut h = embed_inputs(tape, p, cfg, batch, dropout)?;
    for l in 0..cfg.n_layers {
        let pre = |s: &str| format!("layers.{l}.{s}");
        let a = polar_attention(tape, p, cfg, l, h, batch, dropout, trace.as_deref_mut())?;
        let a = dropout.apply(tape, a, cfg.dropout)?;
        let r = tape.add(h, a)?;
        let h1 = layer_norm(tape, p, r, &pre("ln1"), cfg.layer_norm_eps)?;

        let f = linear(tape, p, h1, &pre("ffn.in"))?;
        let f = tape.gelu(f, cfg.activation);
        let f = linear(tape, p, f, &pre("ffn.out"))?;
        let f = dropout.apply(tape, f, cfg.dropout)?;
        let r = tape.add(h1, f)?;
        h = layer_norm(tape, p, r, &pre("ln2"), cfg.layer_norm_eps)?;
    }
    Ok(h)
}
