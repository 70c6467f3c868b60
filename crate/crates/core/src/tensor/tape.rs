use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::{Tensor, IGNORE_INDEX};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// GELU variant. Fixed per model config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Exact,
    Tanh,
}

/// Which query row a pair bias reads in [`Tape::gather_pairs`]: for output
/// row `i` and context column `j`, `Context` reads row `j`, `Own` reads row `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairConvention {
    Context,
    Own,
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
        shared_b: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Sum(Var),
    Gelu(Var, Activation),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
        count: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Reshape(Var),
    SplitHeads {
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    GatherPairs {
        src: Var,
        bins: Vec<usize>,
        heads: usize,
        seq: usize,
        width: usize,
        convention: PairConvention,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of operations. Every node's inputs precede it, so a single
/// reverse sweep in [`Tape::backward`] visits nodes in topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`], if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like the value; zeros when unreachable.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let value = &self.nodes[v.0].value;
        match self.grad(v) {
            Some(g) => Tensor::new(value.shape().to_vec(), g.to_vec()).expect("grad length matches value"),
            None => Tensor::zeros(value.shape()),
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ---------------------------------------------------------------- ops

    /// `a[.., m, k] · b` with `b` either a shared `[k, n]` matrix or a
    /// batched `[batch, k, n]` tensor matching `a`'s leading dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[.., m, k] · bᵀ` with `b` shaped `[n, k]` or `[batch, n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || Error::Shape {
            op: if trans_b { "matmul_nt" } else { "matmul" },
            left: sa.clone(),
            right: sb.clone(),
        };
        if sa.len() < 2 || !(sb.len() == 2 || sb.len() == 3) {
            return Err(err());
        }
        let m = sa[sa.len() - 2];
        let k = sa[sa.len() - 1];
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let shared_b = sb.len() == 2;
        if !shared_b && sb[0] != batch {
            return Err(err());
        }
        let (bk, n) = {
            let r = &sb[sb.len() - 2..];
            if trans_b {
                (r[1], r[0])
            } else {
                (r[0], r[1])
            }
        };
        if bk != k {
            return Err(err());
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let ad = self.data(a);
            let bd = self.data(b);
            for g in 0..batch {
                let ag = &ad[g * m * k..(g + 1) * m * k];
                let bg = if shared_b { bd } else { &bd[g * k * n..(g + 1) * k * n] };
                let cg = &mut out[g * m * n..(g + 1) * m * n];
                if trans_b {
                    gemm_nt(m, k, n, ag, bg, cg);
                } else {
                    gemm_nn(m, k, n, ag, bg, cg);
                }
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.push(m);
        shape.push(n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
                shared_b,
            },
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out: Vec<f64> = self.data(a).iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, out).expect("same shape"), rg, Op::Scale(a, s))
    }

    /// Adds a `[c]` bias to every row of `x[.., c]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.shape(bias) != [c] {
            return Err(Error::Shape {
                op: "add_bias",
                left: self.shape(x).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let bd = self.data(bias);
        let out: Vec<f64> = self.data(x).iter().enumerate().map(|(i, v)| v + bd[i % c]).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::AddBias(x, bias)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    pub fn gelu(&mut self, x: Var, mode: Activation) -> Var {
        let out: Vec<f64> = self.data(x).iter().map(|&v| gelu_value(v, mode)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, out).expect("same shape"), rg, Op::Gelu(x, mode))
    }

    /// Standardizes the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Contract(format!("layer_norm eps must be positive, got {eps}")));
        }
        let d = self.value(x).last_dim();
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    left: self.shape(x).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let xd = self.data(x);
        let (gd, bd) = (self.data(gain), self.data(bias));
        let rows = xd.len() / d;
        let mut out = vec![0.0; xd.len()];
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / libm::sqrt(var + eps);
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gd[c] + bd[c];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.masked_softmax(x, None, 1)
    }

    /// Softmax over the last axis where column `j` of a row in group `g`
    /// participates only if `keep[g * n + j]`. Rows are grouped in runs of
    /// `rows_per_group`. Excluded columns get probability exactly 0.
    pub fn masked_softmax(&mut self, x: Var, keep: Option<&[bool]>, rows_per_group: usize) -> Result<Var> {
        let n = self.value(x).last_dim();
        let xd = self.data(x);
        let rows = xd.len() / n;
        if let Some(k) = keep {
            let groups = rows.div_ceil(rows_per_group.max(1));
            if k.len() != groups * n {
                return Err(Error::Shape {
                    op: "masked_softmax",
                    left: self.shape(x).to_vec(),
                    right: vec![k.len()],
                });
            }
        }
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * n..(r + 1) * n];
            let mask = keep.map(|k| {
                let g = r / rows_per_group;
                &k[g * n..(g + 1) * n]
            });
            let on = |j: usize| mask.is_none_or(|m| m[j]);
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if on(j) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::Contract("softmax row has no unmasked entries".into()));
            }
            let orow = &mut out[r * n..(r + 1) * n];
            let mut total = 0.0;
            for j in 0..n {
                if on(j) {
                    let e = libm::exp(row[j] - max);
                    orow[j] = e;
                    total += e;
                }
            }
            for v in orow.iter_mut() {
                *v /= total;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Softmax(x)))
    }

    /// Gathers rows of a `[V, d]` table; gradients scatter back additively.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::Shape {
                op: "gather_rows",
                left: ts,
                right: vec![ids.len()],
            });
        }
        let (v, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::Index { id: bad, size: v });
        }
        if ids.is_empty() {
            return Err(Error::Contract("gather_rows with no ids".into()));
        }
        let td = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            rg,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean negative log-softmax over rows whose target is not `ignore_index`;
    /// 0 when every row is ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_index: usize) -> Result<Var> {
        let c = self.value(logits).last_dim();
        let rows = self.value(logits).len() / c;
        if targets.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: self.shape(logits).to_vec(),
                right: vec![targets.len()],
            });
        }
        let ld = self.data(logits);
        let mut probs = vec![0.0; ld.len()];
        let mut total = 0.0;
        let mut count = 0usize;
        let mut norm_targets = Vec::with_capacity(rows);
        for (r, &t) in targets.iter().enumerate() {
            if t == ignore_index {
                norm_targets.push(IGNORE_INDEX);
                continue;
            }
            if t >= c {
                return Err(Error::Index { id: t, size: c });
            }
            norm_targets.push(t);
            let row = &ld[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for &v in row {
                s += libm::exp(v - max);
            }
            let lse = max + libm::log(s);
            total += lse - row[t];
            count += 1;
            for j in 0..c {
                probs[r * c + j] = libm::exp(row[j] - lse);
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                targets: norm_targets,
                probs,
                count,
            },
        ))
    }

    /// Inverted dropout. `p == 0` returns `x` unchanged without recording.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Contract(format!("dropout rate must be in [0, 1), got {p}")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
        let out: Vec<f64> = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Dropout { x, mask }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::Reshape(x)))
    }

    /// `[batch·seq, heads·dh]` → `[batch·heads, seq, dh]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != batch * seq || !s[1].is_multiple_of(heads) {
            return Err(Error::Shape {
                op: "split_heads",
                left: s,
                right: vec![batch, seq, heads],
            });
        }
        let d = s[1];
        let dh = d / heads;
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for b in 0..batch {
            for t in 0..seq {
                let src = &xd[(b * seq + t) * d..(b * seq + t + 1) * d];
                for h in 0..heads {
                    let o = ((b * heads + h) * seq + t) * dh;
                    out[o..o + dh].copy_from_slice(&src[h * dh..(h + 1) * dh]);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![batch * heads, seq, dh], out)?,
            rg,
            Op::SplitHeads { x, batch, seq, heads },
        ))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[0] != batch * heads || s[1] != seq {
            return Err(Error::Shape {
                op: "merge_heads",
                left: s,
                right: vec![batch, seq, heads],
            });
        }
        let dh = s[2];
        let d = dh * heads;
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for b in 0..batch {
            for t in 0..seq {
                for h in 0..heads {
                    let i = ((b * heads + h) * seq + t) * dh;
                    let o = (b * seq + t) * d + h * dh;
                    out[o..o + dh].copy_from_slice(&xd[i..i + dh]);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![batch * seq, d], out)?,
            rg,
            Op::MergeHeads { x, batch, seq, heads },
        ))
    }

    /// Builds per-pair scores from per-row bin scores.
    ///
    /// `src` is `[batch·heads, seq, width]` (typically `Q · Eᵀ` for a bin
    /// table `E`), `bins` is `[batch, seq, seq]` with entries `< width`. The
    /// output `[batch·heads, seq, seq]` holds at `(g, i, j)` the value
    /// `src[g, r, bins[b, i, j]]` where `r` is chosen by `convention`.
    pub fn gather_pairs(
        &mut self,
        src: Var,
        bins: &[usize],
        heads: usize,
        convention: PairConvention,
    ) -> Result<Var> {
        let s = self.shape(src).to_vec();
        let bad = || Error::Shape {
            op: "gather_pairs",
            left: s.clone(),
            right: vec![bins.len(), heads],
        };
        if s.len() != 3 || heads == 0 || !s[0].is_multiple_of(heads) {
            return Err(bad());
        }
        let (groups, seq, width) = (s[0], s[1], s[2]);
        let batch = groups / heads;
        if bins.len() != batch * seq * seq {
            return Err(bad());
        }
        if let Some(&b) = bins.iter().find(|&&b| b >= width) {
            return Err(Error::Index { id: b, size: width });
        }
        let sd = self.data(src);
        let mut out = vec![0.0; groups * seq * seq];
        for g in 0..groups {
            let b = g / heads;
            for i in 0..seq {
                for j in 0..seq {
                    let bin = bins[(b * seq + i) * seq + j];
                    let row = match convention {
                        PairConvention::Context => j,
                        PairConvention::Own => i,
                    };
                    out[(g * seq + i) * seq + j] = sd[(g * seq + row) * width + bin];
                }
            }
        }
        let rg = self.rg(&[src]);
        Ok(self.push(
            Tensor::new(vec![groups, seq, seq], out)?,
            rg,
            Op::GatherPairs {
                src,
                bins: bins.to_vec(),
                heads,
                seq,
                width,
                convention,
            },
        ))
    }

    // ----------------------------------------------------------- backward

    /// Accumulates `d loss / d v` into every recorded value that requires a
    /// gradient. Previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].take() else { continue };
            self.backprop_node(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, idx: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[idx];
        macro_rules! with {
            ($v:expr, |$d:ident| $body:block) => {
                if let Some($d) = grad_slot(nodes, grads, $v) $body
            };
        }
        let val = |v: Var| nodes[v.0].value.data();

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
                shared_b,
            } => {
                let (ad, bd) = (val(a), val(b));
                let bsz = k * n;
                with!(a, |da| {
                    for grp in 0..batch {
                        let gg = &g[grp * m * n..(grp + 1) * m * n];
                        let bg = if shared_b { bd } else { &bd[grp * bsz..(grp + 1) * bsz] };
                        let dag = &mut da[grp * m * k..(grp + 1) * m * k];
                        if trans_b {
                            gemm_nn(m, n, k, gg, bg, dag);
                        } else {
                            gemm_nt(m, n, k, gg, bg, dag);
                        }
                    }
                });
                with!(b, |db| {
                    for grp in 0..batch {
                        let gg = &g[grp * m * n..(grp + 1) * m * n];
                        let ag = &ad[grp * m * k..(grp + 1) * m * k];
                        let dbg = if shared_b { &mut db[..] } else { &mut db[grp * bsz..(grp + 1) * bsz] };
                        if trans_b {
                            gemm_tn(n, m, k, gg, ag, dbg);
                        } else {
                            gemm_tn(k, m, n, ag, gg, dbg);
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                with!(a, |da| {
                    for (d, x) in da.iter_mut().zip(g) {
                        *d += x;
                    }
                });
                with!(b, |db| {
                    for (d, x) in db.iter_mut().zip(g) {
                        *d += x;
                    }
                });
            }
            &Op::Mul(a, b) => {
                let (ad, bd) = (val(a), val(b));
                with!(a, |da| {
                    for i in 0..g.len() {
                        da[i] += g[i] * bd[i];
                    }
                });
                with!(b, |db| {
                    for i in 0..g.len() {
                        db[i] += g[i] * ad[i];
                    }
                });
            }
            &Op::Scale(a, s) => {
                with!(a, |da| {
                    for (d, x) in da.iter_mut().zip(g) {
                        *d += x * s;
                    }
                });
            }
            &Op::AddBias(x, bias) => {
                with!(x, |dx| {
                    for (d, v) in dx.iter_mut().zip(g) {
                        *d += v;
                    }
                });
                with!(bias, |db| {
                    let c = db.len();
                    for (i, v) in g.iter().enumerate() {
                        db[i % c] += v;
                    }
                });
            }
            &Op::Sum(x) => {
                with!(x, |dx| {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                });
            }
            &Op::Gelu(x, mode) => {
                let xd = val(x);
                with!(x, |dx| {
                    for i in 0..g.len() {
                        dx[i] += g[i] * gelu_grad(xd[i], mode);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gd = val(*gain);
                let d = gd.len();
                let rows = xhat.len() / d;
                with!(*x, |dx| {
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for c in 0..d {
                            let dh = gr[c] * gd[c];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[c];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for c in 0..d {
                            let dh = gr[c] * gd[c];
                            dx[r * d + c] += rstd[r] * (dh - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                });
                with!(*gain, |dg| {
                    for (i, v) in g.iter().enumerate() {
                        dg[i % d] += v * xhat[i];
                    }
                });
                with!(*bias, |db| {
                    for (i, v) in g.iter().enumerate() {
                        db[i % d] += v;
                    }
                });
            }
            &Op::Softmax(x) => {
                let y = node.value.data();
                let n = node.value.last_dim();
                with!(x, |dx| {
                    for r in 0..y.len() / n {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dx[r * n + j] += yr[j] * (gr[j] - s);
                        }
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                let d = node.value.last_dim();
                with!(*table, |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            dt[id * d + c] += g[r * d + c];
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if *count > 0 {
                    let c = nodes[logits.0].value.last_dim();
                    let scale = g[0] / *count as f64;
                    with!(*logits, |dl| {
                        for (r, &t) in targets.iter().enumerate() {
                            if t == IGNORE_INDEX {
                                continue;
                            }
                            for j in 0..c {
                                let onehot = if j == t { 1.0 } else { 0.0 };
                                dl[r * c + j] += scale * (probs[r * c + j] - onehot);
                            }
                        }
                    });
                }
            }
            Op::Dropout { x, mask } => {
                with!(*x, |dx| {
                    for i in 0..g.len() {
                        dx[i] += g[i] * mask[i];
                    }
                });
            }
            &Op::Reshape(x) => {
                with!(x, |dx| {
                    for (d, v) in dx.iter_mut().zip(g) {
                        *d += v;
                    }
                });
            }
            &Op::SplitHeads { x, batch, seq, heads } => {
                let dh = node.value.last_dim();
                let d = dh * heads;
                with!(x, |dx| {
                    for b in 0..batch {
                        for t in 0..seq {
                            for h in 0..heads {
                                let o = ((b * heads + h) * seq + t) * dh;
                                let i = (b * seq + t) * d + h * dh;
                                for e in 0..dh {
                                    dx[i + e] += g[o + e];
                                }
                            }
                        }
                    }
                });
            }
            &Op::MergeHeads { x, batch, seq, heads } => {
                let d = node.value.last_dim();
                let dh = d / heads;
                with!(x, |dx| {
                    for b in 0..batch {
                        for t in 0..seq {
                            for h in 0..heads {
                                let i = ((b * heads + h) * seq + t) * dh;
                                let o = (b * seq + t) * d + h * dh;
                                for e in 0..dh {
                                    dx[i + e] += g[o + e];
                                }
                            }
                        }
                    }
                });
            }
            Op::GatherPairs {
                src,
                bins,
                heads,
                seq,
                width,
                convention,
            } => {
                let (heads, seq, width) = (*heads, *seq, *width);
                let groups = nodes[src.0].value.shape()[0];
                with!(*src, |ds| {
                    for grp in 0..groups {
                        let b = grp / heads;
                        for i in 0..seq {
                            for j in 0..seq {
                                let bin = bins[(b * seq + i) * seq + j];
                                let row = match convention {
                                    PairConvention::Context => j,
                                    PairConvention::Own => i,
                                };
                                ds[(grp * seq + row) * width + bin] += g[(grp * seq + i) * seq + j];
                            }
                        }
                    }
                });
            }
        }
    }
}

// Inputs always precede the node being processed, so the slot handed out here
// never aliases the node's own gradient.
fn grad_slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    let len = n.value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn gelu_value(x: f64, mode: Activation) -> f64 {
    match mode {
        Activation::Exact => 0.5 * x * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2)),
        Activation::Tanh => {
            let u = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
            0.5 * x * (1.0 + libm::tanh(u))
        }
    }
}

fn gelu_grad(x: f64, mode: Activation) -> f64 {
    match mode {
        Activation::Exact => {
            let cdf = 0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2));
            let pdf = INV_SQRT_2PI * libm::exp(-0.5 * x * x);
            cdf + x * pdf
        }
        Activation::Tanh => {
            let u = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
            let t = libm::tanh(u);
            let du = SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x);
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        }
    }
}
