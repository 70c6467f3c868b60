use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::geometry::COORD_MAX;
use crate::rng::{domain, normal, stream};
use crate::tensor::{Tape, Tensor, Var};

pub const ABS_2D_AXES: [&str; 4] = ["x0", "y0", "x1", "y1"];

/// Which task heads a parameter store carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct HeadSet {
    pub mlm: bool,
    pub lop: bool,
    /// Number of NER labels.
    pub ner: Option<usize>,
}

impl HeadSet {
    pub const PRETRAIN: HeadSet = HeadSet {
        mlm: true,
        lop: true,
        ner: None,
    };

    pub fn ner(n_labels: usize) -> Self {
        HeadSet {
            mlm: false,
            lop: false,
            ner: Some(n_labels),
        }
    }
}

enum Init {
    Normal,
    Zeros,
    Ones,
}

fn layout(cfg: &ModelConfig, heads: HeadSet) -> Vec<(String, Vec<usize>, Init)> {
    let (d, f, dh) = (cfg.d_model, cfg.d_ff, cfg.d_head());
    let mut out: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut push = |name: String, shape: &[usize], init: Init| out.push((name, shape.to_vec(), init));

    push("embeddings.tok".into(), &[cfg.vocab_size, d], Init::Normal);
    // one extra row stands in for a masked 1D position
    push("embeddings.pos1d".into(), &[cfg.max_seq_len + 1, d], Init::Normal);
    if cfg.use_abs_2d {
        for axis in ABS_2D_AXES {
            push(format!("embeddings.abs2d.{axis}"), &[COORD_MAX as usize + 1, d], Init::Normal);
        }
    }
    push("embeddings.ln.gain".into(), &[d], Init::Ones);
    push("embeddings.ln.bias".into(), &[d], Init::Zeros);

    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        for proj in ["q", "k", "v", "out"] {
            push(p(&format!("attn.{proj}.weight")), &[d, d], Init::Normal);
            push(p(&format!("attn.{proj}.bias")), &[d], Init::Zeros);
        }
        if let Some(tables) = cfg.bias_table_rows() {
            for (name, rows) in tables {
                push(p(&format!("attn.{name}")), &[rows, dh], Init::Normal);
            }
        }
        push(p("ln1.gain"), &[d], Init::Ones);
        push(p("ln1.bias"), &[d], Init::Zeros);
        push(p("ffn.in.weight"), &[d, f], Init::Normal);
        push(p("ffn.in.bias"), &[f], Init::Zeros);
        push(p("ffn.out.weight"), &[f, d], Init::Normal);
        push(p("ffn.out.bias"), &[d], Init::Zeros);
        push(p("ln2.gain"), &[d], Init::Ones);
        push(p("ln2.bias"), &[d], Init::Zeros);
    }

    if heads.mlm {
        push("mlm.dense.weight".into(), &[d, d], Init::Normal);
        push("mlm.dense.bias".into(), &[d], Init::Zeros);
        push("mlm.ln.gain".into(), &[d], Init::Ones);
        push("mlm.ln.bias".into(), &[d], Init::Zeros);
        push("mlm.out_bias".into(), &[cfg.vocab_size], Init::Zeros);
    }
    if heads.lop {
        push("lop.weight".into(), &[d, cfg.max_seq_len], Init::Normal);
        push("lop.bias".into(), &[cfg.max_seq_len], Init::Zeros);
    }
    if let Some(n) = heads.ner {
        push("ner.weight".into(), &[d, n], Init::Normal);
        push("ner.bias".into(), &[n], Init::Zeros);
    }
    out
}

/// Learned scalars of the pre-training model: encoder plus MLM and LOP heads.
pub fn count_parameters(cfg: &ModelConfig) -> usize {
    layout(cfg, HeadSet::PRETRAIN)
        .iter()
        .map(|(_, shape, _)| shape.iter().product::<usize>())
        .sum()
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a, so a tensor's init stream does not depend on which others exist
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Named parameter tensors in a stable (lexicographic) order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    /// Weights and tables ~ N(0, init_std²), biases 0, layer-norm gains 1.
    pub fn init(cfg: &ModelConfig, heads: HeadSet, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let tensors = layout(cfg, heads)
            .into_iter()
            .map(|(name, shape, init)| {
                let t = match init {
                    Init::Zeros => Tensor::zeros(&shape),
                    Init::Ones => Tensor::full(&shape, 1.0),
                    Init::Normal => {
                        let mut rng = stream(seed, domain::INIT, name_hash(&name));
                        Tensor::from_fn(&shape, |_| cfg.init_std * normal(&mut rng))
                    }
                };
                (name, t)
            })
            .collect();
        Ok(ParameterStore { tensors })
    }

    pub fn from_tensors(tensors: BTreeMap<String, Tensor>) -> Self {
        ParameterStore { tensors }
    }

    /// Checks names and shapes against what `cfg` and `heads` require.
    pub fn check(&self, cfg: &ModelConfig, heads: HeadSet) -> Result<()> {
        let want = layout(cfg, heads);
        for (name, shape, _) in &want {
            match self.tensors.get(name) {
                None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if want.len() != self.tensors.len() {
            let extra = self
                .tensors
                .keys()
                .find(|k| !want.iter().any(|(n, _, _)| n == *k))
                .cloned()
                .unwrap_or_default();
            return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn into_tensors(self) -> BTreeMap<String, Tensor> {
        self.tensors
    }

    /// Puts every tensor on `tape`: as trainable leaves, or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }
}

/// Tape handles for a [`ParameterStore`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        BoundParams { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter {name} is not bound")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}
