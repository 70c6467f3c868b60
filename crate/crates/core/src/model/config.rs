use alloc::format;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BinningConfig;
use crate::tensor::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasMode {
    Polar,
    Cartesian,
    None,
}

impl BiasMode {
    pub const ALL: [BiasMode; 3] = [BiasMode::Polar, BiasMode::Cartesian, BiasMode::None];

    pub fn as_str(self) -> &'static str {
        match self {
            BiasMode::Polar => "polar",
            BiasMode::Cartesian => "cartesian",
            BiasMode::None => "none",
        }
    }
}

impl core::fmt::Display for BiasMode {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl core::str::FromStr for BiasMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BiasMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown bias mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub binning: BinningConfig,
    pub use_abs_2d: bool,
    pub bias_mode: BiasMode,
    pub dropout: f64,
    pub activation: Activation,
    /// Score with `Q_i·k_j` instead of `Q_j·k_i`.
    pub standard_qk: bool,
    pub layer_norm_eps: f64,
    pub init_std: f64,
}

impl ModelConfig {
    /// 2 layers, 4 heads, width 64.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 128,
            vocab_size,
            max_seq_len: 128,
            binning: BinningConfig::default(),
            use_abs_2d: false,
            bias_mode: BiasMode::Polar,
            dropout: 0.0,
            activation: Activation::Exact,
            standard_qk: false,
            layer_norm_eps: 1e-12,
            init_std: 0.02,
        }
    }

    /// 12 layers, 12 heads, width 768.
    pub fn paper(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 12,
            n_heads: 12,
            d_model: 768,
            d_ff: 3072,
            max_seq_len: 512,
            dropout: 0.1,
            ..Self::desk(vocab_size)
        }
    }

    pub fn preset(name: &str, vocab_size: usize) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk(vocab_size)),
            "paper" => Ok(Self::paper(vocab_size)),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.layer_norm_eps > 0.0) || !(self.init_std > 0.0) {
            return Err(Error::Config("layer_norm_eps and init_std must be positive".into()));
        }
        self.binning.validate()
    }

    /// Rows of the two per-layer relative tables, or `None` without a bias.
    pub fn bias_table_rows(&self) -> Option<[(&'static str, usize); 2]> {
        match self.bias_mode {
            BiasMode::Polar => Some([
                ("dist_table", self.binning.n_dist_bins),
                ("angle_table", self.binning.n_angle_bins),
            ]),
            BiasMode::Cartesian => Some([
                ("dx_table", self.binning.n_cartesian_bins()),
                ("dy_table", self.binning.n_cartesian_bins()),
            ]),
            BiasMode::None => None,
        }
    }
}
