//! TOML run configuration: a preset plus optional overrides, resolved into
//! the full model and training settings.

use std::path::Path;

use polar_layout_core::model::{BiasMode, ModelConfig};
use polar_layout_core::tensor::Activation;
use polar_layout_core::training::{AdamWConfig, FinetuneConfig, LrPolicy, PretrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelOverrides {
    pub n_layers: Option<usize>,
    pub n_heads: Option<usize>,
    pub d_model: Option<usize>,
    pub d_ff: Option<usize>,
    pub max_seq_len: Option<usize>,
    pub rho_max: Option<f64>,
    pub n_dist_bins: Option<usize>,
    pub n_angle_bins: Option<usize>,
    pub use_abs_2d: Option<bool>,
    pub bias_mode: Option<BiasMode>,
    pub dropout: Option<f64>,
    pub activation: Option<Activation>,
    pub standard_qk: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainOverrides {
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub warmup_fraction: Option<f64>,
    pub dynamic_masking: Option<bool>,
    pub clip_norm: Option<f64>,
    pub weight_decay: Option<f64>,
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneOverrides {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub seeds: Option<usize>,
    pub clip_norm: Option<f64>,
    pub weight_decay: Option<f64>,
}

/// The file a user writes. Every field is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigFile {
    pub preset: Option<String>,
    pub seed: Option<u64>,
    pub min_freq: Option<usize>,
    pub model: ModelOverrides,
    pub pretrain: PretrainOverrides,
    pub finetune: FinetuneOverrides,
}

impl ConfigFile {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load_or_default(path: Option<&Path>) -> CliResult<Self> {
        path.map_or_else(|| Ok(ConfigFile::default()), ConfigFile::load)
    }
}

/// Fully specified settings; its TOML form is hashed into every manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedConfig {
    pub preset: String,
    pub seed: u64,
    pub min_freq: usize,
    pub n_seeds: usize,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
}

/// Preset-specific training defaults: paper values for `paper`, rates that
/// converge within the desk step budget for `desk`.
fn training_defaults(preset: &str) -> (f64, f64) {
    match preset {
        "paper" => (1e-4, 5e-5),
        _ => (3e-3, 1e-3),
    }
}

impl ResolvedConfig {
    pub fn resolve(file: &ConfigFile, vocab_size: usize, seed: Option<u64>) -> CliResult<Self> {
        let preset = file.preset.clone().unwrap_or_else(|| "desk".to_string());
        let base = ModelConfig::preset(&preset, vocab_size).map_err(|e| CliError::Usage(e.to_string()))?;
        Self::resolve_with_model(file, base, &preset, seed)
    }

    /// Resolution against a model config taken from elsewhere (a checkpoint).
    pub fn resolve_with_model(file: &ConfigFile, base: ModelConfig, preset: &str, seed: Option<u64>) -> CliResult<Self> {
        let m = &file.model;
        let mut model = base;
        macro_rules! set {
            ($dst:expr, $src:expr) => {
                if let Some(v) = $src {
                    $dst = v;
                }
            };
        }
        set!(model.n_layers, m.n_layers);
        set!(model.n_heads, m.n_heads);
        set!(model.d_model, m.d_model);
        set!(model.d_ff, m.d_ff);
        set!(model.max_seq_len, m.max_seq_len);
        set!(model.binning.rho_max, m.rho_max);
        set!(model.binning.n_dist_bins, m.n_dist_bins);
        set!(model.binning.n_angle_bins, m.n_angle_bins);
        set!(model.use_abs_2d, m.use_abs_2d);
        set!(model.bias_mode, m.bias_mode);
        set!(model.dropout, m.dropout);
        set!(model.activation, m.activation);
        set!(model.standard_qk, m.standard_qk);
        model.validate().map_err(|e| CliError::Usage(e.to_string()))?;

        let seed = resolve_seed(file, seed)?;
        let (pre_lr, ft_lr) = training_defaults(preset);
        let p = &file.pretrain;
        let pretrain = PretrainConfig {
            steps: p.steps.unwrap_or(500),
            batch_size: p.batch_size.unwrap_or(16),
            lr: LrPolicy::WarmupCosine {
                target_lr: p.lr.unwrap_or(pre_lr),
                warmup_fraction: p.warmup_fraction.unwrap_or(0.05),
            },
            seed,
            dynamic_masking: p.dynamic_masking.unwrap_or(false),
            clip_norm: p.clip_norm.unwrap_or(1.0),
            adamw: AdamWConfig {
                weight_decay: p.weight_decay.unwrap_or(0.01),
                ..AdamWConfig::default()
            },
            checkpoint_every: p.checkpoint_every.unwrap_or(100),
        };
        pretrain.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        let f = &file.finetune;
        let finetune = FinetuneConfig {
            epochs: f.epochs.unwrap_or(30),
            batch_size: f.batch_size.unwrap_or(16),
            lr: LrPolicy::Constant {
                lr: f.lr.unwrap_or(ft_lr),
            },
            seed,
            clip_norm: f.clip_norm.unwrap_or(1.0),
            adamw: AdamWConfig {
                weight_decay: f.weight_decay.unwrap_or(0.01),
                ..AdamWConfig::default()
            },
            eval_every_epoch: true,
        };
        if finetune.epochs == 0 || finetune.batch_size == 0 {
            return Err(CliError::Usage("finetune epochs and batch_size must be positive".into()));
        }
        Ok(ResolvedConfig {
            preset: preset.to_string(),
            seed,
            min_freq: file.min_freq.unwrap_or(1),
            n_seeds: f.seeds.unwrap_or(10),
            model,
            pretrain,
            finetune,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("resolved config serializes")
    }

    pub fn from_toml(text: &str, path: &Path) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Hex sha256 of the TOML form.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }
}

/// Command-line seed, else the file's, else 0. Seeds must fit in `i64`.
pub fn resolve_seed(file: &ConfigFile, seed: Option<u64>) -> CliResult<u64> {
    let seed = seed.or(file.seed).unwrap_or(0);
    if seed > i64::MAX as u64 {
        return Err(CliError::Usage(format!("seed {seed} exceeds {}", i64::MAX)));
    }
    Ok(seed)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
