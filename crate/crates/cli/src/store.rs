//! On-disk layout of a run directory and self-contained checkpoint files.
//!
//! ```text
//! <out>/config.toml            resolved configuration
//! <out>/vocab.txt              one token per line, id = line index
//! <out>/checkpoint-000100.ckpt periodic training state
//! <out>/model.ckpt             final training state
//! <out>/metrics.log            one JSON object per step
//! <out>/manifest.json          run manifest
//! ```
//! Every checkpoint also embeds the configuration and vocabulary, so a
//! single `.ckpt` file is enough to rebuild the model.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use polar_layout_core::data::Vocab;
use polar_layout_core::tensor::checkpoint::Archive;
use polar_layout_core::training::TrainState;

use crate::config::ResolvedConfig;
use crate::error::{CliError, CliResult, Context};

pub const CONFIG_FILE: &str = "config.toml";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const MODEL_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.log";
pub const MANIFEST_FILE: &str = "manifest.json";

const CONFIG_KEY: &str = "run.config";
const VOCAB_KEY: &str = "run.vocab";
const HASH_KEY: &str = "run.config_hash";
const SEED_KEY: &str = "run.seed";

/// Writes to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    let mut f = fs::File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

pub fn checkpoint_name(step: usize) -> String {
    format!("checkpoint-{step:06}.ckpt")
}

pub fn vocab_to_string(vocab: &Vocab) -> String {
    let mut s = vocab.tokens().join("\n");
    s.push('\n');
    s
}

pub fn vocab_from_str(text: &str, path: &Path) -> CliResult<Vocab> {
    let tokens: Vec<String> = text.lines().map(str::to_string).collect();
    Vocab::from_tokens(tokens).map_err(|e| CliError::Config {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Training state plus the configuration and vocabulary it was trained with.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub state: TrainState,
    pub config: ResolvedConfig,
    pub vocab: Vocab,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut a = self.state.to_archive();
        a.manifest.insert(CONFIG_KEY.into(), self.config.to_toml());
        a.manifest.insert(VOCAB_KEY.into(), vocab_to_string(&self.vocab));
        a.manifest.insert(HASH_KEY.into(), self.config.hash());
        a.manifest.insert(SEED_KEY.into(), self.config.seed.to_string());
        a.encode()
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> CliResult<Self> {
        let a = Archive::decode(bytes).context("checkpoint")?;
        let field = |key: &str| {
            a.manifest.get(key).ok_or_else(|| CliError::Config {
                path: path.to_path_buf(),
                message: format!("checkpoint lacks {key}"),
            })
        };
        let config = ResolvedConfig::from_toml(field(CONFIG_KEY)?, path)?;
        let vocab = vocab_from_str(field(VOCAB_KEY)?, path)?;
        if field(HASH_KEY)? != &config.hash() {
            return Err(CliError::Config {
                path: path.to_path_buf(),
                message: "embedded configuration does not match its hash".into(),
            });
        }
        let state = TrainState::from_archive(&a, config.pretrain.adamw).context("checkpoint")?;
        if config.model.vocab_size != vocab.len() {
            return Err(CliError::Config {
                path: path.to_path_buf(),
                message: format!(
                    "vocabulary has {} tokens but the model expects {}",
                    vocab.len(),
                    config.model.vocab_size
                ),
            });
        }
        Ok(Checkpoint { state, config, vocab })
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        write_atomic(path, &self.to_bytes())
    }

    /// Loads a `.ckpt` file, or from a run directory its `model.ckpt`,
    /// falling back to the latest periodic checkpoint.
    pub fn load(path: &Path) -> CliResult<Self> {
        let file = if path.is_dir() {
            let model = path.join(MODEL_FILE);
            if model.is_file() {
                model
            } else {
                latest_checkpoint(path)?.ok_or_else(|| CliError::Config {
                    path: path.to_path_buf(),
                    message: "directory holds no checkpoint".into(),
                })?
            }
        } else {
            path.to_path_buf()
        };
        Checkpoint::from_bytes(&read_bytes(&file)?, &file)
    }
}

/// Highest-step `checkpoint-NNNNNN.ckpt` in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> CliResult<Option<PathBuf>> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("checkpoint-"))
            .and_then(|n| n.strip_suffix(".ckpt"))
            .and_then(|n| n.parse::<usize>().ok());
        if let Some(step) = step {
            if best.as_ref().is_none_or(|(b, _)| step > *b) {
                best = Some((step, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}
