//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use polar_layout_core::data::{CorpusKind, DEFAULT_EVAL_FRACTION};

#[derive(Debug, Parser)]
#[command(name = "polar-layout", version, about = "Layout-aware encoder with polar relative attention bias")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Master seed; overrides `seed` in the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for independent runs (0 = one per core).
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labeled synthetic corpus with train/eval split files.
    Synth(SynthArgs),
    /// Pre-train with masked language modeling and local order prediction.
    Pretrain(PretrainArgs),
    /// Fine-tune for entity tagging over several seeds and report F1.
    Finetune(FinetuneArgs),
    /// Compare model variants across datasets in a table.
    Ablate(AblateArgs),
    /// Dump pair bins, bias scalars and attention weights for one document.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub kind: CorpusKind,
    #[arg(long)]
    pub n_docs: usize,
    #[arg(long, default_value_t = DEFAULT_EVAL_FRACTION)]
    pub eval_fraction: f64,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Document file, one JSON record per line.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Continue from the latest checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub eval: PathBuf,
    /// Pre-trained checkpoint file or run directory; random init without it.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Number of fine-tuning seeds; overrides the config file.
    #[arg(long)]
    pub seeds: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSpec {
    pub name: String,
    pub train: PathBuf,
    pub eval: PathBuf,
}

impl std::str::FromStr for DatasetSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, paths) = s.split_once('=').ok_or("expected NAME=TRAIN,EVAL")?;
        let (train, eval) = paths.split_once(',').ok_or("expected NAME=TRAIN,EVAL")?;
        if name.is_empty() || train.is_empty() || eval.is_empty() {
            return Err("expected NAME=TRAIN,EVAL".into());
        }
        Ok(DatasetSpec {
            name: name.to_string(),
            train: train.into(),
            eval: eval.into(),
        })
    }
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Repeatable `NAME=TRAIN,EVAL`.
    #[arg(long = "dataset", required = true)]
    pub datasets: Vec<DatasetSpec>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Add one column per bias mode.
    #[arg(long)]
    pub bias_sweep: bool,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub document: PathBuf,
    /// Record index within the document file.
    #[arg(long, default_value_t = 0)]
    pub doc_index: usize,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    #[arg(long, default_value_t = 0)]
    pub head: usize,
}
