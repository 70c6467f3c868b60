//! The layout-aware encoder and its task heads.

mod config;
mod encoder;
mod heads;
mod params;

pub use config::{BiasMode, ModelConfig};
pub use encoder::{embed_inputs, encoder_forward, polar_attention, AttentionTrace, Dropout, LayerTrace};
pub use heads::{lop_head, mlm_head, ner_head};
pub use params::{count_parameters, BoundParams, HeadSet, ParameterStore};

/// Row of the 1D position table substituted at position-masked tokens.
pub fn masked_position_id(cfg: &ModelConfig) -> usize {
    cfg.max_seq_len
}
