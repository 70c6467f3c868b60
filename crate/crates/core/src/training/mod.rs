//! Masking, objectives, optimizer, schedule and the training loops.

mod ablation;
mod finetune;
mod loss;
mod masking;
mod optim;
mod pretrain;
mod schedule;

pub use ablation::{
    ablation_jobs, ablation_variants, assemble_table, run_ablation, run_ablation_job, AblationJob, AblationRow,
    AblationTable, AblationVariant,
};
pub use finetune::{
    evaluate_ner, init_finetuning, predict_tags, prepare_ner, run_finetuning, run_finetuning_seeds, summarize,
    transfer_parameters, EpochMetrics, FinetuneConfig, FinetuneOutcome, NerData, SeedSummary,
};
pub use loss::{collect_grads, count_hits, pretrain_loss, Hits, PretrainLoss};
pub use masking::{apply_lop_masking, apply_mlm_corruption, make_masking_plan, mask_count, MaskingPlan, Replacement, MASK_RATE};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig};
pub use pretrain::{
    batch_indices, evaluate_pretraining, init_pretraining, masked_batch, pretrain_batch, run_pretraining, train_step,
    History, Observer, PretrainConfig, PretrainEval, StepMetrics, TrainState,
};
pub use schedule::{lr_at, LrPolicy, Schedule};
