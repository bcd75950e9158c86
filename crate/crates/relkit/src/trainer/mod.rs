//! Training: named presets, batch assembly, per-task forward passes,
//! the synchronous data-parallel loop, and corpus evaluation.

mod data;
mod eval;
mod model;
mod presets;
mod train;

pub use data::{Batch, DataSource, SyntheticSpec};
pub use eval::{
    evaluate, majority_scene_chance, oracle_report, CategoryScore, EvalReport, SOC_CATEGORIES,
};
pub use model::{batch_logits, batch_loss, loss_and_grads, mlp_params, StepOutput};
pub use presets::{
    build_baseline_mlp, build_model, Arch, MlpArch, ModelConfig, Task, BABI_ANSWERS,
    BABI_STORY_SENTENCES, BABI_VOCAB, CLEVR_ANSWERS, CLEVR_VOCAB, PRESETS, STATE_OBJECTS,
};
pub use train::{train, MetricsRow, TrainOptions, TrainOutcome};
