//! Configured runs: pretraining, fine-tuning loops, evaluation and studies.

pub mod config;
pub mod eval;
pub mod finetune;
pub mod metrics;
pub mod studies;

pub use config::{uniform_fine_tune_steps, Method, RunConfig, SCHEMA_VERSION};
pub use eval::{
    drift_metric, energy_distance, evaluate, sample_finals, ConditionStats, EvaluationReport,
};
pub use finetune::{
    d3po_pairs, eval_seed, final_evaluation, finetune, finetune_d3po, finetune_policy_gradient,
    finetune_policy_gradient_with, finetune_tailorpo, FinetuneOutput, RunStatus, TraceEntry,
};
pub use metrics::{MetricLog, MetricRecord};
pub use studies::{
    ablation_cells, ablation_sweep, generalization_study, inconsistency_study, AblationAxis,
    AblationRow, ConflictRow, GeneralizationRow,
};

use crate::diffusion::pretrain;
use crate::error::Result;
use crate::nnet::{params_digest, Checkpoint};
use crate::rng::task_rng;

/// Pretrains the base model described by `cfg` and wraps it as a
/// checkpoint. Deterministic in `cfg.pretrain.seed`.
pub fn pretrain_checkpoint(cfg: &RunConfig) -> Result<(Checkpoint, Vec<f64>)> {
    cfg.validate()?;
    let spec = cfg.network.clone();
    let init = spec.init(&mut task_rng(cfg.pretrain.seed, &[0]));
    let out = pretrain(init, &spec, &cfg.mixture()?, &cfg.sched()?, &cfg.pretrain)?;
    let digest = params_digest(&out.params);
    let ckpt = Checkpoint::new(spec, out.params)
        .with_meta("kind", "pretrained")
        .with_meta("pretrain_seed", cfg.pretrain.seed)
        .with_meta("pretrain_steps", cfg.pretrain.steps)
        .with_meta("digest", digest);
    Ok((ckpt, out.loss_curve))
}
