use rayon::prelude::*;
use serde::Serialize;

use super::config::{uniform_fine_tune_steps, Method, RunConfig};
use super::finetune::{final_evaluation, finetune, RunStatus};
use crate::diffusion::sample_trajectory;
use crate::error::{Error, Result};
use crate::guidance::GuidanceConfig;
use crate::nnet::{params_digest, Checkpoint};
use crate::reward::{mc_oracle, Denoiser, Reward};
use crate::rng::{derive_seed, task_rng};

/// Conflicts between step-level and terminal preference at one step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConflictRow {
    pub step: usize,
    pub t: usize,
    pub pairs: usize,
    pub conflicts: usize,
    pub fraction: f64,
    pub ddim_eta: f64,
}

/// For `n_pairs` independent trajectory pairs, compares at every fine-tuned
/// step the ordering of the rollout-oracle step-wise rewards with the
/// ordering of the two terminal rewards. `ddim_eta` replaces the sampler
/// stochasticity of `cfg` for both the trajectories and the rollouts.
pub fn inconsistency_study(
    pretrained: &Checkpoint,
    cfg: &RunConfig,
    ddim_eta: f64,
    n_pairs: usize,
    n_rollouts: usize,
    seed: u64,
) -> Result<Vec<ConflictRow>> {
    cfg.validate()?;
    let spec = &pretrained.spec;
    let sched = cfg.sched()?.with_eta(ddim_eta)?;
    let grid = cfg.grid()?;
    let model = cfg.reward_model()?;
    let steps = cfg.fine_tune_descending();
    let k_max = grid.len();
    let den = Denoiser::new(&pretrained.params, spec, &sched);
    let flags: Vec<Vec<bool>> = (0..n_pairs)
        .into_par_iter()
        .map(|p| {
            let c = cfg.conditions[p % cfg.conditions.len()];
            let a = sample_trajectory(
                &pretrained.params,
                spec,
                &sched,
                &grid,
                c,
                &mut task_rng(seed, &[0, p as u64, 0]),
            )?;
            let b = sample_trajectory(
                &pretrained.params,
                spec,
                &sched,
                &grid,
                c,
                &mut task_rng(seed, &[0, p as u64, 1]),
            )?;
            let terminal = model.value(c, a.final_state())? >= model.value(c, b.final_state())?;
            steps
                .iter()
                .map(|&k| {
                    let i = k_max - k;
                    let oa = mc_oracle(
                        den,
                        &grid,
                        &model,
                        c,
                        &a.states[i],
                        k,
                        n_rollouts,
                        derive_seed(seed, &[1, p as u64, k as u64, 0]),
                    )?;
                    let ob = mc_oracle(
                        den,
                        &grid,
                        &model,
                        c,
                        &b.states[i],
                        k,
                        n_rollouts,
                        derive_seed(seed, &[1, p as u64, k as u64, 1]),
                    )?;
                    Ok((oa.oracle >= ob.oracle) != terminal)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(steps
        .iter()
        .enumerate()
        .map(|(j, &k)| {
            let conflicts = flags.iter().filter(|f| f[j]).count();
            ConflictRow {
                step: k,
                t: grid.timestep(k),
                pairs: n_pairs,
                conflicts,
                fraction: if n_pairs == 0 {
                    0.0
                } else {
                    conflicts as f64 / n_pairs as f64
                },
                ddim_eta,
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    /// Number of fine-tuned steps: 3, 5 and 10.
    Steps,
    /// Guidance strength: fixed 0.1, 0.2, 0.5 and the configured cosine range.
    Eta,
}

/// Labelled configurations of one ablation axis, derived from `base`. The
/// guidance axis always runs the guided method.
pub fn ablation_cells(base: &RunConfig, axis: AblationAxis) -> Vec<(String, RunConfig)> {
    match axis {
        AblationAxis::Steps => [3, 5, 10]
            .into_iter()
            .map(|n| {
                let mut cfg = base.clone();
                cfg.fine_tune_steps = uniform_fine_tune_steps(cfg.inference_steps, n);
                (format!("steps={n}"), cfg)
            })
            .collect(),
        AblationAxis::Eta => {
            let mut cells: Vec<(String, RunConfig)> = [0.1, 0.2, 0.5]
                .into_iter()
                .map(|eta| {
                    let mut cfg = base.clone();
                    cfg.method = Method::TailorpoG;
                    cfg.guidance = GuidanceConfig::fixed(eta, base.guidance.delta);
                    (format!("eta={eta}"), cfg)
                })
                .collect();
            let mut cfg = base.clone();
            cfg.method = Method::TailorpoG;
            cells.push((
                format!(
                    "eta=cosine[{},{}]",
                    cfg.guidance.eta_min, cfg.guidance.eta_max
                ),
                cfg,
            ));
            cells
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub cell: String,
    pub seed: u64,
    pub mean_reward: f64,
    pub stderr: f64,
    pub pretrained_digest: String,
    pub finetuned_digest: String,
    pub completed: bool,
}

/// Fine-tunes every cell under every seed from the same pretrained
/// checkpoint and evaluates each result on the shared evaluation noise.
pub fn ablation_sweep(
    pretrained: &Checkpoint,
    cells: &[(String, RunConfig)],
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    let pretrained_digest = params_digest(&pretrained.params);
    let mut rows = Vec::new();
    for (label, cell) in cells {
        for &seed in seeds {
            let cfg = RunConfig {
                seed,
                ..cell.clone()
            };
            let out = finetune(&cfg, pretrained)?;
            let report = final_evaluation(&cfg, &out.checkpoint.params, &cfg.conditions)?;
            rows.push(AblationRow {
                cell: label.clone(),
                seed,
                mean_reward: report.pooled.mean,
                stderr: report.pooled.stderr,
                pretrained_digest: pretrained_digest.clone(),
                finetuned_digest: params_digest(&out.checkpoint.params),
                completed: out.status == RunStatus::Completed,
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GeneralizationRow {
    pub seed: u64,
    /// "train" or "held-out".
    pub split: &'static str,
    pub condition: usize,
    pub finetuned: f64,
    pub finetuned_stderr: f64,
    pub baseline: f64,
    pub baseline_stderr: f64,
}

/// Fine-tunes on `train` only and reports per-condition reward of the
/// fine-tuned and pretrained models on both the training and held-out
/// conditions.
pub fn generalization_study(
    pretrained: &Checkpoint,
    base: &RunConfig,
    train: &[usize],
    held_out: &[usize],
    seeds: &[u64],
) -> Result<Vec<GeneralizationRow>> {
    if let Some(c) = held_out.iter().find(|c| train.contains(c)) {
        return Err(Error::Config(format!(
            "condition {c} is both trained on and held out"
        )));
    }
    let mut cfg = RunConfig {
        conditions: train.to_vec(),
        ..base.clone()
    };
    cfg.validate()?;
    let baseline = [
        ("train", final_evaluation(&cfg, &pretrained.params, train)?),
        (
            "held-out",
            final_evaluation(&cfg, &pretrained.params, held_out)?,
        ),
    ];
    let mut rows = Vec::new();
    for &seed in seeds {
        cfg.seed = seed;
        let out = finetune(&cfg, pretrained)?;
        for (split, base_report) in &baseline {
            let conditions = if *split == "train" { train } else { held_out };
            let report = final_evaluation(&cfg, &out.checkpoint.params, conditions)?;
            for (f, b) in report.per_condition.iter().zip(&base_report.per_condition) {
                rows.push(GeneralizationRow {
                    seed,
                    split,
                    condition: f.condition,
                    finetuned: f.mean,
                    finetuned_stderr: f.stderr,
                    baseline: b.mean,
                    baseline_stderr: b.stderr,
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_rows<T: Serialize, W: std::io::Write>(rows: &[T], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
