use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use tailorpo_core::guidance::{efficacy_study, write_efficacy_rows, Direction};
use tailorpo_core::harness::{
    ablation_cells, ablation_sweep, drift_metric, evaluate, finetune, generalization_study,
    inconsistency_study, pretrain_checkpoint, studies, AblationAxis, Method, RunConfig, RunStatus,
};
use tailorpo_core::nnet::Checkpoint;
use tailorpo_core::prefopt::gradcheck;
use tailorpo_core::reward::{
    jensen_gap_study, median_rel_err_by_step, write_jensen_rows, Denoiser,
};

#[derive(Parser)]
#[command(
    name = "tailorpo",
    version,
    about = "Step-level preference optimisation on a toy conditional diffusion model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults apply to every omitted field.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured method (tailorpo, tailorpo-g, d3po, policy-gradient).
    #[arg(long)]
    method: Option<String>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = &self.method {
            cfg.method = m.parse::<Method>()?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print the default configuration as TOML.
    Config,
    /// Train the base denoiser on the Gaussian mixture; --seed sets the pretraining seed.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune the pretrained checkpoint with the configured method.
    Finetune {
        #[command(flatten)]
        common: Common,
    },
    /// Per-condition and pooled reward of a checkpoint, with drift from the pretrained model.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Defaults to the fine-tuned checkpoint of the configured method and seed.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Samples per condition; defaults to eval.final_samples.
        #[arg(long)]
        samples: Option<usize>,
        /// Samples per condition for the drift statistic.
        #[arg(long, default_value_t = 1000)]
        drift_samples: usize,
    },
    /// Diagnostic studies.
    Study {
        #[command(flatten)]
        common: Common,
        #[command(subcommand)]
        study: Study,
    },
    /// Check the closed-form gradients against finite differences and the tape.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
}

#[derive(Copy, Clone, ValueEnum)]
enum Axis {
    Steps,
    Eta,
}

#[derive(Subcommand)]
enum Study {
    /// Step-level vs terminal preference conflicts.
    Inconsistency {
        #[arg(long, default_value_t = 200)]
        pairs: usize,
        #[arg(long, default_value_t = 100)]
        rollouts: usize,
        /// Sampler stochasticity; defaults to the configured schedule's.
        #[arg(long)]
        ddim_eta: Option<f64>,
    },
    /// How often one guidance step moves the step-wise reward as intended.
    Efficacy {
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 0.2)]
        eta: f64,
        #[arg(long, default_value_t = 0.5)]
        delta: f64,
    },
    /// Error of the one-shot step-wise reward against rollouts.
    JensenGap {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        condition: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [12, 8, 4, 1])]
        steps: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        states: usize,
        #[arg(long, default_value_t = 100)]
        rollouts: usize,
    },
    /// Final reward across fine-tuned step counts or guidance strengths.
    Ablation {
        #[arg(long, value_enum)]
        axis: Axis,
        /// Seeds run: seed, seed+1, ...
        #[arg(long, default_value_t = 3)]
        replicates: u64,
    },
    /// Fine-tune on some conditions, evaluate on held-out ones.
    Generalization {
        #[arg(long, value_delimiter = ',', default_values_t = [0, 1, 2, 3, 4, 5])]
        train: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [6, 7])]
        held_out: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        replicates: u64,
    },
}

fn create(path: &Path) -> Result<File> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    File::create(path).with_context(|| format!("creating {}", path.display()))
}

fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    ckpt.save(path)
        .with_context(|| format!("writing {}", path.display()))
}

fn load_pretrained(cfg: &RunConfig) -> Result<Checkpoint> {
    let path = cfg.pretrained_path();
    if !path.exists() {
        bail!(
            "no pretrained checkpoint at {}; run `tailorpo pretrain` first",
            path.display()
        );
    }
    Ok(Checkpoint::load(&path)?)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Config => print!("{}", RunConfig::default().to_toml()?),
        Command::Pretrain { common } => {
            let mut cfg = common.load()?;
            if let Some(s) = common.seed {
                cfg.pretrain.seed = s;
            }
            let (ckpt, curve) = pretrain_checkpoint(&cfg)?;
            let path = cfg.pretrained_path();
            save_checkpoint(&ckpt, &path)?;
            let mut w = csv::Writer::from_writer(create(&cfg.metrics_path("pretrain-loss"))?);
            w.write_record(["step", "loss"])?;
            for (i, l) in curve.iter().enumerate() {
                w.write_record([
                    ((i + 1) * cfg.pretrain.log_every).to_string(),
                    format!("{l:?}"),
                ])?;
            }
            w.flush()?;
            println!(
                "pretrained {} steps, final loss {:.5}",
                cfg.pretrain.steps,
                curve.last().copied().unwrap_or(f64::NAN)
            );
            println!("checkpoint {}", path.display());
        }
        Command::Finetune { common } => {
            let cfg = common.load()?;
            let pretrained = load_pretrained(&cfg)?;
            let out = finetune(&cfg, &pretrained)?;
            let stem = format!("{}-seed{}", cfg.method.name(), cfg.seed);
            out.log.write_csv(create(&cfg.metrics_path(&stem))?)?;
            save_checkpoint(&out.checkpoint, &cfg.finetuned_path())?;
            println!(
                "{} seed {}: {} samples, {} updates",
                cfg.method.name(),
                cfg.seed,
                out.samples,
                out.updates
            );
            if let (Some(first), Some(last)) = (out.log.records().first(), out.log.last()) {
                println!(
                    "reward {:.4} -> {:.4} (± {:.4}), drift {:.4}",
                    first.mean_reward, last.mean_reward, last.reward_stderr, last.drift
                );
            }
            if let RunStatus::Aborted(why) = &out.status {
                println!("aborted: {why}; saved the last finite parameters");
            }
            println!("checkpoint {}", cfg.finetuned_path().display());
        }
        Command::Evaluate {
            common,
            checkpoint,
            samples,
            drift_samples,
        } => {
            let cfg = common.load()?;
            let path = checkpoint.unwrap_or_else(|| cfg.finetuned_path());
            let ckpt =
                Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
            let pretrained = load_pretrained(&cfg)?;
            let n = samples.unwrap_or(cfg.eval.final_samples);
            let (sched, grid, model) = (cfg.sched()?, cfg.grid()?, cfg.reward_model()?);
            let report = evaluate(
                &ckpt.params,
                None,
                &ckpt.spec,
                &sched,
                &grid,
                &model,
                &cfg.conditions,
                n,
                0,
                cfg.eval.seed,
            )?;
            let drift = drift_metric(
                &ckpt.params,
                &pretrained.params,
                &ckpt.spec,
                &sched,
                &grid,
                &cfg.conditions,
                drift_samples,
                cfg.eval.seed,
            )?;
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let mut w =
                csv::Writer::from_writer(create(&cfg.metrics_path(&format!("evaluate-{stem}")))?);
            w.write_record(["condition", "n", "mean", "stderr"])?;
            for s in &report.per_condition {
                w.write_record([
                    s.condition.to_string(),
                    s.n.to_string(),
                    format!("{:?}", s.mean),
                    format!("{:?}", s.stderr),
                ])?;
            }
            let p = &report.pooled;
            w.write_record([
                "pooled".into(),
                p.n.to_string(),
                format!("{:?}", p.mean),
                format!("{:?}", p.stderr),
            ])?;
            w.write_record([
                "drift".into(),
                drift_samples.to_string(),
                format!("{drift:?}"),
                String::new(),
            ])?;
            w.flush()?;
            for s in &report.per_condition {
                println!("condition {}: {:.4} ± {:.4}", s.condition, s.mean, s.stderr);
            }
            println!(
                "pooled: {:.4} ± {:.4} over {} samples; drift {:.4}",
                p.mean, p.stderr, p.n, drift
            );
        }
        Command::Study { common, study } => {
            let cfg = common.load()?;
            run_study(&cfg, study)?;
        }
        Command::Gradcheck { common, instances } => {
            let cfg = common.load()?;
            let rows = gradcheck::run_suite(instances, cfg.seed)?;
            gradcheck::write_rows(&rows, create(&cfg.metrics_path("gradcheck"))?)?;
            let mut failed = 0;
            for id in gradcheck::Identity::ALL {
                let mine: Vec<_> = rows.iter().filter(|r| r.identity == id).collect();
                let worst_fd = mine.iter().map(|r| r.rel_err_fd).fold(0.0, f64::max);
                let worst_tape = mine.iter().map(|r| r.rel_err_tape).fold(0.0, f64::max);
                let bad = mine.iter().filter(|r| !r.passed()).count();
                failed += bad;
                println!("{id:?}: {} instances, max rel err fd {worst_fd:.2e}, tape {worst_tape:.2e}, {bad} failed", mine.len());
            }
            if failed > 0 {
                println!(
                    "FAILED: {failed} checks above tolerance {:e}",
                    gradcheck::TOLERANCE
                );
                return Ok(ExitCode::FAILURE);
            }
            println!("all checks passed");
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn run_study(cfg: &RunConfig, study: Study) -> Result<()> {
    let pretrained = load_pretrained(cfg)?;
    let (sched, grid, model) = (cfg.sched()?, cfg.grid()?, cfg.reward_model()?);
    match study {
        Study::Inconsistency {
            pairs,
            rollouts,
            ddim_eta,
        } => {
            let eta = ddim_eta.unwrap_or(sched.ddim_eta());
            let rows = inconsistency_study(&pretrained, cfg, eta, pairs, rollouts, cfg.seed)?;
            studies::write_rows(
                &rows,
                create(&cfg.metrics_path(&format!("inconsistency-eta{eta}")))?,
            )?;
            for r in &rows {
                println!(
                    "k={:>2} (t={:>2}): {}/{} conflicts ({:.3})",
                    r.step, r.t, r.conflicts, r.pairs, r.fraction
                );
            }
        }
        Study::Efficacy {
            samples,
            eta,
            delta,
        } => {
            let den = Denoiser::new(&pretrained.params, &pretrained.spec, &sched);
            let steps = cfg.fine_tune_descending();
            let rows = efficacy_study(
                den,
                &grid,
                &model,
                &cfg.conditions,
                &steps,
                samples,
                eta,
                delta,
                cfg.seed,
            )?;
            write_efficacy_rows(&rows, create(&cfg.metrics_path("efficacy"))?)?;
            for r in &rows {
                let dir = if r.direction == Direction::Increase {
                    "increase"
                } else {
                    "decrease"
                };
                println!("k={:>2} {dir}: {:.2}", r.step, r.ratio);
            }
        }
        Study::JensenGap {
            checkpoint,
            condition,
            steps,
            states,
            rollouts,
        } => {
            let ckpt = match checkpoint {
                Some(p) => {
                    Checkpoint::load(&p).with_context(|| format!("loading {}", p.display()))?
                }
                None => pretrained,
            };
            let den = Denoiser::new(&ckpt.params, &ckpt.spec, &sched);
            let rows = jensen_gap_study(
                den, &grid, &model, condition, &steps, states, rollouts, cfg.seed,
            )?;
            write_jensen_rows(&rows, create(&cfg.metrics_path("jensen-gap"))?)?;
            for (k, e) in median_rel_err_by_step(&rows, &steps) {
                println!("k={k:>2}: median relative error {e:.3e}");
            }
        }
        Study::Ablation { axis, replicates } => {
            let axis = match axis {
                Axis::Steps => AblationAxis::Steps,
                Axis::Eta => AblationAxis::Eta,
            };
            let seeds: Vec<u64> = (cfg.seed..cfg.seed + replicates).collect();
            let rows = ablation_sweep(&pretrained, &ablation_cells(cfg, axis), &seeds)?;
            let name = if axis == AblationAxis::Steps {
                "ablation-steps"
            } else {
                "ablation-eta"
            };
            studies::write_rows(&rows, create(&cfg.metrics_path(name))?)?;
            for r in &rows {
                println!(
                    "{:<22} seed {}: {:.4} ± {:.4}",
                    r.cell, r.seed, r.mean_reward, r.stderr
                );
            }
        }
        Study::Generalization {
            train,
            held_out,
            replicates,
        } => {
            let seeds: Vec<u64> = (cfg.seed..cfg.seed + replicates).collect();
            let rows = generalization_study(&pretrained, cfg, &train, &held_out, &seeds)?;
            studies::write_rows(&rows, create(&cfg.metrics_path("generalization"))?)?;
            for r in &rows {
                println!(
                    "seed {} {:<8} c={}: {:.4} vs baseline {:.4}",
                    r.seed, r.split, r.condition, r.finetuned, r.baseline
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
