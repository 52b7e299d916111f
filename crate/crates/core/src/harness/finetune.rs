use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{Method, RunConfig};
use super::eval::{energy_distance, evaluate, sample_finals};
use super::metrics::{MetricLog, MetricRecord};
use crate::diffusion::{
    ddim_step, sample_trajectory, standard_normal, InferenceGrid, NoiseSchedule, Trajectory,
};
use crate::error::{Error, Result};
use crate::guidance::{eta_schedule, guided_winner};
use crate::nnet::{params_digest, predict_noise, Checkpoint, NetworkSpec, ParameterSet};
use crate::prefopt::{
    batch_gradient, clip_grad_norm, log_prob_grad, rank_by_reward, sgd_update, PairLoss,
    PolicyPair, PreferencePair, TieBreak,
};
use crate::reward::{stepwise_reward, Denoiser, Reward, RewardKind, RewardModel};
use crate::rng::{derive_seed, task_rng};

const STREAM_TRAIN: u64 = 1;
const STREAM_EVAL: u64 = 2;

/// One pair formed during a run, with the state the trajectory continued
/// from afterwards (None for trajectory-level pairs, which are formed after
/// sampling).
#[derive(Clone, Debug, PartialEq)]
pub struct TraceEntry {
    pub trajectory: usize,
    pub step: usize,
    pub pair: PreferencePair,
    pub next_state: Option<Vec<f64>>,
    pub guided: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum RunStatus {
    Completed,
    /// Training stopped on a non-finite update; the checkpoint holds the
    /// last finite parameters.
    Aborted(String),
}

#[derive(Clone, Debug)]
pub struct FinetuneOutput {
    pub checkpoint: Checkpoint,
    pub log: MetricLog,
    pub trace: Vec<TraceEntry>,
    /// Pairs (transition samples for policy gradient) consumed.
    pub samples: usize,
    pub updates: usize,
    pub status: RunStatus,
}

/// Everything a run derives from its config once.
pub(crate) struct Setup {
    pub spec: NetworkSpec,
    pub sched: NoiseSchedule,
    pub grid: InferenceGrid,
    pub model: RewardModel,
    pub steps: Vec<usize>,
}

impl Setup {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            spec: cfg.network.clone(),
            sched: cfg.sched()?,
            grid: cfg.grid()?,
            model: cfg.reward_model()?,
            steps: cfg.fine_tune_descending(),
        })
    }
}

/// Seed of the logged evaluations; every row of every run shares it.
pub fn eval_seed(cfg: &RunConfig) -> u64 {
    derive_seed(cfg.eval.seed, &[STREAM_EVAL])
}

/// Final evaluation with `eval.final_samples` draws per condition of the
/// configured condition set.
pub fn final_evaluation(
    cfg: &RunConfig,
    params: &ParameterSet,
    conditions: &[usize],
) -> Result<super::EvaluationReport> {
    let setup = Setup::new(cfg)?;
    evaluate(
        params,
        None,
        &setup.spec,
        &setup.sched,
        &setup.grid,
        &setup.model,
        conditions,
        cfg.eval.final_samples,
        0,
        cfg.eval.seed,
    )
}

struct Logger<'a> {
    cfg: &'a RunConfig,
    setup: &'a Setup,
    reference: ParameterSet,
    reference_finals: Vec<Vec<Vec<f64>>>,
    log: MetricLog,
    next_at: usize,
    step_sums: Vec<(f64, usize)>,
    loss_sum: f64,
    loss_count: usize,
    started: Instant,
}

impl<'a> Logger<'a> {
    fn new(cfg: &'a RunConfig, setup: &'a Setup, reference: &ParameterSet) -> Result<Self> {
        let seed = derive_seed(eval_seed(cfg), &[1]);
        let reference_finals = cfg
            .conditions
            .iter()
            .map(|&c| {
                sample_finals(
                    reference,
                    &setup.spec,
                    &setup.sched,
                    &setup.grid,
                    c,
                    cfg.eval.drift_samples,
                    seed,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg,
            setup,
            reference: reference.clone(),
            reference_finals,
            log: MetricLog::new(),
            next_at: 0,
            step_sums: vec![(0.0, 0); setup.steps.len()],
            loss_sum: 0.0,
            loss_count: 0,
            started: Instant::now(),
        })
    }

    fn observe(&mut self, step: usize, loss: f64, f: Option<f64>, n: usize) {
        if let (Some(i), Some(f)) = (self.setup.steps.iter().position(|&k| k == step), f) {
            self.step_sums[i].0 += f * n as f64;
            self.step_sums[i].1 += n;
        }
        self.loss_sum += loss * n as f64;
        self.loss_count += n;
    }

    fn drift(&self, params: &ParameterSet) -> Result<f64> {
        if self.cfg.eval.drift_samples == 0 {
            return Ok(0.0);
        }
        let seed = derive_seed(eval_seed(self.cfg), &[1]);
        let mut total = 0.0;
        for (&c, ref_x) in self.cfg.conditions.iter().zip(&self.reference_finals) {
            let s = &self.setup;
            let x = sample_finals(
                params,
                &s.spec,
                &s.sched,
                &s.grid,
                c,
                self.cfg.eval.drift_samples,
                seed,
            )?;
            total += energy_distance(&x, ref_x);
        }
        Ok(total / self.cfg.conditions.len() as f64)
    }

    fn record(&mut self, iteration: usize, params: &ParameterSet) -> Result<()> {
        let s = self.setup;
        let report = evaluate(
            params,
            None,
            &s.spec,
            &s.sched,
            &s.grid,
            &s.model,
            &self.cfg.conditions,
            self.cfg.eval.samples.div_ceil(self.cfg.conditions.len()),
            0,
            eval_seed(self.cfg),
        )?;
        let drift = self.drift(params)?;
        let step_f = s
            .steps
            .iter()
            .zip(&self.step_sums)
            .map(|(&k, &(sum, n))| (k, if n == 0 { f64::NAN } else { sum / n as f64 }))
            .collect();
        let loss = if self.loss_count == 0 {
            0.0
        } else {
            self.loss_sum / self.loss_count as f64
        };
        self.log.push(MetricRecord {
            iteration,
            mean_reward: if report.pooled.n == 0 {
                0.0
            } else {
                report.pooled.mean
            },
            reward_stderr: if report.pooled.n < 2 {
                0.0
            } else {
                report.pooled.stderr
            },
            step_f,
            loss,
            drift,
            wall_clock: self.started.elapsed(),
        })?;
        self.step_sums.iter_mut().for_each(|s| *s = (0.0, 0));
        self.loss_sum = 0.0;
        self.loss_count = 0;
        self.next_at = iteration + self.cfg.eval.every;
        Ok(())
    }

    fn maybe_record(&mut self, iteration: usize, params: &ParameterSet) -> Result<()> {
        if iteration >= self.next_at {
            self.record(iteration, params)?;
        }
        Ok(())
    }

    fn finish(mut self, iteration: usize, params: &ParameterSet) -> Result<MetricLog> {
        if self.log.last().is_none_or(|r| r.iteration < iteration) {
            self.record(iteration, params)?;
        }
        let _ = &self.reference;
        Ok(self.log)
    }
}

fn diverged(e: &Error) -> bool {
    matches!(e, Error::NonFinite(_) | Error::Divergence { .. })
}

/// Mutable state of one run, with the rollback point for divergence.
struct Run {
    pp: PolicyPair,
    /// Parameters before the latest update.
    prev: Option<ParameterSet>,
    samples: usize,
    updates: usize,
    status: RunStatus,
}

impl Run {
    fn new(cfg: &RunConfig, pretrained: &Checkpoint) -> Result<Self> {
        check_pretrained(cfg, pretrained)?;
        Ok(Self {
            pp: PolicyPair::from_reference(cfg.network.clone(), pretrained.params.clone())?,
            prev: None,
            samples: 0,
            updates: 0,
            status: RunStatus::Completed,
        })
    }

    /// Passes values through; a non-finite failure computed with the
    /// current parameters rolls back the latest update and ends the run.
    fn guard<T>(&mut self, r: Result<T>) -> Result<Option<T>> {
        match r {
            Ok(v) => Ok(Some(v)),
            Err(e) if diverged(&e) => {
                if let Some(p) = self.prev.take() {
                    self.pp.set_current(p)?;
                    self.updates -= 1;
                }
                self.status = RunStatus::Aborted(e.to_string());
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    /// Averages, clips and applies one batch gradient. Returns false (and
    /// ends the run) if the step would leave finite parameters.
    fn update(&mut self, mut grad: Vec<f64>, n: usize, cfg: &RunConfig) -> Result<bool> {
        let inv = 1.0 / n as f64;
        grad.iter_mut().for_each(|g| *g *= inv);
        if let Some(max) = cfg.prefopt.grad_clip {
            clip_grad_norm(&mut grad, max);
        }
        let next = sgd_update(self.pp.current(), &grad, cfg.prefopt.learning_rate);
        let Some(next) = self.guard(next)? else {
            return Ok(false);
        };
        self.prev = Some(self.pp.current().clone());
        self.pp.set_current(next)?;
        self.updates += 1;
        Ok(true)
    }

    fn record(&mut self, logger: &mut Logger<'_>) -> Result<bool> {
        let r = logger.maybe_record(self.samples, self.pp.current());
        Ok(self.guard(r)?.is_some())
    }

    fn finish(
        self,
        cfg: &RunConfig,
        pretrained: &Checkpoint,
        logger: Logger<'_>,
        trace: Vec<TraceEntry>,
    ) -> Result<FinetuneOutput> {
        let log = logger.finish(self.samples, self.pp.current())?;
        let pp = &self.pp;
        if !pp.reference_intact() {
            return Err(Error::Contract(
                "reference parameters changed during fine-tuning".into(),
            ));
        }
        let checkpoint = Checkpoint::new(pp.spec().clone(), pp.current().clone())
            .with_meta("method", cfg.method.name())
            .with_meta("seed", cfg.seed)
            .with_meta("samples", self.samples)
            .with_meta("updates", self.updates)
            .with_meta("reference_digest", pp.reference_digest())
            .with_meta("pretrained_digest", params_digest(&pretrained.params));
        Ok(FinetuneOutput {
            checkpoint,
            log,
            trace,
            samples: self.samples,
            updates: self.updates,
            status: self.status,
        })
    }
}

fn check_pretrained(cfg: &RunConfig, pretrained: &Checkpoint) -> Result<()> {
    if pretrained.spec != cfg.network {
        return Err(Error::Config(
            "pretrained checkpoint was built for a different network".into(),
        ));
    }
    Ok(())
}

fn pick_condition(cfg: &RunConfig, rng: &mut ChaCha8Rng) -> usize {
    cfg.conditions[rng.gen_range(0..cfg.conditions.len())]
}

/// Dispatches on `cfg.method`.
pub fn finetune(cfg: &RunConfig, pretrained: &Checkpoint) -> Result<FinetuneOutput> {
    match cfg.method {
        Method::Tailorpo | Method::TailorpoG => finetune_tailorpo(cfg, pretrained),
        Method::D3po => finetune_d3po(cfg, pretrained),
        Method::PolicyGradient => finetune_policy_gradient(cfg, pretrained),
    }
}

struct Walker {
    id: usize,
    c: usize,
    x: Vec<f64>,
    rng: ChaCha8Rng,
}

struct StepOutcome {
    pair: PreferencePair,
    guided: bool,
}

/// Step-level preference fine-tuning: at each fine-tuned step two
/// candidates share the parent, are ranked by step-wise reward, optionally
/// guided, and the trajectory continues from the winner.
pub fn finetune_tailorpo(cfg: &RunConfig, pretrained: &Checkpoint) -> Result<FinetuneOutput> {
    let mut run = Run::new(cfg, pretrained)?;
    let setup = Setup::new(cfg)?;
    let mut logger = Logger::new(cfg, &setup, run.pp.reference())?;
    let guided = cfg.method == Method::TailorpoG
        && cfg.guidance.enabled
        && setup.model.kind != RewardKind::Blackbox;
    let per_traj = setup.steps.len();
    let mut trace = Vec::new();
    let mut next_id = 0usize;
    let k_max = setup.grid.len();
    logger.record(0, run.pp.current())?;

    'outer: while per_traj > 0 && run.samples < cfg.sample_budget {
        let remaining_traj = (cfg.sample_budget - run.samples).div_ceil(per_traj);
        let b = cfg.prefopt.batch_size.min(remaining_traj);
        let mut walkers: Vec<Walker> = (next_id..next_id + b)
            .map(|id| {
                let mut rng = task_rng(cfg.seed, &[STREAM_TRAIN, id as u64]);
                let c = pick_condition(cfg, &mut rng);
                let x = standard_normal(&mut rng, setup.spec.input_dim);
                Walker { id, c, x, rng }
            })
            .collect();
        next_id += b;
        for k in (1..=k_max).rev() {
            let (t, tp) = (setup.grid.timestep(k), setup.grid.timestep(k - 1));
            let params = run.pp.current().clone();
            let den = Denoiser::new(&params, &setup.spec, &setup.sched);
            if !setup.steps.contains(&k) {
                let stepped = walkers.par_iter_mut().try_for_each(|w| -> Result<()> {
                    let eps = predict_noise(&params, &setup.spec, &w.x, t, w.c)?;
                    let z = standard_normal(&mut w.rng, setup.spec.input_dim);
                    w.x = ddim_step(&w.x, t, tp, &eps, &z, &setup.sched)?.0;
                    Ok(())
                });
                if run.guard(stepped)?.is_none() {
                    break 'outer;
                }
                continue;
            }
            let eta = eta_schedule(&cfg.guidance, k, &setup.steps)?;
            let outcomes = walkers
                .par_iter_mut()
                .map(|w| -> Result<StepOutcome> {
                    let eps = predict_noise(&params, &setup.spec, &w.x, t, w.c)?;
                    let z0 = standard_normal(&mut w.rng, setup.spec.input_dim);
                    let z1 = standard_normal(&mut w.rng, setup.spec.input_dim);
                    let (a, dist) = ddim_step(&w.x, t, tp, &eps, &z0, &setup.sched)?;
                    let (b, _) = ddim_step(&w.x, t, tp, &eps, &z1, &setup.sched)?;
                    let ra = stepwise_reward(den, &setup.model, w.c, &a, tp)?;
                    let rb = stepwise_reward(den, &setup.model, w.c, &b, tp)?;
                    let ranked = rank_by_reward(&a, ra, &b, rb, cfg.prefopt.tie_break);
                    let (winner, reward_w, accepted) = if guided {
                        let g = guided_winner(
                            den,
                            &setup.model,
                            w.c,
                            &ranked.winner,
                            tp,
                            eta,
                            cfg.guidance.delta,
                        )?;
                        (g.state, g.reward_after, g.accepted)
                    } else {
                        (ranked.winner, ranked.reward_w, false)
                    };
                    let pair = PreferencePair {
                        condition: w.c,
                        t,
                        t_prev: tp,
                        parent_w: w.x.clone(),
                        parent_l: w.x.clone(),
                        winner: winner.clone(),
                        loser: ranked.loser,
                        reward_w,
                        reward_l: ranked.reward_l,
                        sigma_t: dist.scale,
                    };
                    w.x = winner;
                    Ok(StepOutcome {
                        pair,
                        guided: accepted,
                    })
                })
                .collect::<Result<Vec<_>>>();
            let Some(outcomes) = run.guard(outcomes)? else {
                break 'outer;
            };
            let pairs: Vec<PreferencePair> = outcomes.iter().map(|o| o.pair.clone()).collect();
            let bg = batch_gradient(&run.pp, &pairs, &setup.sched, &cfg.prefopt, PairLoss::Step);
            let Some(bg) = run.guard(bg)? else {
                break 'outer;
            };
            if !run.update(bg.grad, pairs.len(), cfg)? {
                break 'outer;
            }
            run.samples += pairs.len();
            logger.observe(k, bg.mean_loss, Some(bg.mean_f), pairs.len());
            for (o, w) in outcomes.into_iter().zip(&walkers) {
                trace.push(TraceEntry {
                    trajectory: w.id,
                    step: k,
                    next_state: Some(w.x.clone()),
                    pair: o.pair,
                    guided: o.guided,
                });
            }
            if !run.record(&mut logger)? {
                break 'outer;
            }
        }
    }
    run.finish(cfg, pretrained, logger, trace)
}

/// Pairs at each fine-tuned step between two full trajectories, ordered by
/// terminal reward; each side keeps its own parent.
pub fn d3po_pairs(
    a: &Trajectory,
    reward_a: f64,
    b: &Trajectory,
    reward_b: f64,
    steps: &[usize],
    grid: &InferenceGrid,
    tie: TieBreak,
) -> Result<Vec<PreferencePair>> {
    let k_max = grid.len();
    if a.states.len() != k_max + 1 || b.states.len() != k_max + 1 {
        return Err(Error::Contract(
            "trajectory-level pairs need full trajectories".into(),
        ));
    }
    let a_wins = match tie {
        TieBreak::FirstWins => reward_a >= reward_b,
        TieBreak::SecondWins => reward_a > reward_b,
    };
    let (w, rw, l, rl) = if a_wins {
        (a, reward_a, b, reward_b)
    } else {
        (b, reward_b, a, reward_a)
    };
    Ok(steps
        .iter()
        .map(|&k| {
            let i = k_max - k;
            PreferencePair {
                condition: w.condition,
                t: grid.timestep(k),
                t_prev: grid.timestep(k - 1),
                parent_w: w.states[i].clone(),
                parent_l: l.states[i].clone(),
                winner: w.states[i + 1].clone(),
                loser: l.states[i + 1].clone(),
                reward_w: rw,
                reward_l: rl,
                sigma_t: w.sigmas[i],
            }
        })
        .collect())
}

/// Trajectory-level preference fine-tuning: two full trajectories per
/// condition, ranked by terminal reward, one pair per fine-tuned step.
pub fn finetune_d3po(cfg: &RunConfig, pretrained: &Checkpoint) -> Result<FinetuneOutput> {
    let mut run = Run::new(cfg, pretrained)?;
    let setup = Setup::new(cfg)?;
    let mut logger = Logger::new(cfg, &setup, run.pp.reference())?;
    let per_group = setup.steps.len();
    let mut trace = Vec::new();
    let mut next_id = 0usize;
    logger.record(0, run.pp.current())?;

    'outer: while per_group > 0 && run.samples < cfg.sample_budget {
        let remaining = (cfg.sample_budget - run.samples).div_ceil(per_group);
        let b = cfg.prefopt.batch_size.min(remaining);
        let params = run.pp.current().clone();
        let groups = (next_id..next_id + b)
            .into_par_iter()
            .map(|id| {
                let mut rng = task_rng(cfg.seed, &[STREAM_TRAIN, id as u64]);
                let c = pick_condition(cfg, &mut rng);
                let ta = sample_trajectory(
                    &params,
                    &setup.spec,
                    &setup.sched,
                    &setup.grid,
                    c,
                    &mut rng,
                )?;
                let tb = sample_trajectory(
                    &params,
                    &setup.spec,
                    &setup.sched,
                    &setup.grid,
                    c,
                    &mut rng,
                )?;
                let ra = setup.model.value(c, ta.final_state())?;
                let rb = setup.model.value(c, tb.final_state())?;
                d3po_pairs(
                    &ta,
                    ra,
                    &tb,
                    rb,
                    &setup.steps,
                    &setup.grid,
                    cfg.prefopt.tie_break,
                )
            })
            .collect::<Result<Vec<_>>>();
        let Some(groups) = run.guard(groups)? else {
            break 'outer;
        };
        for (j, &k) in setup.steps.iter().enumerate() {
            let pairs: Vec<PreferencePair> = groups.iter().map(|g| g[j].clone()).collect();
            let bg = batch_gradient(
                &run.pp,
                &pairs,
                &setup.sched,
                &cfg.prefopt,
                PairLoss::Trajectory,
            );
            let Some(bg) = run.guard(bg)? else {
                break 'outer;
            };
            if !run.update(bg.grad, pairs.len(), cfg)? {
                break 'outer;
            }
            run.samples += pairs.len();
            logger.observe(k, bg.mean_loss, Some(bg.mean_f), pairs.len());
            for (i, pair) in pairs.into_iter().enumerate() {
                trace.push(TraceEntry {
                    trajectory: next_id + i,
                    step: k,
                    pair,
                    next_state: None,
                    guided: false,
                });
            }
            if !run.record(&mut logger)? {
                break 'outer;
            }
        }
        next_id += b;
    }
    run.finish(cfg, pretrained, logger, trace)
}

/// REINFORCE on the fine-tuned transitions, weighted by terminal reward
/// minus a running-mean baseline.
pub fn finetune_policy_gradient(
    cfg: &RunConfig,
    pretrained: &Checkpoint,
) -> Result<FinetuneOutput> {
    finetune_policy_gradient_with(cfg, pretrained, &cfg.reward_model()?)
}

/// As [`finetune_policy_gradient`], training against `reward` instead of the
/// configured model (logged evaluations still use the configured one).
pub fn finetune_policy_gradient_with(
    cfg: &RunConfig,
    pretrained: &Checkpoint,
    reward: &dyn Reward,
) -> Result<FinetuneOutput> {
    let mut run = Run::new(cfg, pretrained)?;
    let setup = Setup::new(cfg)?;
    let mut logger = Logger::new(cfg, &setup, run.pp.reference())?;
    let per_traj = setup.steps.len();
    let k_max = setup.grid.len();
    let mut next_id = 0usize;
    let mut baseline: Option<f64> = None;
    let decay = cfg.policy_gradient.baseline_decay;
    logger.record(0, run.pp.current())?;

    'outer: while per_traj > 0 && run.samples < cfg.sample_budget {
        let remaining = (cfg.sample_budget - run.samples).div_ceil(per_traj);
        let b = cfg.prefopt.batch_size.min(remaining);
        let params = run.pp.current().clone();
        let trajs = (next_id..next_id + b)
            .into_par_iter()
            .map(|id| {
                let mut rng = task_rng(cfg.seed, &[STREAM_TRAIN, id as u64]);
                let c = pick_condition(cfg, &mut rng);
                let tr = sample_trajectory(
                    &params,
                    &setup.spec,
                    &setup.sched,
                    &setup.grid,
                    c,
                    &mut rng,
                )?;
                let r = reward.value(c, tr.final_state())?;
                Ok((tr, r))
            })
            .collect::<Result<Vec<(Trajectory, f64)>>>();
        let Some(trajs) = run.guard(trajs)? else {
            break 'outer;
        };
        next_id += b;
        let batch_mean = trajs.iter().map(|(_, r)| r).sum::<f64>() / b as f64;
        let base = *baseline.get_or_insert(batch_mean);
        let advantages: Vec<f64> = trajs.iter().map(|(_, r)| r - base).collect();
        baseline = Some(decay * base + (1.0 - decay) * batch_mean);
        for &k in &setup.steps {
            let i = k_max - k;
            let (t, tp) = (setup.grid.timestep(k), setup.grid.timestep(k - 1));
            let cur = run.pp.current().clone();
            let grads = trajs
                .par_iter()
                .zip(&advantages)
                .map(|((tr, _), &adv)| {
                    if adv == 0.0 {
                        return Ok(vec![0.0; cur.len()]);
                    }
                    let g = log_prob_grad(
                        &cur,
                        &setup.spec,
                        &setup.sched,
                        tr.condition,
                        t,
                        tp,
                        &tr.states[i],
                        &tr.states[i + 1],
                    )?;
                    Ok(g.into_iter().map(|v| -adv * v).collect())
                })
                .collect::<Result<Vec<Vec<f64>>>>();
            let Some(grads) = run.guard(grads)? else {
                break 'outer;
            };
            let refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            let grad = crate::prefopt::pairwise_sum(&refs);
            let loss = -advantages.iter().sum::<f64>() / b as f64;
            if !run.update(grad, b, cfg)? {
                break 'outer;
            }
            run.samples += b;
            logger.observe(k, loss, None, b);
            if !run.record(&mut logger)? {
                break 'outer;
            }
        }
    }
    run.finish(cfg, pretrained, logger, Vec::new())
}
