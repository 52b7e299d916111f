//! DPO-style losses on single reverse steps, their closed-form gradients,
//! preference ranking and the parameter update.
//!
//! Every step policy is the Gaussian N(μ_θ(x_t), σ² I) with
//! μ_θ = x_coef·x_t + eps_coef·ε_θ(x_t), so ∂μ/∂θ = eps_coef·∂ε/∂θ and
//! the closed forms reduce to vector-Jacobian products through the network.

mod disturbance;
pub mod gradcheck;

pub use disturbance::{disturbance_demo, DisturbanceReport};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{NoiseSchedule, StepCoefficients};
use crate::error::{Error, Result};
use crate::nnet::tape::{sigmoid, softplus};
use crate::nnet::{
    backward, forward, params_digest, predict_noise_on_tape, ForwardCache, GradientTape,
    NetworkSpec, ParameterSet, Recording, Tape, Var,
};
use crate::reward::{stepwise_reward, Denoiser, Reward};

/// The trainable policy π_θ next to its frozen reference π_ref.
#[derive(Clone, Debug)]
pub struct PolicyPair {
    spec: NetworkSpec,
    current: ParameterSet,
    reference: ParameterSet,
    reference_digest: String,
}

impl PolicyPair {
    pub fn new(spec: NetworkSpec, current: ParameterSet, reference: ParameterSet) -> Result<Self> {
        spec.validate()?;
        if !current.matches(&spec) || !reference.matches(&spec) {
            return Err(Error::Config(
                "policy parameters do not match the network".into(),
            ));
        }
        let reference_digest = params_digest(&reference);
        Ok(Self {
            spec,
            current,
            reference,
            reference_digest,
        })
    }

    /// Starts fine-tuning from the reference itself.
    pub fn from_reference(spec: NetworkSpec, reference: ParameterSet) -> Result<Self> {
        Self::new(spec, reference.clone(), reference)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn current(&self) -> &ParameterSet {
        &self.current
    }

    pub fn reference(&self) -> &ParameterSet {
        &self.reference
    }

    pub fn reference_digest(&self) -> &str {
        &self.reference_digest
    }

    /// Whether the reference still hashes to its construction-time digest.
    pub fn reference_intact(&self) -> bool {
        params_digest(&self.reference) == self.reference_digest
    }

    pub fn set_current(&mut self, params: ParameterSet) -> Result<()> {
        if !params.matches(&self.spec) {
            return Err(Error::Config(
                "replacement parameters do not match the network".into(),
            ));
        }
        self.current = params;
        Ok(())
    }

    /// Same reference, current parameters replaced by raw values.
    pub fn with_current_values(&self, values: Vec<f64>) -> Result<Self> {
        Ok(Self {
            current: self.current.with_values(values)?,
            ..self.clone()
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TieBreak {
    /// On equal rewards the first argument is the winner.
    #[default]
    FirstWins,
    SecondWins,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrefOptConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub tie_break: TieBreak,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for PrefOptConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            learning_rate: 1e-4,
            batch_size: 2,
            tie_break: TieBreak::FirstWins,
            grad_clip: Some(10.0),
        }
    }
}

impl PrefOptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "invalid learning rate {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!(
                    "gradient clip must be positive, got {c}"
                )));
            }
        }
        Ok(())
    }
}

/// One ranked transition pair at a single reverse step t → t_prev.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub condition: usize,
    pub t: usize,
    pub t_prev: usize,
    pub parent_w: Vec<f64>,
    pub parent_l: Vec<f64>,
    pub winner: Vec<f64>,
    pub loser: Vec<f64>,
    pub reward_w: f64,
    pub reward_l: f64,
    pub sigma_t: f64,
}

impl PreferencePair {
    pub fn shares_parent(&self) -> bool {
        self.parent_w.len() == self.parent_l.len()
            && self
                .parent_w
                .iter()
                .zip(&self.parent_l)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Checks the pair against the schedule and returns the step coefficients.
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<StepCoefficients> {
        let coef = sched.coefficients(self.t, self.t_prev)?;
        if !(self.sigma_t > 0.0) {
            return Err(Error::DegenerateDistribution(self.sigma_t));
        }
        if (coef.sigma - self.sigma_t).abs() > 1e-12 * coef.sigma.max(1.0) {
            return Err(Error::Contract(format!(
                "pair scale {} disagrees with schedule scale {} at step {} -> {}",
                self.sigma_t, coef.sigma, self.t, self.t_prev
            )));
        }
        if self.reward_w < self.reward_l {
            return Err(Error::Contract(format!(
                "winner reward {} below loser reward {}",
                self.reward_w, self.reward_l
            )));
        }
        let d = self.winner.len();
        if [self.loser.len(), self.parent_w.len(), self.parent_l.len()]
            .iter()
            .any(|&n| n != d)
        {
            return Err(Error::Contract(
                "pair states have mismatched dimensions".into(),
            ));
        }
        Ok(coef)
    }
}

/// A candidate pair after ranking.
#[derive(Clone, Debug, PartialEq)]
pub struct Ranked {
    pub winner: Vec<f64>,
    pub loser: Vec<f64>,
    pub reward_w: f64,
    pub reward_l: f64,
    /// True when the first argument won.
    pub first_won: bool,
}

/// Orders two candidates by already-computed rewards.
pub fn rank_by_reward(a: &[f64], reward_a: f64, b: &[f64], reward_b: f64, tie: TieBreak) -> Ranked {
    let first_won = match tie {
        TieBreak::FirstWins => reward_a >= reward_b,
        TieBreak::SecondWins => reward_a > reward_b,
    };
    if first_won {
        Ranked {
            winner: a.to_vec(),
            loser: b.to_vec(),
            reward_w: reward_a,
            reward_l: reward_b,
            first_won,
        }
    } else {
        Ranked {
            winner: b.to_vec(),
            loser: a.to_vec(),
            reward_w: reward_b,
            reward_l: reward_a,
            first_won,
        }
    }
}

/// Ranks two candidates at training step `t` by step-wise reward.
pub fn rank_pair(
    den: Denoiser<'_>,
    model: &dyn Reward,
    c: usize,
    t: usize,
    a: &[f64],
    b: &[f64],
    tie: TieBreak,
) -> Result<Ranked> {
    let ra = stepwise_reward(den, model, c, a, t)?;
    let rb = stepwise_reward(den, model, c, b, t)?;
    Ok(rank_by_reward(a, ra, b, rb, tie))
}

/// −log σ(β[(log π_w − log π_w,ref) − (log π_l − log π_l,ref)]).
pub fn dpo_loss(
    logp_w_cur: f64,
    logp_w_ref: f64,
    logp_l_cur: f64,
    logp_l_ref: f64,
    beta: f64,
) -> f64 {
    let h = beta * ((logp_w_cur - logp_w_ref) - (logp_l_cur - logp_l_ref));
    softplus(-h)
}

/// f = β(1 − σ(h)), the weight shared by every closed-form gradient.
pub fn preference_weight(h: f64, beta: f64) -> f64 {
    beta * sigmoid(-h)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn step_mean(coef: &StepCoefficients, x_t: &[f64], eps: &[f64]) -> Vec<f64> {
    x_t.iter()
        .zip(eps)
        .map(|(x, e)| coef.x_coef * x + coef.eps_coef * e)
        .collect()
}

struct Side {
    mu_cur: Vec<f64>,
    mu_ref: Vec<f64>,
    cache: ForwardCache,
}

fn side(
    pp: &PolicyPair,
    coef: &StepCoefficients,
    parent: &[f64],
    t: usize,
    c: usize,
) -> Result<Side> {
    let cache = forward(&pp.current, &pp.spec, parent, t, c)?;
    let ref_eps = crate::nnet::predict_noise(&pp.reference, &pp.spec, parent, t, c)?;
    Ok(Side {
        mu_cur: step_mean(coef, parent, cache.output()),
        mu_ref: step_mean(coef, parent, &ref_eps),
        cache,
    })
}

/// log π_θ(x | parent) − log π_ref(x | parent); the normalisers cancel.
fn log_ratio(x: &[f64], s: &Side, sigma: f64) -> f64 {
    (sq_dist(x, &s.mu_ref) - sq_dist(x, &s.mu_cur)) / (2.0 * sigma * sigma)
}

/// Scalars of one pair evaluated in plain arithmetic.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairTerms {
    pub h: f64,
    pub f: f64,
    pub loss: f64,
}

struct PairEval {
    terms: PairTerms,
    coef: StepCoefficients,
    w: Side,
    l: Option<Side>,
}

impl PairEval {
    fn loser_side(&self) -> &Side {
        self.l.as_ref().unwrap_or(&self.w)
    }
}

fn eval_pair(
    pp: &PolicyPair,
    pref: &PreferencePair,
    sched: &NoiseSchedule,
    beta: f64,
) -> Result<PairEval> {
    let coef = pref.validate(sched)?;
    let w = side(pp, &coef, &pref.parent_w, pref.t, pref.condition)?;
    let l = if pref.shares_parent() {
        None
    } else {
        Some(side(pp, &coef, &pref.parent_l, pref.t, pref.condition)?)
    };
    let sigma = pref.sigma_t;
    let lr_w = log_ratio(&pref.winner, &w, sigma);
    let lr_l = log_ratio(&pref.loser, l.as_ref().unwrap_or(&w), sigma);
    let h = beta * (lr_w - lr_l);
    let terms = PairTerms {
        h,
        f: preference_weight(h, beta),
        loss: softplus(-h),
    };
    Ok(PairEval { terms, coef, w, l })
}

/// Loss value, h and f for a pair, shared or two-parent.
pub fn pair_terms(
    pp: &PolicyPair,
    pref: &PreferencePair,
    sched: &NoiseSchedule,
    beta: f64,
) -> Result<PairTerms> {
    eval_pair(pp, pref, sched, beta).map(|e| e.terms)
}

fn require_shared_parent(pref: &PreferencePair) -> Result<()> {
    if pref.shares_parent() {
        Ok(())
    } else {
        Err(Error::Contract(
            "step-level pair must share its parent state".into(),
        ))
    }
}

/// Step-level loss on a shared-parent pair, recorded for differentiation.
/// Input blocks are (winner, loser).
pub fn tailorpo_loss(
    pp: &PolicyPair,
    pref: &PreferencePair,
    sched: &NoiseSchedule,
    cfg: &PrefOptConfig,
) -> Result<GradientTape> {
    require_shared_parent(pref)?;
    record_pair_loss(pp, pref, sched, cfg.beta)
}

/// Trajectory-level loss: winner and loser each conditioned on their own parent.
pub fn d3po_loss(
    pp: &PolicyPair,
    pref: &PreferencePair,
    sched: &NoiseSchedule,
    cfg: &PrefOptConfig,
) -> Result<GradientTape> {
    record_pair_loss(pp, pref, sched, cfg.beta)
}

/// Records a closure that may fail, surfacing the first error.
pub(crate) fn record_fallible<F>(f: F) -> Result<GradientTape>
where
    F: for<'t> FnOnce(&'t Tape) -> Result<Recording>,
{
    let mut failure = None;
    let gt = GradientTape::record(|tape| {
        f(tape).unwrap_or_else(|e| {
            failure = Some(e);
            Recording::default()
        })
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(gt),
    }
}

fn tape_mean<'t>(
    tape: &'t Tape,
    pp: &PolicyPair,
    params: &[Var<'t>],
    coef: &StepCoefficients,
    parent: &[f64],
    t: usize,
    c: usize,
) -> Result<Vec<Var<'t>>> {
    let x: Vec<Var<'t>> = parent.iter().map(|&v| tape.constant(v)).collect();
    let eps = predict_noise_on_tape(tape, &pp.spec, params, &x, t, c)?;
    Ok(eps
        .into_iter()
        .zip(parent)
        .map(|(e, &xv)| e.scale(coef.eps_coef).shift(coef.x_coef * xv))
        .collect())
}

fn tape_sq_dist<'t>(tape: &'t Tape, x: &[Var<'t>], mu: &[Var<'t>]) -> Var<'t> {
    let terms: Vec<Var<'t>> = x.iter().zip(mu).map(|(&a, &b)| (a - b).square()).collect();
    tape.sum(&terms)
}

fn tape_sq_dist_const<'t>(tape: &'t Tape, x: &[Var<'t>], mu: &[f64]) -> Var<'t> {
    let terms: Vec<Var<'t>> = x.iter().zip(mu).map(|(&a, &b)| (a - b).square()).collect();
    tape.sum(&terms)
}

fn record_pair_loss(
    pp: &PolicyPair,
    pref: &PreferencePair,
    sched: &NoiseSchedule,
    beta: f64,
) -> Result<GradientTape> {
    let eval = eval_pair(pp, pref, sched, beta)?;
    let (mu_ref_w, mu_ref_l) = (eval.w.mu_ref.clone(), eval.loser_side().mu_ref.clone());
    let coef = eval.coef;
    let shared = pref.shares_parent();
    let inv = 1.0 / (2.0 * pref.sigma_t * pref.sigma_t);
    record_fallible(|tape| {
        let (p, prange) = tape.leaves(pp.current.values());
        let (xw, wrange) = tape.leaves(&pref.winner);
        let (xl, lrange) = tape.leaves(&pref.loser);
        let mu_w = tape_mean(tape, pp, &p, &coef, &pref.parent_w, pref.t, pref.condition)?;
        let mu_l = if shared {
            mu_w.clone()
        } else {
            tape_mean(tape, pp, &p, &coef, &pref.parent_l, pref.t, pref.condition)?
        };
        let lr_w =
            (tape_sq_dist_const(tape, &xw, &mu_ref_w) - tape_sq_dist(tape, &xw, &mu_w)).scale(inv);
        let lr_l =
            (tape_sq_dist_const(tape, &xl, &mu_ref_l) - tape_sq_dist(tape, &xl, &mu_l)).scale(inv);
        let h = (lr_w - lr_l).scale(beta);
        let loss = (-h).softplus();
        Ok(Recording {
            params: Some(prange),
            inputs: vec![wrange, lrange],
            outputs: vec![loss.id()],
        })
    })
}

/// Indicator form on unranked samples: −log σ(s·Δ) with
/// Δ = β[(log π₀ − log π₀,ref) − (log π₁ − log π₁,ref)] and s = −1 exactly
/// when sample 1 is preferred.
#[allow(clippy::too_many_arguments)]
pub fn tailorpo_loss_indicator(
    pp: &PolicyPair,
    sched: &NoiseSchedule,
    c: usize,
    t: usize,
    t_prev: usize,
    x_t: &[f64],
    sample_0: &[f64],
    sample_1: &[f64],
    rewards: (f64, f64),
    cfg: &PrefOptConfig,
) -> Result<f64> {
    let coef = sched.coefficients(t, t_prev)?;
    if !(coef.sigma > 0.0) {
        return Err(Error::DegenerateDistribution(coef.sigma));
    }
    let s = side(pp, &coef, x_t, t, c)?;
    let delta =
        cfg.beta * (log_ratio(sample_0, &s, coef.sigma) - log_ratio(sample_1, &s, coef.sigma));
    let second_preferred = match cfg.tie_break {
        TieBreak::FirstWins => rewards.0 < rewards.1,
        TieBreak::SecondWins => rewards.0 <= rewards.1,
    };
    let sign = if second_preferred { -1.0 } else { 1.0 };
    Ok(softplus(-(sign * delta)))
}

/// log π(x | parent) for the current parameters of `params`.
#[allow(clippy::too_many_arguments)]
pub fn log_prob(
    params: &ParameterSet,
    spec: &NetworkSpec,
    sched: &NoiseSchedule,
    c: usize,
    t: usize,
    t_prev: usize,
    parent: &[f64],
    x: &[f64],
) -> Result<f64> {
    let coef = sched.coefficients(t, t_prev)?;
    let eps = crate::nnet::predict_noise(params, spec, parent, t, c)?;
    let dist = crate::diffusion::GaussianStepDistribution {
        mean: step_mean(&coef, parent, &eps),
        scale: coef.sigma,
    };
    crate::diffusion::log_prob_step(&dist, x)
}

/// ∇_θ log π(x | parent) = (∂μ/∂θ)ᵀ(x − μ)/σ².
#[allow(clippy::too_many_arguments)]
pub fn log_prob_grad(
    params: &ParameterSet,
    spec: &NetworkSpec,
    sched: &NoiseSchedule,
    c: usize,
    t: usize,
    t_prev: usize,
    parent: &[f64],
    x: &[f64],
) -> Result<Vec<f64>> {
    let coef = sched.coefficients(t, t_prev)?;
    if !(coef.sigma > 0.0) {
        return Err(Error::DegenerateDistribution(coef.sigma));
    }
    let cache = forward(params, spec, parent, t, c)?;
    let mu = step_mean(&coef, parent, cache.output());
    let k = coef.eps_coef / (coef.sigma * coef.sigma);
    let adj: Vec<f64> = x.iter().zip(&mu).map(|(a, m)| k * (a - m)).collect();
    let mut g = vec![0.0; params.len()];
    backward(params, spec, &cache, &adj, &mut g);
    Ok(g)
}

/// log π(x | parent) recorded on a tape over the parameters.
#[allow(clippy::too_many_arguments)]
pub fn log_prob_tape(
    params: &ParameterSet,
    spec: &NetworkSpec,
    sched: &NoiseSchedule,
    c: usize,
    t: usize,
    t_prev: usize,
    parent: &[f64],
    x: &[f64],
) -> Result<GradientTape> {
    let coef = sched.coefficients(t, t_prev)?;
    if !(coef.sigma > 0.0) {
        return Err(Error::DegenerateDistribution(coef.sigma));
    }
    let pp = PolicyPair::from_reference(spec.clone(), params.clone())?;
    let var = coef.sigma * coef.sigma;
    let norm = -0.5 * x.len() as f64 * (2.0 * std::f64::consts::PI * var).ln();
    record_fallible(|tape| {
        let (p, prange) = tape.leaves(params.values());
        let (xv, xrange) = tape.leaves(x);
        let mu = tape_mean(tape, &pp, &p, &coef, parent, t, c)?;
        let lp = tape_sq_dist(tape, &xv, &mu).scale(-0.5 / var).shift(norm);
        Ok(Recording {
            params: Some(prange),
            inputs: vec![xrange],
            outputs: vec![lp.id()],
        })
    })
}

fn scaled_vjp(pp: &PolicyPair, cache: &ForwardCache, adj: Vec<f64>, grad: &mut [f64]) {
    backward(&pp.current, &pp.spec, cache, &adj, grad);
}

/// −(f/σ²)·(∂μ/∂θ)ᵀ·direction at the shared parent, with f taken from `pref`.
pub fn tailorpo_grad_along(
    pp: &PolicyPair,
    pref: &PreferencePair,
    sched: &NoiseSchedule,
    cfg: &PrefOptConfig,
    direction: &[f64],
) -> Result<(Vec<f64>, PairTerms)> {
    require_shared_parent(pref)?;
    let eval = eval_pair(pp, pref, sched, cfg.beta)?;
    let k = -eval.terms.f * eval.coef.eps_coef / (pref.sigma_t * pref.sigma_t);
    let mut g = vec![0.0; pp.current.len()];
    scaled_vjp(
        pp,
        &eval.w.cache,
        direction.iter().map(|d| k * d).collect(),
        &mut g,
    );
    Ok((g, eval.terms))
}

/// ∇_θ of the step-level loss: −(f/σ²)·(∂μ/∂θ)ᵀ(x^w − x^l).
pub fn analytic_grad_tailorpo(
    pp: &PolicyPair,
    pref: &PreferencePair,
    sched: &NoiseSchedule,
    cfg: &PrefOptConfig,
) -> Result<Vec<f64>> {
    let dir: Vec<f64> = pref
        .winner
        .iter()
        .zip(&pref.loser)
        .map(|(w, l)| w - l)
        .collect();
    tailorpo_grad_along(pp, pref, sched, cfg, &dir).map(|(g, _)| g)
}

/// ∇_θ of the two-parent loss:
/// −(f/σ²)·[(∂μ_w/∂θ)ᵀ(x^w − μ_w) − (∂μ_l/∂θ)ᵀ(x^l − μ_l)].
pub fn analytic_grad_d3po(
    pp: &PolicyPair,
    pref: &PreferencePair,
    sched: &NoiseSchedule,
    cfg: &PrefOptConfig,
) -> Result<Vec<f64>> {
    let eval = eval_pair(pp, pref, sched, cfg.beta)?;
    let k = eval.terms.f * eval.coef.eps_coef / (pref.sigma_t * pref.sigma_t);
    let l = eval.loser_side();
    let adj_w = pref
        .winner
        .iter()
        .zip(&eval.w.mu_cur)
        .map(|(x, m)| -k * (x - m))
        .collect();
    let adj_l = pref
        .loser
        .iter()
        .zip(&l.mu_cur)
        .map(|(x, m)| k * (x - m))
        .collect();
    let mut g = vec![0.0; pp.current.len()];
    scaled_vjp(pp, &eval.w.cache, adj_w, &mut g);
    scaled_vjp(pp, &l.cache, adj_l, &mut g);
    Ok(g)
}

/// The generic DPO form −f·(∇log π_w − ∇log π_l), assembled from
/// separately computed log-probability gradients.
pub fn analytic_grad_dpo(
    pp: &PolicyPair,
    pref: &PreferencePair,
    sched: &NoiseSchedule,
    cfg: &PrefOptConfig,
) -> Result<Vec<f64>> {
    let terms = pair_terms(pp, pref, sched, cfg.beta)?;
    let (c, t, tp) = (pref.condition, pref.t, pref.t_prev);
    let gw = log_prob_grad(
        &pp.current,
        &pp.spec,
        sched,
        c,
        t,
        tp,
        &pref.parent_w,
        &pref.winner,
    )?;
    let gl = log_prob_grad(
        &pp.current,
        &pp.spec,
        sched,
        c,
        t,
        tp,
        &pref.parent_l,
        &pref.loser,
    )?;
    Ok(gw
        .iter()
        .zip(&gl)
        .map(|(a, b)| -terms.f * (a - b))
        .collect())
}

/// Which closed form a batch update uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairLoss {
    Step,
    Trajectory,
}

/// Summed gradient and mean statistics over a batch of pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchGradient {
    pub grad: Vec<f64>,
    pub mean_loss: f64,
    pub mean_f: f64,
}

/// Per-pair gradients in parallel, then a fixed-order pairwise sum.
pub fn batch_gradient(
    pp: &PolicyPair,
    pairs: &[PreferencePair],
    sched: &NoiseSchedule,
    cfg: &PrefOptConfig,
    kind: PairLoss,
) -> Result<BatchGradient> {
    if pairs.is_empty() {
        return Ok(BatchGradient {
            grad: vec![0.0; pp.current.len()],
            mean_loss: 0.0,
            mean_f: 0.0,
        });
    }
    let parts: Vec<(Vec<f64>, PairTerms)> = pairs
        .par_iter()
        .map(|pref| {
            let g = match kind {
                PairLoss::Step => analytic_grad_tailorpo(pp, pref, sched, cfg)?,
                PairLoss::Trajectory => analytic_grad_d3po(pp, pref, sched, cfg)?,
            };
            Ok((g, pair_terms(pp, pref, sched, cfg.beta)?))
        })
        .collect::<Result<_>>()?;
    let grads: Vec<&[f64]> = parts.iter().map(|(g, _)| g.as_slice()).collect();
    let n = pairs.len() as f64;
    Ok(BatchGradient {
        grad: pairwise_sum(&grads),
        mean_loss: parts.iter().map(|(_, s)| s.loss).sum::<f64>() / n,
        mean_f: parts.iter().map(|(_, s)| s.f).sum::<f64>() / n,
    })
}

/// Element-wise sum by recursive halving; the rounding depends only on the
/// slice order, never on which thread produced each term.
pub fn pairwise_sum(parts: &[&[f64]]) -> Vec<f64> {
    match parts {
        [] => Vec::new(),
        [one] => one.to_vec(),
        _ => {
            let (a, b) = parts.split_at(parts.len() / 2);
            let mut left = pairwise_sum(a);
            for (x, y) in left.iter_mut().zip(pairwise_sum(b)) {
                *x += y;
            }
            left
        }
    }
}

/// Rescales `grad` in place to norm ≤ `max_norm`; returns the original norm.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= k);
    }
    norm
}

/// θ ← θ − lr·g.
pub fn sgd_update(params: &ParameterSet, grad: &[f64], learning_rate: f64) -> Result<ParameterSet> {
    if grad.len() != params.len() {
        return Err(Error::Contract(format!(
            "gradient has {} entries, parameters {}",
            grad.len(),
            params.len()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    let values: Vec<f64> = params
        .values()
        .iter()
        .zip(grad)
        .map(|(p, g)| p - learning_rate * g)
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("updated parameters".into()));
    }
    params.with_values(values)
}

/// μ_θ(x_t) for the pair's step under the current parameters.
pub fn policy_mean(
    pp: &PolicyPair,
    sched: &NoiseSchedule,
    c: usize,
    t: usize,
    t_prev: usize,
    x_t: &[f64],
) -> Result<Vec<f64>> {
    let coef = sched.coefficients(t, t_prev)?;
    let eps = crate::nnet::predict_noise(&pp.current, &pp.spec, x_t, t, c)?;
    Ok(step_mean(&coef, x_t, &eps))
}
