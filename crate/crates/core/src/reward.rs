//! Synthetic rewards on final samples, the one-shot step-wise reward
//! estimate r(c, x̂₀(x_t)), and a Monte-Carlo rollout oracle for the
//! expected terminal reward E[r(c, x₀) | c, x_t].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::sampler::x0_with_alpha_bar;
use crate::diffusion::{complete_from, GaussianMixture, InferenceGrid, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nnet::{forward, input_vjp, NetworkSpec, ParameterSet};
use crate::rng::{derive_seed, task_rng};

/// A reward on clean samples, r(c, x₀).
pub trait Reward: Send + Sync {
    fn value(&self, c: usize, x0: &[f64]) -> Result<f64>;

    /// ∇ₓ r(c, x₀); fails with [`Error::GradientUnavailable`] for rewards
    /// that only expose values.
    fn gradient(&self, c: usize, x0: &[f64]) -> Result<Vec<f64>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RewardKind {
    #[default]
    TargetAffinity,
    Blackbox,
}

/// r(c, x₀) = exp(−‖x₀ − g_c‖² / 2τ²).
#[derive(Clone, Debug, PartialEq)]
pub struct RewardModel {
    pub kind: RewardKind,
    targets: Vec<Vec<f64>>,
    bandwidth: f64,
}

impl RewardModel {
    pub fn new(kind: RewardKind, targets: Vec<Vec<f64>>, bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::Config(format!(
                "bandwidth must be positive, got {bandwidth}"
            )));
        }
        Ok(Self {
            kind,
            targets,
            bandwidth,
        })
    }

    /// Goal for condition c is the antipode of that condition's data mode.
    pub fn antipodal(data: &GaussianMixture, kind: RewardKind, bandwidth: f64) -> Result<Self> {
        let targets = (0..data.modes())
            .map(|c| data.mode_mean(c).iter().map(|v| -v).collect())
            .collect();
        Self::new(kind, targets, bandwidth)
    }

    pub fn target(&self, c: usize) -> Result<&[f64]> {
        self.targets
            .get(c)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Config(format!("no reward target for condition {c}")))
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// Same targets and bandwidth, different kind.
    pub fn with_kind(&self, kind: RewardKind) -> Self {
        Self {
            kind,
            ..self.clone()
        }
    }
}

impl Reward for RewardModel {
    fn value(&self, c: usize, x0: &[f64]) -> Result<f64> {
        let g = self.target(c)?;
        let sq: f64 = x0.iter().zip(g).map(|(x, g)| (x - g) * (x - g)).sum();
        Ok((-sq / (2.0 * self.bandwidth * self.bandwidth)).exp())
    }

    fn gradient(&self, c: usize, x0: &[f64]) -> Result<Vec<f64>> {
        if self.kind == RewardKind::Blackbox {
            return Err(Error::GradientUnavailable);
        }
        let r = self.value(c, x0)?;
        let g = self.target(c)?;
        let inv = 1.0 / (self.bandwidth * self.bandwidth);
        Ok(x0.iter().zip(g).map(|(x, g)| -(x - g) * inv * r).collect())
    }
}

pub fn reward(model: &dyn Reward, c: usize, x0: &[f64]) -> Result<f64> {
    model.value(c, x0)
}

pub fn reward_grad(model: &dyn Reward, c: usize, x0: &[f64]) -> Result<Vec<f64>> {
    model.gradient(c, x0)
}

/// The infinite-bandwidth limit: the same value everywhere.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstantReward(pub f64);

impl Reward for ConstantReward {
    fn value(&self, _c: usize, _x0: &[f64]) -> Result<f64> {
        Ok(self.0)
    }

    fn gradient(&self, _c: usize, x0: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![0.0; x0.len()])
    }
}

/// r(x) = w·x + b, independent of the condition.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearReward {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl Reward for LinearReward {
    fn value(&self, _c: usize, x0: &[f64]) -> Result<f64> {
        Ok(self
            .weights
            .iter()
            .zip(x0)
            .fold(self.bias, |acc, (w, x)| acc + w * x))
    }

    fn gradient(&self, _c: usize, _x0: &[f64]) -> Result<Vec<f64>> {
        Ok(self.weights.clone())
    }
}

/// Network context shared by every step-wise reward query.
#[derive(Clone, Copy)]
pub struct Denoiser<'a> {
    pub params: &'a ParameterSet,
    pub spec: &'a NetworkSpec,
    pub sched: &'a NoiseSchedule,
}

impl<'a> Denoiser<'a> {
    pub fn new(params: &'a ParameterSet, spec: &'a NetworkSpec, sched: &'a NoiseSchedule) -> Self {
        Self {
            params,
            spec,
            sched,
        }
    }

    /// x̂₀(x_t) for training step t.
    pub fn predict_x0(&self, c: usize, x_t: &[f64], t: usize) -> Result<Vec<f64>> {
        let eps = crate::nnet::predict_noise(self.params, self.spec, x_t, t, c)?;
        x0_with_alpha_bar(x_t, &eps, self.sched.alpha_bar(t)).ok_or(Error::Singularity(t))
    }
}

/// r_t(c, x_t) ≈ r(c, x̂₀(x_t)).
pub fn stepwise_reward(
    den: Denoiser<'_>,
    model: &dyn Reward,
    c: usize,
    x_t: &[f64],
    t: usize,
) -> Result<f64> {
    model.value(c, &den.predict_x0(c, x_t, t)?)
}

/// r(c, x̂₀(x_t)) and its gradient with respect to x_t, back-propagated
/// through x̂₀ and the noise predictor.
pub fn stepwise_reward_grad(
    den: Denoiser<'_>,
    model: &dyn Reward,
    c: usize,
    x_t: &[f64],
    t: usize,
) -> Result<(f64, Vec<f64>)> {
    let ab = den.sched.alpha_bar(t);
    let cache = forward(den.params, den.spec, x_t, t, c)?;
    let x0 = x0_with_alpha_bar(x_t, cache.output(), ab).ok_or(Error::Singularity(t))?;
    let value = model.value(c, &x0)?;
    let g = model.gradient(c, &x0)?;
    // x̂₀ = (x − b·ε̂(x))/a  ⇒  ∇ₓ = (g − b·Jᵀg)/a
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let jt_g = input_vjp(den.params, den.spec, &cache, &g);
    let grad = g
        .iter()
        .zip(&jt_g)
        .map(|(gi, ji)| (gi - b * ji) / a)
        .collect();
    Ok((value, grad))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepwiseRewardReport {
    pub estimate: f64,
    pub oracle: f64,
    pub rollout_count: usize,
    pub relative_error: f64,
    /// Sample standard error of the oracle mean (zero for one rollout).
    pub oracle_stderr: f64,
    pub seed: u64,
}

/// Mean terminal reward over `n_rollouts` completions of the chain from
/// `x_t` at inference index `k`, next to the one-shot estimate.
#[allow(clippy::too_many_arguments)]
pub fn mc_oracle(
    den: Denoiser<'_>,
    grid: &InferenceGrid,
    model: &dyn Reward,
    c: usize,
    x_t: &[f64],
    k: usize,
    n_rollouts: usize,
    seed: u64,
) -> Result<StepwiseRewardReport> {
    if n_rollouts == 0 {
        return Err(Error::Config("n_rollouts must be at least 1".into()));
    }
    grid.check_index(k)?;
    let estimate = stepwise_reward(den, model, c, x_t, grid.timestep(k))?;
    let rewards: Vec<f64> = (0..n_rollouts)
        .into_par_iter()
        .map(|i| {
            let mut rng = task_rng(seed, &[i as u64]);
            let traj = complete_from(
                den.params,
                den.spec,
                den.sched,
                grid,
                c,
                k,
                x_t.to_vec(),
                &mut rng,
            )?;
            model.value(c, traj.final_state())
        })
        .collect::<Result<_>>()?;
    let n = n_rollouts as f64;
    let oracle = rewards.iter().sum::<f64>() / n;
    let oracle_stderr = if n_rollouts > 1 {
        (rewards.iter().map(|r| (r - oracle).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
    } else {
        0.0
    };
    let relative_error = if estimate == oracle {
        0.0
    } else {
        (oracle - estimate).abs() / oracle.abs()
    };
    Ok(StepwiseRewardReport {
        estimate,
        oracle,
        rollout_count: n_rollouts,
        relative_error,
        oracle_stderr,
        seed,
    })
}

/// One row of the estimator-error sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct JensenRow {
    pub t: usize,
    pub estimate: f64,
    pub oracle: f64,
    pub n: usize,
    pub rel_err: f64,
    pub seed: u64,
}

/// For `n_states` sampled trajectories, measures estimate vs. oracle at each
/// inference index in `steps`.
#[allow(clippy::too_many_arguments)]
pub fn jensen_gap_study(
    den: Denoiser<'_>,
    grid: &InferenceGrid,
    model: &dyn Reward,
    c: usize,
    steps: &[usize],
    n_states: usize,
    n_rollouts: usize,
    seed: u64,
) -> Result<Vec<JensenRow>> {
    let mut rows = Vec::with_capacity(n_states * steps.len());
    for s in 0..n_states {
        let mut rng = task_rng(seed, &[0, s as u64]);
        let traj = crate::diffusion::sample_trajectory(
            den.params, den.spec, den.sched, grid, c, &mut rng,
        )?;
        for &k in steps {
            grid.check_index(k)?;
            let x_t = &traj.states[grid.len() - k];
            let rollout_seed = derive_seed(seed, &[1, s as u64, k as u64]);
            let rep = mc_oracle(den, grid, model, c, x_t, k, n_rollouts, rollout_seed)?;
            rows.push(JensenRow {
                t: k,
                estimate: rep.estimate,
                oracle: rep.oracle,
                n: rep.rollout_count,
                rel_err: rep.relative_error,
                seed: rollout_seed,
            });
        }
    }
    Ok(rows)
}

/// Median relative error per step, in the order of `steps`.
pub fn median_rel_err_by_step(rows: &[JensenRow], steps: &[usize]) -> Vec<(usize, f64)> {
    steps
        .iter()
        .map(|&k| {
            let mut v: Vec<f64> = rows
                .iter()
                .filter(|r| r.t == k)
                .map(|r| r.rel_err)
                .collect();
            (k, median(&mut v))
        })
        .collect()
}

pub(crate) fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn write_jensen_rows<W: std::io::Write>(rows: &[JensenRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::MixtureConfig;
    use crate::nnet::finite_diff_gradient;

    fn model() -> RewardModel {
        RewardModel::antipodal(
            &GaussianMixture::new(MixtureConfig::default()).unwrap(),
            RewardKind::TargetAffinity,
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn reward_hand_values() {
        let m = model();
        let g = m.target(0).unwrap().to_vec();
        assert_eq!(g, vec![-1.0, -0.0]);
        assert_eq!(m.value(0, &g).unwrap(), 1.0);
        let r = m.value(0, &[0.0, 0.0]).unwrap();
        assert!((r - (-0.5f64).exp()).abs() < 1e-15);
        assert!((r - 0.606531).abs() < 1e-6);
        assert!(m.value(0, &[1e3, 0.0]).unwrap() < 1e-300);
    }

    #[test]
    fn unknown_condition_is_a_config_error() {
        assert!(matches!(
            model().value(8, &[0.0, 0.0]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn gradient_matches_finite_differences_and_points_at_target() {
        let m = model();
        for x in [[0.3, -0.2], [1.0, 1.0], [-2.0, 0.5]] {
            let g = m.gradient(3, &x).unwrap();
            let fd = finite_diff_gradient(|p| m.value(3, p).unwrap(), &x, 1e-5).unwrap();
            assert!(crate::nnet::relative_error(&g, &fd) < 1e-6);
            let to_target: Vec<f64> = m
                .target(3)
                .unwrap()
                .iter()
                .zip(&x)
                .map(|(g, x)| g - x)
                .collect();
            assert!(g.iter().zip(&to_target).map(|(a, b)| a * b).sum::<f64>() > 0.0);
        }
        assert_eq!(m.gradient(3, m.target(3).unwrap()).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn blackbox_matches_values_and_withholds_gradient() {
        let m = model();
        let b = m.with_kind(RewardKind::Blackbox);
        for x in [[0.1, 0.2], [-0.7, 3.0]] {
            assert_eq!(
                m.value(2, &x).unwrap().to_bits(),
                b.value(2, &x).unwrap().to_bits()
            );
        }
        assert!(matches!(
            b.gradient(2, &[0.0, 0.0]),
            Err(Error::GradientUnavailable)
        ));
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
