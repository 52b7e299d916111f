//! Forward noising, x̂₀ prediction, DDIM reverse steps and trajectories.

use rand::Rng;
use rand_distr::StandardNormal;

use super::schedule::{InferenceGrid, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nnet::{predict_noise, NetworkSpec, ParameterSet};

/// Isotropic Gaussian N(mean, scale² I) of one reverse transition.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStepDistribution {
    pub mean: Vec<f64>,
    pub scale: f64,
}

/// x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε.
pub fn forward_noise(x0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    if t == 0 || t > sched.t_train() {
        return Err(Error::Domain(format!(
            "forward step {t} outside 1..={}",
            sched.t_train()
        )));
    }
    Ok(noise_with_alpha_bar(x0, eps, sched.alpha_bar(t)))
}

pub(crate) fn noise_with_alpha_bar(x0: &[f64], eps: &[f64], alpha_bar: f64) -> Vec<f64> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect()
}

/// x̂₀ = (x_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t.
pub fn predict_x0(
    x_t: &[f64],
    t: usize,
    eps_hat: &[f64],
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    x0_with_alpha_bar(x_t, eps_hat, sched.alpha_bar(t)).ok_or(Error::Singularity(t))
}

pub(crate) fn x0_with_alpha_bar(x_t: &[f64], eps_hat: &[f64], alpha_bar: f64) -> Option<Vec<f64>> {
    if alpha_bar <= 0.0 {
        return None;
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Some(
        x_t.iter()
            .zip(eps_hat)
            .map(|(x, e)| (x - b * e) / a)
            .collect(),
    )
}

/// One DDIM reverse step t → t_prev with caller-supplied noise ε′.
pub fn ddim_step(
    x_t: &[f64],
    t: usize,
    t_prev: usize,
    eps_hat: &[f64],
    noise_draw: &[f64],
    sched: &NoiseSchedule,
) -> Result<(Vec<f64>, GaussianStepDistribution)> {
    sched.check_step(t)?;
    if t_prev >= t {
        return Err(Error::Domain(format!("t_prev {t_prev} must precede t {t}")));
    }
    let radicand = sched.radicand(t, t_prev);
    if radicand < 0.0 {
        return Err(Error::ScheduleConsistency {
            t,
            t_prev,
            radicand,
        });
    }
    let sigma = sched.step_sigma(t, t_prev);
    let x0 = predict_x0(x_t, t, eps_hat, sched)?;
    let (a_prev, dir) = (sched.alpha_bar(t_prev).sqrt(), radicand.sqrt());
    let mean: Vec<f64> = x0
        .iter()
        .zip(eps_hat)
        .map(|(x, e)| a_prev * x + dir * e)
        .collect();
    let x_prev = mean
        .iter()
        .zip(noise_draw)
        .map(|(m, z)| m + sigma * z)
        .collect();
    Ok((x_prev, GaussianStepDistribution { mean, scale: sigma }))
}

/// log N(x_prev; mean, scale² I).
pub fn log_prob_step(dist: &GaussianStepDistribution, x_prev: &[f64]) -> Result<f64> {
    if !(dist.scale > 0.0) {
        return Err(Error::DegenerateDistribution(dist.scale));
    }
    let d = dist.mean.len() as f64;
    let var = dist.scale * dist.scale;
    let sq: f64 = x_prev
        .iter()
        .zip(&dist.mean)
        .map(|(x, m)| (x - m) * (x - m))
        .sum();
    Ok(-0.5 * d * (2.0 * std::f64::consts::PI * var).ln() - sq / (2.0 * var))
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

/// A (possibly partial) reverse chain. `steps[i]` is the training step of
/// `states[i]`, the source of transition i; the last state sits at step 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub condition: usize,
    pub steps: Vec<usize>,
    pub states: Vec<Vec<f64>>,
    pub means: Vec<Vec<f64>>,
    pub sigmas: Vec<f64>,
    pub noise_draws: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn final_state(&self) -> &[f64] {
        self.states
            .last()
            .expect("a trajectory always holds its start state")
    }

    /// Recomputes every x_{t−1} from its stored (mean, σ, ε′).
    pub fn reconstructs_exactly(&self) -> bool {
        self.means
            .iter()
            .zip(&self.sigmas)
            .zip(&self.noise_draws)
            .enumerate()
            .all(|(i, ((mean, &sigma), noise))| {
                let x: Vec<f64> = mean.iter().zip(noise).map(|(m, z)| m + sigma * z).collect();
                x.iter()
                    .zip(&self.states[i + 1])
                    .all(|(a, b)| a.to_bits() == b.to_bits())
            })
    }
}

/// Runs the reverse chain from `x_start` at inference index `start` down
/// to index 0, drawing every ε′ from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn complete_from<R: Rng + ?Sized>(
    params: &ParameterSet,
    spec: &NetworkSpec,
    sched: &NoiseSchedule,
    grid: &InferenceGrid,
    c: usize,
    start: usize,
    x_start: Vec<f64>,
    rng: &mut R,
) -> Result<Trajectory> {
    grid.check_index(start)?;
    let mut traj = Trajectory {
        condition: c,
        steps: Vec::with_capacity(start),
        states: vec![x_start],
        means: Vec::with_capacity(start),
        sigmas: Vec::with_capacity(start),
        noise_draws: Vec::with_capacity(start),
    };
    for k in (1..=start).rev() {
        let (t, t_prev) = (grid.timestep(k), grid.timestep(k - 1));
        let x_t = traj.states.last().unwrap();
        let eps_hat = predict_noise(params, spec, x_t, t, c)?;
        let noise = standard_normal(rng, spec.input_dim);
        let (x_prev, dist) = ddim_step(x_t, t, t_prev, &eps_hat, &noise, sched)?;
        traj.steps.push(t);
        traj.states.push(x_prev);
        traj.means.push(dist.mean);
        traj.sigmas.push(dist.scale);
        traj.noise_draws.push(noise);
    }
    Ok(traj)
}

/// Full trajectory from x_T ~ N(0, I).
pub fn sample_trajectory<R: Rng + ?Sized>(
    params: &ParameterSet,
    spec: &NetworkSpec,
    sched: &NoiseSchedule,
    grid: &InferenceGrid,
    c: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    let x_t = standard_normal(rng, spec.input_dim);
    complete_from(params, spec, sched, grid, c, grid.len(), x_t, rng)
}
