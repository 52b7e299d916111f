//! Denoising pretraining: minimise E‖ε − ε_θ(x_t, t, c)‖² with momentum SGD.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::GaussianMixture;
use super::sampler::{noise_with_alpha_bar, standard_normal};
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::nnet::{backward, forward, NetworkSpec, ParameterSet};
use crate::rng::task_rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Anneal the learning rate to zero along a half cosine.
    pub cosine_decay: bool,
    /// Optimiser steps per loss-curve entry.
    pub log_every: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 128,
            learning_rate: 0.02,
            momentum: 0.9,
            cosine_decay: true,
            log_every: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutput {
    pub params: ParameterSet,
    /// Mean per-sample loss over each `log_every` window.
    pub loss_curve: Vec<f64>,
}

const CHUNKS: usize = 8;

/// Loss and summed gradient of one batch; samples are drawn from per-sample
/// random streams and reduced in a fixed order.
fn batch_gradient(
    params: &ParameterSet,
    spec: &NetworkSpec,
    data: &GaussianMixture,
    sched: &NoiseSchedule,
    seed: u64,
    step: usize,
    batch: usize,
) -> Result<(f64, Vec<f64>)> {
    let per_chunk = batch.div_ceil(CHUNKS);
    let partials: Vec<Result<(f64, Vec<f64>)>> = (0..CHUNKS)
        .into_par_iter()
        .map(|chunk| {
            let mut grad = vec![0.0; params.len()];
            let mut loss = 0.0;
            for i in chunk * per_chunk..((chunk + 1) * per_chunk).min(batch) {
                let mut rng = task_rng(seed, &[step as u64, i as u64]);
                let c = rng.gen_range(0..data.modes());
                let x0 = data.sample(c, &mut rng);
                let t = rng.gen_range(1..=sched.t_train());
                let eps = standard_normal(&mut rng, spec.input_dim);
                let x_t = noise_with_alpha_bar(&x0, &eps, sched.alpha_bar(t));
                let cache = forward(params, spec, &x_t, t, c)?;
                let resid: Vec<f64> = cache
                    .output()
                    .iter()
                    .zip(&eps)
                    .map(|(p, e)| p - e)
                    .collect();
                loss += resid.iter().map(|r| r * r).sum::<f64>();
                let adj: Vec<f64> = resid.iter().map(|r| 2.0 * r / batch as f64).collect();
                backward(params, spec, &cache, &adj, &mut grad);
            }
            Ok((loss, grad))
        })
        .collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0; params.len()];
    for partial in partials {
        let (l, g) = partial?;
        loss += l;
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    Ok((loss / batch as f64, grad))
}

pub fn pretrain(
    init: ParameterSet,
    spec: &NetworkSpec,
    data: &GaussianMixture,
    sched: &NoiseSchedule,
    cfg: &PretrainConfig,
) -> Result<PretrainOutput> {
    if data.modes() != spec.num_conditions {
        return Err(Error::Config(format!(
            "mixture has {} modes but network has {} conditions",
            data.modes(),
            spec.num_conditions
        )));
    }
    if cfg.batch_size == 0 || cfg.log_every == 0 {
        return Err(Error::Config(
            "batch_size and log_every must be positive".into(),
        ));
    }
    let mut params = init;
    let mut velocity = vec![0.0; params.len()];
    let mut loss_curve = Vec::new();
    let mut window = 0.0;
    for step in 0..cfg.steps {
        let (loss, grad) =
            batch_gradient(&params, spec, data, sched, cfg.seed, step, cfg.batch_size)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                iteration: step,
                detail: format!(
                    "pretraining loss {loss}; last logged {:?}",
                    loss_curve.last()
                ),
            });
        }
        let lr = if cfg.cosine_decay {
            cfg.learning_rate
                * 0.5
                * (1.0 + (std::f64::consts::PI * step as f64 / cfg.steps as f64).cos())
        } else {
            cfg.learning_rate
        };
        for ((p, v), g) in params.values_mut().iter_mut().zip(&mut velocity).zip(&grad) {
            *v = cfg.momentum * *v + g;
            *p -= lr * *v;
        }
        window += loss;
        if (step + 1) % cfg.log_every == 0 {
            loss_curve.push(window / cfg.log_every as f64);
            window = 0.0;
        }
    }
    Ok(PretrainOutput { params, loss_curve })
}
