use rayon::prelude::*;
use serde::Serialize;

use crate::diffusion::{sample_trajectory, InferenceGrid, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nnet::{NetworkSpec, ParameterSet};
use crate::reward::Reward;
use crate::rng::task_rng;

/// Final samples x₀ for `n` draws of condition `c`; draw i always uses the
/// stream (seed, c, i), so two models compared under one seed share noise.
#[allow(clippy::too_many_arguments)]
pub fn sample_finals(
    params: &ParameterSet,
    spec: &NetworkSpec,
    sched: &NoiseSchedule,
    grid: &InferenceGrid,
    c: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = task_rng(seed, &[c as u64, i as u64]);
            sample_trajectory(params, spec, sched, grid, c, &mut rng)
                .map(|t| t.final_state().to_vec())
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConditionStats {
    pub condition: usize,
    pub n: usize,
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvaluationReport {
    pub per_condition: Vec<ConditionStats>,
    pub pooled: ConditionStats,
    /// Energy distance to the reference model, when one was supplied.
    pub drift: Option<f64>,
    /// Every reward, grouped by condition in the order of `per_condition`.
    pub rewards: Vec<f64>,
}

pub(crate) fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Mean reward over `n_per_condition` draws of every condition, per
/// condition and pooled, with optional drift against `reference`. With no
/// draws the report is empty.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    params: &ParameterSet,
    reference: Option<&ParameterSet>,
    spec: &NetworkSpec,
    sched: &NoiseSchedule,
    grid: &InferenceGrid,
    model: &dyn Reward,
    conditions: &[usize],
    n_per_condition: usize,
    drift_samples: usize,
    seed: u64,
) -> Result<EvaluationReport> {
    if conditions.is_empty() {
        return Err(Error::Config(
            "evaluation needs at least one condition".into(),
        ));
    }
    let mut per_condition = Vec::new();
    let mut rewards = Vec::with_capacity(n_per_condition * conditions.len());
    for &c in conditions {
        let n = n_per_condition;
        if n == 0 {
            continue;
        }
        let finals = sample_finals(params, spec, sched, grid, c, n, seed)?;
        let r: Vec<f64> = finals
            .iter()
            .map(|x| model.value(c, x))
            .collect::<Result<_>>()?;
        let (mean, stderr) = mean_stderr(&r);
        per_condition.push(ConditionStats {
            condition: c,
            n,
            mean,
            stderr,
        });
        rewards.extend(r);
    }
    let (mean, stderr) = mean_stderr(&rewards);
    let pooled = ConditionStats {
        condition: usize::MAX,
        n: rewards.len(),
        mean,
        stderr,
    };
    let drift = match reference {
        Some(r) if drift_samples > 0 => Some(drift_metric(
            params,
            r,
            spec,
            sched,
            grid,
            conditions,
            drift_samples,
            seed ^ 0x5eed,
        )?),
        _ => None,
    };
    Ok(EvaluationReport {
        per_condition,
        pooled,
        drift,
        rewards,
    })
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn mean_cross_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let rows: Vec<f64> = a
        .par_iter()
        .map(|x| b.iter().map(|y| dist(x, y)).sum::<f64>())
        .collect();
    rows.iter().sum::<f64>() / (a.len() * b.len()) as f64
}

/// V-statistic energy distance 2E‖X−Y‖ − E‖X−X′‖ − E‖Y−Y′‖. The cross term
/// is averaged over both argument orders, so swapping the samples gives the
/// same value bit for bit.
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let cross = 0.5 * (mean_cross_distance(a, b) + mean_cross_distance(b, a));
    2.0 * cross - mean_cross_distance(a, a) - mean_cross_distance(b, b)
}

/// Mean over conditions of the energy distance between the two models'
/// final samples, drawn with shared noise streams.
#[allow(clippy::too_many_arguments)]
pub fn drift_metric(
    a: &ParameterSet,
    b: &ParameterSet,
    spec: &NetworkSpec,
    sched: &NoiseSchedule,
    grid: &InferenceGrid,
    conditions: &[usize],
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    if conditions.is_empty() || n_samples == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for &c in conditions {
        let xa = sample_finals(a, spec, sched, grid, c, n_samples, seed)?;
        let xb = sample_finals(b, spec, sched, grid, c, n_samples, seed)?;
        total += energy_distance(&xa, &xb);
    }
    Ok(total / conditions.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn energy_distance_basics() {
        let a = vec![vec![0.0, 0.0], vec![1.0, 0.0]];
        let b = vec![vec![0.0, 3.0], vec![1.0, 2.0], vec![0.5, 0.5]];
        assert_eq!(energy_distance(&a, &a), 0.0);
        assert_eq!(
            energy_distance(&a, &b).to_bits(),
            energy_distance(&b, &a).to_bits()
        );
        assert!(energy_distance(&a, &b) > 0.0);
        // Two points at distance d: 2d − 0 − 0.
        assert_eq!(energy_distance(&[vec![0.0]], &[vec![2.0]]), 4.0);
    }

    #[test]
    fn stderr_of_constant_is_zero() {
        assert_eq!(mean_stderr(&[2.0, 2.0, 2.0]), (2.0, 0.0));
        let (m, s) = mean_stderr(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }
}
