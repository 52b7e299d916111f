//! Variance schedule and DDIM inference grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BetaSchedule {
    /// β_t linear from `start` to `end` over steps 1..=T.
    Linear { start: f64, end: f64 },
    /// Squared-cosine ᾱ with a small offset `s`, β clipped at 0.999.
    Cosine { s: f64 },
    /// log(ᾱ/(1−ᾱ)) falls linearly from `lambda_max` at t = 0⁺ to
    /// `lambda_min` at t = T.
    LogSnrLinear { lambda_max: f64, lambda_min: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub t_train: usize,
    pub betas: BetaSchedule,
    pub ddim_eta: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        // Noise level e^{-λ/2} runs geometrically from 0.0025 to 55: the last
        // DDIM step is far below the data spread and x_T is pure noise.
        Self {
            t_train: 50,
            betas: BetaSchedule::LogSnrLinear {
                lambda_max: 12.0,
                lambda_min: -8.0,
            },
            ddim_eta: 1.0,
        }
    }
}

/// α_t, ᾱ_t and the DDIM reverse-step scales. Index 0 is the clean data
/// (ᾱ_0 = 1); steps run 1..=T.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    t_train: usize,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
    ddim_eta: f64,
}

/// μ = x_coef·x_t + eps_coef·ε̂ and the reverse-step scale σ for one
/// transition t → t_prev.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepCoefficients {
    pub x_coef: f64,
    pub eps_coef: f64,
    pub sigma: f64,
}

impl NoiseSchedule {
    pub fn new(cfg: &ScheduleConfig) -> Result<Self> {
        let t_train = cfg.t_train;
        if t_train == 0 {
            return Err(Error::Config("t_train must be positive".into()));
        }
        if !(0.0..=1.0).contains(&cfg.ddim_eta) {
            return Err(Error::Config(format!(
                "ddim_eta {} outside [0, 1]",
                cfg.ddim_eta
            )));
        }
        let betas: Vec<f64> = match cfg.betas {
            BetaSchedule::Linear { start, end } => (1..=t_train)
                .map(|t| {
                    if t_train == 1 {
                        start
                    } else {
                        start + (end - start) * (t - 1) as f64 / (t_train - 1) as f64
                    }
                })
                .collect(),
            BetaSchedule::Cosine { s } => {
                let f = |t: usize| {
                    let u = (t as f64 / t_train as f64 + s) / (1.0 + s);
                    (u * std::f64::consts::FRAC_PI_2).cos().powi(2)
                };
                (1..=t_train)
                    .map(|t| (1.0 - f(t) / f(t - 1)).min(0.999))
                    .collect()
            }
            BetaSchedule::LogSnrLinear {
                lambda_max,
                lambda_min,
            } => {
                if !(lambda_max > lambda_min) {
                    return Err(Error::Config("lambda_max must exceed lambda_min".into()));
                }
                let ab = |t: usize| {
                    if t == 0 {
                        1.0
                    } else {
                        let u = t as f64 / t_train as f64;
                        crate::nnet::tape::sigmoid(lambda_max + (lambda_min - lambda_max) * u)
                    }
                };
                (1..=t_train).map(|t| 1.0 - ab(t) / ab(t - 1)).collect()
            }
        };
        let mut alpha = vec![1.0];
        let mut alpha_bar = vec![1.0];
        for (i, &b) in betas.iter().enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!(
                    "beta_{} = {b} outside (0, 1)",
                    i + 1
                )));
            }
            alpha.push(1.0 - b);
            alpha_bar.push(alpha_bar[i] * (1.0 - b));
        }
        let mut sched = Self {
            t_train,
            alpha,
            alpha_bar,
            sigma: vec![0.0],
            ddim_eta: cfg.ddim_eta,
        };
        sched.sigma = (0..=t_train)
            .map(|t| {
                if t == 0 {
                    0.0
                } else {
                    sched.ddim_sigma(t, t - 1)
                }
            })
            .collect();
        Ok(sched)
    }

    pub fn t_train(&self) -> usize {
        self.t_train
    }

    pub fn ddim_eta(&self) -> f64 {
        self.ddim_eta
    }

    /// Copy of this schedule with a different η.
    pub fn with_eta(&self, ddim_eta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&ddim_eta) {
            return Err(Error::Config(format!("ddim_eta {ddim_eta} outside [0, 1]")));
        }
        let mut s = self.clone();
        s.ddim_eta = ddim_eta;
        s.sigma = (0..=s.t_train)
            .map(|t| if t == 0 { 0.0 } else { s.ddim_sigma(t, t - 1) })
            .collect();
        Ok(s)
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// σ for the single-step transition t → t−1.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t > self.t_train {
            return Err(Error::Domain(format!(
                "step {t} outside 0..={}",
                self.t_train
            )));
        }
        Ok(())
    }

    fn ddim_sigma(&self, t: usize, t_prev: usize) -> f64 {
        let (ab, ab_prev) = (self.alpha_bar[t], self.alpha_bar[t_prev]);
        self.ddim_eta * ((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)).sqrt()
    }

    /// Reverse-step scale for t → t_prev. The final step into t_prev = 0 is
    /// noise-free.
    pub fn step_sigma(&self, t: usize, t_prev: usize) -> f64 {
        if t_prev == 0 {
            0.0
        } else {
            self.ddim_sigma(t, t_prev)
        }
    }

    /// DDPM posterior standard deviation for t → t−1.
    pub fn ddpm_posterior_sigma(&self, t: usize) -> f64 {
        let beta = 1.0 - self.alpha[t];
        ((1.0 - self.alpha_bar[t - 1]) / (1.0 - self.alpha_bar[t]) * beta).sqrt()
    }

    /// Radicand 1 − ᾱ_{t_prev} − σ² of the direction term.
    pub fn radicand(&self, t: usize, t_prev: usize) -> f64 {
        let s = self.step_sigma(t, t_prev);
        1.0 - self.alpha_bar[t_prev] - s * s
    }

    pub fn coefficients(&self, t: usize, t_prev: usize) -> Result<StepCoefficients> {
        self.check_step(t)?;
        if t_prev >= t {
            return Err(Error::Domain(format!("t_prev {t_prev} must precede t {t}")));
        }
        let (ab, ab_prev) = (self.alpha_bar[t], self.alpha_bar[t_prev]);
        if ab <= 0.0 {
            return Err(Error::Singularity(t));
        }
        let radicand = self.radicand(t, t_prev);
        if radicand < 0.0 {
            return Err(Error::ScheduleConsistency {
                t,
                t_prev,
                radicand,
            });
        }
        let sigma = self.step_sigma(t, t_prev);
        Ok(StepCoefficients {
            x_coef: (ab_prev / ab).sqrt(),
            eps_coef: radicand.sqrt() - (ab_prev * (1.0 - ab) / ab).sqrt(),
            sigma,
        })
    }
}

/// Uniform DDIM subsequence: `timesteps[k]` is the training step visited at
/// inference index k, with `timesteps[0] = 0`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InferenceGrid {
    timesteps: Vec<usize>,
}

impl InferenceGrid {
    pub fn uniform(t_train: usize, steps: usize) -> Result<Self> {
        if steps == 0 || steps > t_train {
            return Err(Error::Config(format!(
                "inference steps {steps} must lie in 1..={t_train}"
            )));
        }
        let timesteps = (0..=steps)
            .map(|k| (2 * k * t_train + steps) / (2 * steps))
            .collect();
        Self::from_timesteps(timesteps)
    }

    pub fn from_timesteps(timesteps: Vec<usize>) -> Result<Self> {
        if timesteps.first() != Some(&0) || timesteps.len() < 2 {
            return Err(Error::Config("inference grid must start at step 0".into()));
        }
        if timesteps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(
                "inference grid must be strictly increasing".into(),
            ));
        }
        Ok(Self { timesteps })
    }

    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.timesteps.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Training step at inference index `k` (0..=len).
    pub fn timestep(&self, k: usize) -> usize {
        self.timesteps[k]
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn check_index(&self, k: usize) -> Result<()> {
        if k > self.len() {
            return Err(Error::Domain(format!(
                "inference index {k} outside 0..={}",
                self.len()
            )));
        }
        Ok(())
    }
}
