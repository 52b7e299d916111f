//! Reward-gradient guidance on noisy states, the accept/reject rule for a
//! guided winner, the η schedule over fine-tuned steps and the efficacy
//! study.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{complete_from, standard_normal, InferenceGrid};
use crate::error::{Error, Result};
use crate::reward::{stepwise_reward, stepwise_reward_grad, Denoiser, Reward};
use crate::rng::{derive_seed, task_rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub eta_min: f64,
    pub eta_max: f64,
    /// Expected reward increment δ; r_high = r_t(c, x) + δ.
    pub delta: f64,
    pub enabled: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            eta_min: 0.1,
            eta_max: 0.2,
            delta: 0.5,
            enabled: true,
        }
    }
}

impl GuidanceConfig {
    /// A constant schedule at `eta`.
    pub fn fixed(eta: f64, delta: f64) -> Self {
        Self {
            eta_min: eta,
            eta_max: eta,
            delta,
            enabled: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.eta_min && self.eta_min <= self.eta_max && self.eta_max.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 <= eta_min <= eta_max, got [{}, {}]",
                self.eta_min, self.eta_max
            )));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::Config(format!(
                "delta must be positive, got {}",
                self.delta
            )));
        }
        Ok(())
    }
}

/// Cosine interpolation from η_min at the largest fine-tuned step to η_max
/// at the smallest.
pub fn eta_schedule(cfg: &GuidanceConfig, t: usize, fine_tune_steps: &[usize]) -> Result<f64> {
    if !fine_tune_steps.contains(&t) {
        return Err(Error::Domain(format!("step {t} is not a fine-tuned step")));
    }
    let lo = *fine_tune_steps.iter().min().unwrap();
    let hi = *fine_tune_steps.iter().max().unwrap();
    if lo == hi {
        return Ok(cfg.eta_max);
    }
    let u = (t - lo) as f64 / (hi - lo) as f64;
    let w = 0.5 * (1.0 + (std::f64::consts::PI * u).cos());
    Ok(cfg.eta_min + (cfg.eta_max - cfg.eta_min) * w)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    Increase,
    Decrease,
}

/// The displacement ∓η∇ₓ(r_high − r_t(c, x))² = ±2ηδ∇ₓr_t(c, x) at
/// training step `t`.
#[allow(clippy::too_many_arguments)]
pub fn guidance_step(
    den: Denoiser<'_>,
    model: &dyn Reward,
    c: usize,
    x: &[f64],
    t: usize,
    eta: f64,
    delta: f64,
    direction: Direction,
) -> Result<Vec<f64>> {
    let (_, grad) = stepwise_reward_grad(den, model, c, x, t)?;
    let k = 2.0 * eta * delta;
    Ok(match direction {
        Direction::Increase => grad.iter().map(|g| k * g).collect(),
        Direction::Decrease => grad.iter().map(|g| -(k * g)).collect(),
    })
}

/// x± = x ± 2ηδ∇ₓr_t(c, x).
#[allow(clippy::too_many_arguments)]
pub fn guide_sample(
    den: Denoiser<'_>,
    model: &dyn Reward,
    c: usize,
    x: &[f64],
    t: usize,
    eta: f64,
    delta: f64,
    direction: Direction,
) -> Result<Vec<f64>> {
    let step = guidance_step(den, model, c, x, t, eta, delta, direction)?;
    Ok(x.iter().zip(&step).map(|(a, s)| a + s).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidedWinner {
    pub state: Vec<f64>,
    pub accepted: bool,
    pub reward_before: f64,
    pub reward_after: f64,
}

/// Replaces the winner by x⁺ only if x⁺ has strictly higher step-wise
/// reward. Rewards without gradients leave the winner unchanged.
#[allow(clippy::too_many_arguments)]
pub fn guided_winner(
    den: Denoiser<'_>,
    model: &dyn Reward,
    c: usize,
    x_w: &[f64],
    t: usize,
    eta: f64,
    delta: f64,
) -> Result<GuidedWinner> {
    let reward_before = stepwise_reward(den, model, c, x_w, t)?;
    let plus = match guide_sample(den, model, c, x_w, t, eta, delta, Direction::Increase) {
        Ok(p) => p,
        Err(Error::GradientUnavailable) => {
            return Ok(GuidedWinner {
                state: x_w.to_vec(),
                accepted: false,
                reward_before,
                reward_after: reward_before,
            })
        }
        Err(e) => return Err(e),
    };
    let r_plus = stepwise_reward(den, model, c, &plus, t)?;
    Ok(if r_plus > reward_before {
        GuidedWinner {
            state: plus,
            accepted: true,
            reward_before,
            reward_after: r_plus,
        }
    } else {
        GuidedWinner {
            state: x_w.to_vec(),
            accepted: false,
            reward_before,
            reward_after: reward_before,
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EfficacyRow {
    pub step: usize,
    pub direction: Direction,
    pub ratio: f64,
    pub n: usize,
    pub seed: u64,
}

/// For each fine-tuned inference index k, draws `n` states x_{k−1} from the
/// sampler (conditions cycling over `conditions`), guides each once in both
/// directions and reports how often the step-wise reward moved as intended.
#[allow(clippy::too_many_arguments)]
pub fn efficacy_study(
    den: Denoiser<'_>,
    grid: &InferenceGrid,
    model: &dyn Reward,
    conditions: &[usize],
    steps: &[usize],
    n: usize,
    eta: f64,
    delta: f64,
    seed: u64,
) -> Result<Vec<EfficacyRow>> {
    if conditions.is_empty() {
        return Err(Error::Config(
            "efficacy study needs at least one condition".into(),
        ));
    }
    let mut rows = Vec::with_capacity(2 * steps.len());
    for &k in steps {
        grid.check_index(k)?;
        if k == 0 {
            return Err(Error::Domain("fine-tuned steps start at 1".into()));
        }
        let step_seed = derive_seed(seed, &[k as u64]);
        let outcomes: Vec<(bool, bool)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let c = conditions[i % conditions.len()];
                let mut rng = task_rng(step_seed, &[i as u64]);
                let x_start = standard_normal(&mut rng, den.spec.input_dim);
                let traj = complete_from(
                    den.params,
                    den.spec,
                    den.sched,
                    grid,
                    c,
                    grid.len(),
                    x_start,
                    &mut rng,
                )?;
                let x = &traj.states[grid.len() - (k - 1)];
                let t = grid.timestep(k - 1);
                let r = stepwise_reward(den, model, c, x, t)?;
                let up = guide_sample(den, model, c, x, t, eta, delta, Direction::Increase)?;
                let down = guide_sample(den, model, c, x, t, eta, delta, Direction::Decrease)?;
                Ok((
                    stepwise_reward(den, model, c, &up, t)? > r,
                    stepwise_reward(den, model, c, &down, t)? < r,
                ))
            })
            .collect::<Result<_>>()?;
        let ratio = |hit: fn(&(bool, bool)) -> bool| {
            if n == 0 {
                0.0
            } else {
                outcomes.iter().filter(|o| hit(o)).count() as f64 / n as f64
            }
        };
        rows.push(EfficacyRow {
            step: k,
            direction: Direction::Increase,
            ratio: ratio(|o| o.0),
            n,
            seed: step_seed,
        });
        rows.push(EfficacyRow {
            step: k,
            direction: Direction::Decrease,
            ratio: ratio(|o| o.1),
            n,
            seed: step_seed,
        });
    }
    Ok(rows)
}

pub fn write_efficacy_rows<W: std::io::Write>(rows: &[EfficacyRow], out: W) -> Result<()> {
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
    use crate::diffusion::{NoiseSchedule, ScheduleConfig};
    use crate::nnet::{finite_diff_gradient, relative_error, NetworkSpec, ParameterSet};
    use crate::prefopt::gradcheck::random_instance;
    use crate::prefopt::{analytic_grad_tailorpo, tailorpo_grad_along, PreferencePair};
    use crate::reward::{ConstantReward, LinearReward, RewardKind, RewardModel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        spec: NetworkSpec,
        params: ParameterSet,
        sched: NoiseSchedule,
    }

    impl Fixture {
        fn new() -> Self {
            let spec = NetworkSpec {
                hidden_widths: vec![16, 16],
                ..NetworkSpec::default()
            };
            let base = spec.init(&mut ChaCha8Rng::seed_from_u64(1));
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let values = base
                .values()
                .iter()
                .map(|v| v + 0.2 * standard_normal(&mut rng, 1)[0])
                .collect();
            let params = base.with_values(values).unwrap();
            Self {
                spec,
                params,
                sched: NoiseSchedule::new(&ScheduleConfig::default()).unwrap(),
            }
        }

        fn den(&self) -> Denoiser<'_> {
            Denoiser::new(&self.params, &self.spec, &self.sched)
        }
    }

    fn affinity() -> RewardModel {
        RewardModel::new(RewardKind::TargetAffinity, vec![vec![-1.0, 0.0]; 8], 1.0).unwrap()
    }

    #[test]
    fn schedule_endpoints_and_monotonicity() {
        let cfg = GuidanceConfig::default();
        let steps = [20, 16, 12, 8, 4];
        assert_eq!(eta_schedule(&cfg, 20, &steps).unwrap(), 0.1);
        assert_eq!(eta_schedule(&cfg, 4, &steps).unwrap(), 0.2);
        let etas: Vec<f64> = steps
            .iter()
            .map(|&t| eta_schedule(&cfg, t, &steps).unwrap())
            .collect();
        assert!(etas.windows(2).all(|w| w[0] <= w[1]));
        assert!(matches!(
            eta_schedule(&cfg, 5, &steps),
            Err(Error::Domain(_))
        ));
        let flat = GuidanceConfig::fixed(0.3, 0.5);
        assert!(steps
            .iter()
            .all(|&t| eta_schedule(&flat, t, &steps).unwrap() == 0.3));
        assert_eq!(eta_schedule(&cfg, 7, &[7]).unwrap(), 0.2);
    }

    #[test]
    fn linear_reward_on_identity_prediction_is_closed_form() {
        let fx = Fixture::new();
        let w = vec![0.7, -1.3];
        let model = LinearReward {
            weights: w.clone(),
            bias: 0.2,
        };
        let x = [0.4, 0.9];
        // ᾱ_0 = 1, so x̂₀ is x itself.
        let up = guide_sample(fx.den(), &model, 0, &x, 0, 0.2, 0.5, Direction::Increase).unwrap();
        let down = guide_sample(fx.den(), &model, 0, &x, 0, 0.2, 0.5, Direction::Decrease).unwrap();
        for i in 0..2 {
            assert_eq!(up[i], x[i] + 2.0 * 0.2 * 0.5 * w[i]);
            assert_eq!(down[i], x[i] - 2.0 * 0.2 * 0.5 * w[i]);
        }
        assert_eq!(
            guide_sample(
                fx.den(),
                &affinity(),
                0,
                &x,
                10,
                0.0,
                0.5,
                Direction::Increase
            )
            .unwrap(),
            x.to_vec()
        );
    }

    #[test]
    fn displacement_is_sign_symmetric() {
        let fx = Fixture::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for t in [1, 7, 25, 48] {
            let x = standard_normal(&mut rng, 2);
            let up = guidance_step(
                fx.den(),
                &affinity(),
                2,
                &x,
                t,
                0.2,
                0.5,
                Direction::Increase,
            )
            .unwrap();
            let down = guidance_step(
                fx.den(),
                &affinity(),
                2,
                &x,
                t,
                0.2,
                0.5,
                Direction::Decrease,
            )
            .unwrap();
            assert!(up
                .iter()
                .zip(&down)
                .all(|(a, b)| a.to_bits() == (-b).to_bits()));
        }
    }

    #[test]
    fn guidance_gradient_matches_finite_differences_of_squared_deficit() {
        let fx = Fixture::new();
        let model = affinity();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for t in [2, 10, 20, 30] {
            let x = standard_normal(&mut rng, 2);
            let (eta, delta) = (0.2, 0.5);
            let r_high = stepwise_reward(fx.den(), &model, 1, &x, t).unwrap() + delta;
            let fd = finite_diff_gradient(
                |p| (r_high - stepwise_reward(fx.den(), &model, 1, p, t).unwrap()).powi(2),
                &x,
                1e-5,
            )
            .unwrap();
            let step =
                guidance_step(fx.den(), &model, 1, &x, t, eta, delta, Direction::Increase).unwrap();
            let implied: Vec<f64> = step.iter().map(|s| -s / eta).collect();
            assert!(relative_error(&implied, &fd) < 1e-4, "t={t}");
        }
    }

    #[test]
    fn blackbox_reward_is_rejected_then_falls_back() {
        let fx = Fixture::new();
        let model = affinity().with_kind(RewardKind::Blackbox);
        let x = [0.1, 0.2];
        assert!(matches!(
            guide_sample(fx.den(), &model, 0, &x, 5, 0.2, 0.5, Direction::Increase),
            Err(Error::GradientUnavailable)
        ));
        let g = guided_winner(fx.den(), &model, 0, &x, 5, 0.2, 0.5).unwrap();
        assert!(!g.accepted && g.state == x.to_vec());
    }

    #[test]
    fn accept_reject_rule() {
        let fx = Fixture::new();
        let model = affinity();
        let x = [0.3, 0.1];
        let zero = guided_winner(fx.den(), &model, 0, &x, 0, 0.0, 0.5).unwrap();
        assert!(!zero.accepted && zero.state == x.to_vec());
        let nominal = guided_winner(fx.den(), &model, 0, &x, 0, 0.2, 0.5).unwrap();
        assert!(nominal.accepted && nominal.reward_after > nominal.reward_before);
        // At t = 0 the step is 2ηδ∇r; a huge η jumps far past the target.
        let overshoot = guided_winner(fx.den(), &model, 0, &x, 0, 1e3, 0.5).unwrap();
        assert!(!overshoot.accepted && overshoot.state == x.to_vec());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for i in 0..50 {
            let x = standard_normal(&mut rng, 2);
            let t = [1, 5, 20, 40][i % 4];
            let g = guided_winner(fx.den(), &model, i % 8, &x, t, 0.2, 0.5).unwrap();
            assert!(g.reward_after >= g.reward_before);
            assert_eq!(
                g.reward_after,
                stepwise_reward(fx.den(), &model, i % 8, &g.state, t).unwrap()
            );
        }
    }

    #[test]
    fn constant_reward_gives_zero_ratios() {
        let fx = Fixture::new();
        let grid = InferenceGrid::uniform(50, 20).unwrap();
        let rows = efficacy_study(
            fx.den(),
            &grid,
            &ConstantReward(0.4),
            &[0, 1],
            &[20, 4],
            10,
            0.2,
            0.5,
            0,
        )
        .unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.ratio == 0.0 && r.n == 10));
    }

    #[test]
    fn guided_winner_gradient_decomposes() {
        let model = affinity();
        for id in 0..10 {
            let inst = random_instance(21, id, true).unwrap();
            let (pp, pref, sched, cfg) = (&inst.pp, &inst.pref, &inst.sched, &inst.cfg);
            // Guidance on the instance's own network at the winner's step.
            let den = Denoiser::new(pp.current(), pp.spec(), sched);
            let step = guidance_step(
                den,
                &model,
                pref.condition,
                &pref.winner,
                pref.t_prev,
                0.2,
                0.5,
                Direction::Increase,
            )
            .unwrap();
            let plus: Vec<f64> = pref.winner.iter().zip(&step).map(|(a, s)| a + s).collect();
            let guided = PreferencePair {
                winner: plus,
                ..pref.clone()
            };
            let direct = analytic_grad_tailorpo(pp, &guided, sched, cfg).unwrap();
            let dir: Vec<f64> = (0..2)
                .map(|i| (pref.winner[i] - pref.loser[i]) + step[i])
                .collect();
            let (decomposed, _) = tailorpo_grad_along(pp, &guided, sched, cfg, &dir).unwrap();
            assert!(relative_error(&direct, &decomposed) <= 1e-10);
        }
    }
}
