//! Randomised cross-check of every closed-form gradient against central
//! finite differences and the reverse-mode tape.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use super::{
    analytic_grad_d3po, analytic_grad_dpo, analytic_grad_tailorpo, d3po_loss, log_prob,
    log_prob_grad, log_prob_tape, pair_terms, policy_mean, tailorpo_loss, PolicyPair,
    PrefOptConfig, PreferencePair,
};
use crate::diffusion::{InferenceGrid, NoiseSchedule, ScheduleConfig};
use crate::error::Result;
use crate::nnet::{finite_diff_gradient, relative_error, Activation, NetworkSpec};
use crate::rng::task_rng;

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Identity {
    /// ∇_θ log π = (∂μ/∂θ)ᵀ(x − μ)/σ².
    LogProb,
    /// −f(∇log π_w − ∇log π_l) on a two-parent pair.
    Dpo,
    /// Two-VJP trajectory-level form.
    D3po,
    /// Single-VJP shared-parent form.
    TailorPo,
}

impl Identity {
    pub const ALL: [Identity; 4] = [
        Identity::LogProb,
        Identity::Dpo,
        Identity::D3po,
        Identity::TailorPo,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckRow {
    pub identity: Identity,
    pub instance: usize,
    pub rel_err_fd: f64,
    pub rel_err_tape: f64,
    pub f_t: f64,
    pub h: f64,
}

impl GradcheckRow {
    pub fn passed(&self) -> bool {
        self.rel_err_fd < TOLERANCE && self.rel_err_tape < TOLERANCE
    }
}

/// A small random network, schedule, policy pair and preference pair.
pub struct Instance {
    pub sched: NoiseSchedule,
    pub pp: PolicyPair,
    pub pref: PreferencePair,
    pub cfg: PrefOptConfig,
}

fn gaussian<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Draws instance `id` under `seed`; `shared` forces a common parent.
pub fn random_instance(seed: u64, id: usize, shared: bool) -> Result<Instance> {
    let mut rng = task_rng(seed, &[id as u64]);
    let layers = rng.gen_range(1..=2);
    let spec = NetworkSpec {
        input_dim: 2,
        hidden_widths: (0..layers).map(|_| rng.gen_range(3..=12)).collect(),
        time_steps: 50,
        num_conditions: 3,
        time_embedding_dim: 3,
        condition_embedding_dim: 2,
        activation: if rng.gen_bool(0.5) {
            Activation::Silu
        } else {
            Activation::Tanh
        },
    };
    let sched = NoiseSchedule::new(&ScheduleConfig {
        t_train: spec.time_steps,
        ..ScheduleConfig::default()
    })?;
    let base = spec.init(&mut rng);
    let cur: Vec<f64> = base
        .values()
        .iter()
        .zip(gaussian(&mut rng, base.len(), 0.3))
        .map(|(a, b)| a + b)
        .collect();
    let offset = gaussian(&mut rng, cur.len(), 0.1);
    let with_offset = |k: f64| -> Result<PolicyPair> {
        let refv = cur.iter().zip(&offset).map(|(a, b)| a + k * b).collect();
        PolicyPair::new(
            spec.clone(),
            base.with_values(cur.clone())?,
            base.with_values(refv)?,
        )
    };
    let mut pp = with_offset(1.0)?;

    let c = rng.gen_range(0..spec.num_conditions);
    // A stochastic transition of the default 20-step inference grid.
    let grid = InferenceGrid::uniform(spec.time_steps, 20)?;
    let k = rng.gen_range(2..=grid.len());
    let (t, t_prev) = (grid.timestep(k), grid.timestep(k - 1));
    let coef = sched.coefficients(t, t_prev)?;
    let parent_w = gaussian(&mut rng, 2, 1.0);
    let parent_l = if shared {
        parent_w.clone()
    } else {
        gaussian(&mut rng, 2, 1.0)
    };
    let mu_w = policy_mean(&pp, &sched, c, t, t_prev, &parent_w)?;
    let mu_l = policy_mean(&pp, &sched, c, t, t_prev, &parent_l)?;
    let winner = mu_w
        .iter()
        .zip(gaussian(&mut rng, 2, coef.sigma))
        .map(|(m, z)| m + z)
        .collect();
    let loser = mu_l
        .iter()
        .zip(gaussian(&mut rng, 2, coef.sigma))
        .map(|(m, z)| m + z)
        .collect();
    let cfg = PrefOptConfig {
        beta: rng.gen_range(0.5..2.0),
        ..PrefOptConfig::default()
    };
    let pref = PreferencePair {
        condition: c,
        t,
        t_prev,
        parent_w,
        parent_l,
        winner,
        loser,
        reward_w: 1.0,
        reward_l: 0.0,
        sigma_t: coef.sigma,
    };
    // Shrink the reference offset until the pair is out of the saturated
    // tail, where f underflows and no gradient is left to compare.
    let mut k = 1.0;
    while pair_terms(&pp, &pref, &sched, cfg.beta)?.h.abs() > 10.0 {
        k *= 0.5;
        pp = with_offset(k)?;
    }
    Ok(Instance {
        sched,
        pp,
        pref,
        cfg,
    })
}

fn loss_fd(inst: &Instance) -> Result<Vec<f64>> {
    let mut failure = None;
    let g = finite_diff_gradient(
        |p| match inst
            .pp
            .with_current_values(p.to_vec())
            .and_then(|pp| pair_terms(&pp, &inst.pref, &inst.sched, inst.cfg.beta))
        {
            Ok(terms) => terms.loss,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        },
        inst.pp.current().values(),
        FD_STEP,
    );
    match failure {
        Some(e) => Err(e),
        None => g,
    }
}

/// Runs one identity on one instance.
pub fn check(identity: Identity, seed: u64, id: usize) -> Result<GradcheckRow> {
    let inst = random_instance(seed, id, identity == Identity::TailorPo)?;
    let (pp, pref, sched, cfg) = (&inst.pp, &inst.pref, &inst.sched, &inst.cfg);
    let terms = pair_terms(pp, pref, sched, cfg.beta)?;
    let (analytic, numeric, taped) = match identity {
        Identity::LogProb => {
            let (c, t, tp) = (pref.condition, pref.t, pref.t_prev);
            let spec = pp.spec();
            let params = pp.current();
            let analytic =
                log_prob_grad(params, spec, sched, c, t, tp, &pref.parent_w, &pref.winner)?;
            let numeric = finite_diff_gradient(
                |p| {
                    let ps = params.with_values(p.to_vec()).expect("same layout");
                    log_prob(&ps, spec, sched, c, t, tp, &pref.parent_w, &pref.winner)
                        .unwrap_or(f64::NAN)
                },
                params.values(),
                FD_STEP,
            )?;
            let taped = log_prob_tape(params, spec, sched, c, t, tp, &pref.parent_w, &pref.winner)?
                .grad_params()?;
            (analytic, numeric, taped)
        }
        Identity::Dpo => {
            let analytic = analytic_grad_dpo(pp, pref, sched, cfg)?;
            (
                analytic,
                loss_fd(&inst)?,
                d3po_loss(pp, pref, sched, cfg)?.grad_params()?,
            )
        }
        Identity::D3po => {
            let analytic = analytic_grad_d3po(pp, pref, sched, cfg)?;
            (
                analytic,
                loss_fd(&inst)?,
                d3po_loss(pp, pref, sched, cfg)?.grad_params()?,
            )
        }
        Identity::TailorPo => {
            let analytic = analytic_grad_tailorpo(pp, pref, sched, cfg)?;
            (
                analytic,
                loss_fd(&inst)?,
                tailorpo_loss(pp, pref, sched, cfg)?.grad_params()?,
            )
        }
    };
    Ok(GradcheckRow {
        identity,
        instance: id,
        rel_err_fd: relative_error(&analytic, &numeric),
        rel_err_tape: relative_error(&analytic, &taped),
        f_t: terms.f,
        h: terms.h,
    })
}

/// Every identity on `instances` random draws; rows ordered by identity, then instance.
pub fn run_suite(instances: usize, seed: u64) -> Result<Vec<GradcheckRow>> {
    Identity::ALL
        .iter()
        .flat_map(|&id| (0..instances).map(move |i| (id, i)))
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(identity, i)| check(identity, seed, i))
        .collect()
}

pub fn write_rows<W: std::io::Write>(rows: &[GradcheckRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
