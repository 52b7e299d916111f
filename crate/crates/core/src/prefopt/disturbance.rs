//! The two-parent disturbance: with distinct parents, the trajectory-level
//! gradient carries a (μ_l − μ_w) term that moves μ even when the winner is
//! already at its mean.

use super::{
    analytic_grad_d3po, eval_pair, policy_mean, sgd_update, PolicyPair, PrefOptConfig,
    PreferencePair,
};
use crate::diffusion::NoiseSchedule;
use crate::error::Result;
use crate::nnet::{backward, forward, relative_error};

#[derive(Clone, Debug, PartialEq)]
pub struct DisturbanceReport {
    /// False when the parameter Jacobians of μ at the two parents differ by
    /// 1% or more, in which case the single-Jacobian form is not expected
    /// to hold and the remaining fields are still filled for inspection.
    pub applicable: bool,
    pub jacobian_rel_diff: f64,
    pub exact_grad: Vec<f64>,
    pub approx_grad: Vec<f64>,
    /// ‖exact − approx‖ / max(‖exact‖, ‖approx‖).
    pub approx_rel_error: f64,
    /// μ_θ′(x^w_t) − μ_θ(x^w_t) after one step on the exact gradient.
    pub delta_mu: Vec<f64>,
    /// ⟨Δμ, μ(x^l_t) − μ(x^w_t)⟩.
    pub inner_product: f64,
}

/// Rows of ∂μ/∂θ at `x`, one per output coordinate.
fn mean_jacobian(
    pp: &PolicyPair,
    sched: &NoiseSchedule,
    c: usize,
    t: usize,
    t_prev: usize,
    x: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let coef = sched.coefficients(t, t_prev)?;
    let cache = forward(pp.current(), pp.spec(), x, t, c)?;
    (0..x.len())
        .map(|i| {
            let mut adj = vec![0.0; x.len()];
            adj[i] = coef.eps_coef;
            let mut row = vec![0.0; pp.current().len()];
            backward(pp.current(), pp.spec(), &cache, &adj, &mut row);
            Ok(row)
        })
        .collect()
}

/// Builds parents x_t and x_t + δx, sets winner = loser = μ(x_t), and
/// compares the exact two-parent gradient with its shared-Jacobian
/// approximation −(f/σ²)Jᵀ[(x^w − x^l) + (μ_l − μ_w)].
#[allow(clippy::too_many_arguments)]
pub fn disturbance_demo(
    pp: &PolicyPair,
    sched: &NoiseSchedule,
    c: usize,
    t: usize,
    t_prev: usize,
    x_t: &[f64],
    dx: &[f64],
    learning_rate: f64,
    cfg: &PrefOptConfig,
) -> Result<DisturbanceReport> {
    let coef = sched.coefficients(t, t_prev)?;
    let parent_l: Vec<f64> = x_t.iter().zip(dx).map(|(a, b)| a + b).collect();
    let mu_w = policy_mean(pp, sched, c, t, t_prev, x_t)?;
    let mu_l = policy_mean(pp, sched, c, t, t_prev, &parent_l)?;
    let pref = PreferencePair {
        condition: c,
        t,
        t_prev,
        parent_w: x_t.to_vec(),
        parent_l,
        winner: mu_w.clone(),
        loser: mu_w.clone(),
        reward_w: 0.0,
        reward_l: 0.0,
        sigma_t: coef.sigma,
    };

    let jw = mean_jacobian(pp, sched, c, t, t_prev, &pref.parent_w)?;
    let jl = mean_jacobian(pp, sched, c, t, t_prev, &pref.parent_l)?;
    let flat = |j: &[Vec<f64>]| j.concat();
    let jacobian_rel_diff = relative_error(&flat(&jl), &flat(&jw));

    let exact_grad = analytic_grad_d3po(pp, &pref, sched, cfg)?;
    let f = eval_pair(pp, &pref, sched, cfg.beta)?.terms.f;
    let k = -f / (coef.sigma * coef.sigma);
    // Same residual vector as the exact form, with the winner's Jacobian on both sides.
    let v: Vec<f64> = (0..x_t.len())
        .map(|i| (pref.winner[i] - pref.loser[i]) + (mu_l[i] - mu_w[i]))
        .collect();
    let mut approx_grad = vec![0.0; pp.current().len()];
    for (row, vi) in jw.iter().zip(&v) {
        for (a, r) in approx_grad.iter_mut().zip(row) {
            *a += k * vi * r;
        }
    }

    let updated = pp.with_current_values(
        sgd_update(pp.current(), &exact_grad, learning_rate)?
            .values()
            .to_vec(),
    )?;
    let mu_after = policy_mean(&updated, sched, c, t, t_prev, x_t)?;
    let delta_mu: Vec<f64> = mu_after.iter().zip(&mu_w).map(|(a, b)| a - b).collect();
    let inner_product = delta_mu
        .iter()
        .zip(mu_l.iter().zip(&mu_w))
        .map(|(d, (l, w))| d * (l - w))
        .sum();

    Ok(DisturbanceReport {
        applicable: jacobian_rel_diff < 0.01,
        jacobian_rel_diff,
        approx_rel_error: relative_error(&exact_grad, &approx_grad),
        exact_grad,
        approx_grad,
        delta_mu,
        inner_product,
    })
}
