//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Runs as a plain binary so the lines always print.

mod common;

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::Rng;
use tailorpo_core::diffusion::{sample_trajectory, GaussianMixture};
use tailorpo_core::guidance::{efficacy_study, Direction};
use tailorpo_core::harness::{
    final_evaluation, finetune, inconsistency_study, pretrain_checkpoint, sample_finals, studies,
    Method, RunConfig, RunStatus,
};
use tailorpo_core::nnet::{params_digest, Checkpoint};
use tailorpo_core::prefopt::gradcheck::{self, random_instance};
use tailorpo_core::prefopt::{
    analytic_grad_tailorpo, disturbance_demo, pair_terms, policy_mean, rank_by_reward, sgd_update,
    tailorpo_loss_indicator, PolicyPair, PrefOptConfig, PreferencePair,
};
use tailorpo_core::reward::{jensen_gap_study, median_rel_err_by_step, Denoiser};
use tailorpo_core::rng::task_rng;

const GRADCHECK_INSTANCES: usize = 100;
const GRADCHECK_TOL: f64 = 1e-4;
const GRADCHECK_BUDGET: Duration = Duration::from_secs(120);
const INDICATOR_INSTANCES: usize = 1000;
const INDICATOR_TOL: f64 = 1e-12;
const DIRECTION_INSTANCES: usize = 100;
const DIRECTION_LR: f64 = 1e-4;
const DISTURBANCE_SHRINK: f64 = 5.0;
const EFFICACY_ETA: f64 = 0.2;
const EFFICACY_DELTA: f64 = 0.5;
const EFFICACY_SAMPLES: usize = 100;
const EFFICACY_MIN_RATIO: f64 = 0.8;
const EFFICACY_BUDGET: Duration = Duration::from_secs(300);
const JENSEN_STEPS: [usize; 4] = [12, 8, 4, 1];
const JENSEN_ROLLOUTS: usize = 100;
const JENSEN_STATES: usize = 20;
const CONFLICT_PAIRS: usize = 200;
const CONFLICT_ROLLOUTS: usize = 100;
const ORDERING_SEEDS: [u64; 3] = [0, 1, 2];
const ORDERING_SE_MULTIPLE: f64 = 2.0;
const RUN_BUDGET: Duration = Duration::from_secs(30 * 60);
const MOMENT_SAMPLES: usize = 10_000;
const MOMENT_REL_TOL: f64 = 0.10;

type Check = fn() -> Result<(bool, String), String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

fn gradient_oracles() -> Result<(bool, String), String> {
    let start = Instant::now();
    let rows = gradcheck::run_suite(GRADCHECK_INSTANCES, 2024).map_err(err)?;
    let elapsed = start.elapsed();
    let max_fd = rows.iter().map(|r| r.rel_err_fd).fold(0.0, f64::max);
    let max_tape = rows.iter().map(|r| r.rel_err_tape).fold(0.0, f64::max);
    let failed = rows
        .iter()
        .filter(|r| !(r.rel_err_fd < GRADCHECK_TOL && r.rel_err_tape < GRADCHECK_TOL))
        .count();
    let per_identity = gradcheck::Identity::ALL
        .iter()
        .all(|id| rows.iter().filter(|r| r.identity == *id).count() >= GRADCHECK_INSTANCES);
    Ok((
        failed == 0 && per_identity && elapsed < GRADCHECK_BUDGET,
        format!(
            "{} checks over 4 identities, max rel err fd {max_fd:.1e} tape {max_tape:.1e} (< {GRADCHECK_TOL:e}), {failed} failed, {:.1}s",
            rows.len(),
            elapsed.as_secs_f64()
        ),
    ))
}

fn indicator_equivalence() -> Result<(bool, String), String> {
    let mut worst = 0.0f64;
    for id in 0..INDICATOR_INSTANCES {
        let inst = random_instance(77, id, true).map_err(err)?;
        let p = &inst.pref;
        let mut rng = task_rng(78, &[id as u64]);
        let (r0, r1) = if id % 10 == 0 {
            let r = rng.gen::<f64>();
            (r, r)
        } else {
            (rng.gen::<f64>(), rng.gen::<f64>())
        };
        let (s0, s1) = if rng.gen_bool(0.5) {
            (&p.winner, &p.loser)
        } else {
            (&p.loser, &p.winner)
        };
        let ind = tailorpo_loss_indicator(
            &inst.pp,
            &inst.sched,
            p.condition,
            p.t,
            p.t_prev,
            &p.parent_w,
            s0,
            s1,
            (r0, r1),
            &inst.cfg,
        )
        .map_err(err)?;
        let ranked = rank_by_reward(s0, r0, s1, r1, inst.cfg.tie_break);
        let pref = PreferencePair {
            winner: ranked.winner,
            loser: ranked.loser,
            reward_w: ranked.reward_w,
            reward_l: ranked.reward_l,
            ..p.clone()
        };
        let loss = pair_terms(&inst.pp, &pref, &inst.sched, inst.cfg.beta)
            .map_err(err)?
            .loss;
        worst = worst.max((ind - loss).abs());
    }
    Ok((worst <= INDICATOR_TOL, format!("{INDICATOR_INSTANCES} instances, max |indicator - ranked| = {worst:.1e} (<= {INDICATOR_TOL:e})")))
}

fn update_direction() -> Result<(bool, String), String> {
    let mut ok = 0;
    let mut min_ip = f64::INFINITY;
    for id in 0..DIRECTION_INSTANCES {
        let inst = random_instance(91, id, true).map_err(err)?;
        let p = &inst.pref;
        let g = analytic_grad_tailorpo(&inst.pp, p, &inst.sched, &inst.cfg).map_err(err)?;
        let updated = sgd_update(inst.pp.current(), &g, DIRECTION_LR).map_err(err)?;
        let after = inst
            .pp
            .with_current_values(updated.values().to_vec())
            .map_err(err)?;
        let m0 = policy_mean(
            &inst.pp,
            &inst.sched,
            p.condition,
            p.t,
            p.t_prev,
            &p.parent_w,
        )
        .map_err(err)?;
        let m1 = policy_mean(&after, &inst.sched, p.condition, p.t, p.t_prev, &p.parent_w)
            .map_err(err)?;
        let ip: f64 = (0..m0.len())
            .map(|i| (m1[i] - m0[i]) * (p.winner[i] - p.loser[i]))
            .sum();
        min_ip = min_ip.min(ip);
        ok += usize::from(ip >= 0.0);
    }
    Ok((ok == DIRECTION_INSTANCES, format!("{ok}/{DIRECTION_INSTANCES} instances with <dmu, x_w - x_l> >= 0 at lr {DIRECTION_LR:e}, min {min_ip:.2e}")))
}

fn disturbance() -> Result<(bool, String), String> {
    let pre = common::pretrained();
    let cfg = RunConfig::default();
    let (sched, grid) = (cfg.sched().map_err(err)?, cfg.grid().map_err(err)?);
    let pp = PolicyPair::from_reference(pre.spec.clone(), pre.params.clone()).map_err(err)?;
    let k = 12;
    let (t, tp) = (grid.timestep(k), grid.timestep(k - 1));
    let c = 2;
    let traj = sample_trajectory(
        &pre.params,
        &pre.spec,
        &sched,
        &grid,
        c,
        &mut task_rng(4, &[0]),
    )
    .map_err(err)?;
    let x_t = &traj.states[grid.len() - k];
    let prefs = PrefOptConfig::default();
    let run = |scale: f64| {
        disturbance_demo(
            &pp,
            &sched,
            c,
            t,
            tp,
            x_t,
            &[scale, -0.5 * scale],
            DIRECTION_LR,
            &prefs,
        )
    };
    let coarse = run(1e-2).map_err(err)?;
    let fine = run(1e-3).map_err(err)?;
    let shrink = coarse.approx_rel_error / fine.approx_rel_error;
    Ok((
        coarse.inner_product > 0.0 && fine.inner_product > 0.0 && shrink >= DISTURBANCE_SHRINK,
        format!(
            "inner products {:.2e}, {:.2e} (> 0); approximation error {:.2e} -> {:.2e}, shrink {shrink:.1}x (>= {DISTURBANCE_SHRINK}x)",
            coarse.inner_product, fine.inner_product, coarse.approx_rel_error, fine.approx_rel_error
        ),
    ))
}

fn guidance_efficacy() -> Result<(bool, String), String> {
    let pre = common::pretrained();
    let cfg = RunConfig::default();
    let (sched, grid, model) = (
        cfg.sched().map_err(err)?,
        cfg.grid().map_err(err)?,
        cfg.reward_model().map_err(err)?,
    );
    let den = Denoiser::new(&pre.params, &pre.spec, &sched);
    let steps = cfg.fine_tune_descending();
    let start = Instant::now();
    let rows = efficacy_study(
        den,
        &grid,
        &model,
        &cfg.conditions,
        &steps,
        EFFICACY_SAMPLES,
        EFFICACY_ETA,
        EFFICACY_DELTA,
        5,
    )
    .map_err(err)?;
    let elapsed = start.elapsed();
    let ratios = |d: Direction| {
        rows.iter()
            .filter(|r| r.direction == d)
            .map(|r| r.ratio)
            .collect::<Vec<_>>()
    };
    let (up, down) = (ratios(Direction::Increase), ratios(Direction::Decrease));
    let floor = up.iter().chain(&down).all(|&r| r >= EFFICACY_MIN_RATIO);
    let trend = up.last() >= up.first() && down.last() >= down.first();
    Ok((
        floor && trend && elapsed < EFFICACY_BUDGET,
        format!("steps {steps:?}: increase {up:?}, decrease {down:?} (>= {EFFICACY_MIN_RATIO}, last >= first), {:.1}s", elapsed.as_secs_f64()),
    ))
}

struct MethodRuns {
    rewards: Vec<f64>,
    finetuned_seed0: Checkpoint,
    slowest: Duration,
    completed: bool,
}

fn ordering_runs() -> &'static Result<Vec<(Method, MethodRuns)>, String> {
    static CELL: OnceLock<Result<Vec<(Method, MethodRuns)>, String>> = OnceLock::new();
    CELL.get_or_init(|| {
        let pre = common::pretrained();
        [Method::TailorpoG, Method::Tailorpo, Method::D3po]
            .into_iter()
            .map(|method| {
                let mut runs = MethodRuns {
                    rewards: Vec::new(),
                    finetuned_seed0: pre.clone(),
                    slowest: Duration::ZERO,
                    completed: true,
                };
                for seed in ORDERING_SEEDS {
                    let cfg = RunConfig {
                        method,
                        seed,
                        ..RunConfig::default()
                    };
                    let start = Instant::now();
                    let out = finetune(&cfg, pre).map_err(err)?;
                    runs.slowest = runs.slowest.max(start.elapsed());
                    runs.completed &= out.status == RunStatus::Completed;
                    let report = final_evaluation(&cfg, &out.checkpoint.params, &cfg.conditions)
                        .map_err(err)?;
                    runs.rewards.extend(report.rewards);
                    if seed == ORDERING_SEEDS[0] {
                        runs.finetuned_seed0 = out.checkpoint;
                    }
                }
                Ok((method, runs))
            })
            .collect()
    })
}

fn stepwise_estimator() -> Result<(bool, String), String> {
    let runs = ordering_runs().as_ref().map_err(Clone::clone)?;
    let cfg = RunConfig::default();
    let (sched, grid, model) = (
        cfg.sched().map_err(err)?,
        cfg.grid().map_err(err)?,
        cfg.reward_model().map_err(err)?,
    );
    let checkpoints = [
        ("pretrained", common::pretrained()),
        ("tailorpo-g", &runs[0].1.finetuned_seed0),
    ];
    let mut pass = true;
    let mut detail = Vec::new();
    for (name, ckpt) in checkpoints {
        for c in [0, 3] {
            let den = Denoiser::new(&ckpt.params, &ckpt.spec, &sched);
            let rows = jensen_gap_study(
                den,
                &grid,
                &model,
                c,
                &JENSEN_STEPS,
                JENSEN_STATES,
                JENSEN_ROLLOUTS,
                11,
            )
            .map_err(err)?;
            let med = median_rel_err_by_step(&rows, &JENSEN_STEPS);
            pass &= med.windows(2).all(|w| w[1].1 < w[0].1);
            let cells: Vec<String> = med.iter().map(|(_, e)| format!("{e:.1e}")).collect();
            detail.push(format!("{name} c{c} [{}]", cells.join(" > ")));
        }
    }
    Ok((
        pass,
        format!(
            "median rel err at k={JENSEN_STEPS:?}, {JENSEN_ROLLOUTS} rollouts: {}",
            detail.join("; ")
        ),
    ))
}

fn inconsistency() -> Result<(bool, String), String> {
    let pre = common::pretrained();
    let cfg = RunConfig::default();
    let det =
        inconsistency_study(pre, &cfg, 0.0, CONFLICT_PAIRS, CONFLICT_ROLLOUTS, 21).map_err(err)?;
    let sto =
        inconsistency_study(pre, &cfg, 1.0, CONFLICT_PAIRS, CONFLICT_ROLLOUTS, 21).map_err(err)?;
    let zero = det.iter().all(|r| r.conflicts == 0);
    let mid: Vec<_> = sto
        .iter()
        .filter(|r| r.step != sto[0].step && r.step != sto[sto.len() - 1].step)
        .collect();
    let positive = !mid.is_empty() && mid.iter().all(|r| r.conflicts > 0);
    let fr = |rows: &[studies::ConflictRow]| {
        rows.iter()
            .map(|r| format!("{:.3}", r.fraction))
            .collect::<Vec<_>>()
            .join(" ")
    };
    Ok((
        zero && positive,
        format!(
            "{CONFLICT_PAIRS} pairs at k={:?}: eta=0 [{}], eta=1 [{}]",
            sto.iter().map(|r| r.step).collect::<Vec<_>>(),
            fr(&det),
            fr(&sto)
        ),
    ))
}

fn ordering() -> Result<(bool, String), String> {
    let runs = ordering_runs().as_ref().map_err(Clone::clone)?;
    let cfg = RunConfig::default();
    let base =
        final_evaluation(&cfg, &common::pretrained().params, &cfg.conditions).map_err(err)?;
    let stats: Vec<(&str, f64, f64)> = runs
        .iter()
        .map(|(m, r)| {
            let (mean, se) = mean_se(&r.rewards);
            (m.name(), mean, se)
        })
        .chain(std::iter::once({
            let (mean, se) = mean_se(&base.rewards);
            ("pretrained", mean, se)
        }))
        .collect();
    let mut pass = runs
        .iter()
        .all(|(_, r)| r.completed && r.slowest < RUN_BUDGET);
    let mut gaps = Vec::new();
    for (i, w) in stats.windows(2).enumerate() {
        let (gap, se) = (w[0].1 - w[1].1, (w[0].2.powi(2) + w[1].2.powi(2)).sqrt());
        let need = if i == 0 {
            0.0
        } else {
            ORDERING_SE_MULTIPLE * se
        };
        pass &= gap >= need;
        gaps.push(format!(
            "{} - {} = {gap:.4} (need >= {need:.4})",
            w[0].0, w[1].0
        ));
    }
    let means: Vec<String> = stats
        .iter()
        .map(|(n, m, s)| format!("{n} {m:.4}±{s:.1e}"))
        .collect();
    let slowest = runs
        .iter()
        .map(|(_, r)| r.slowest)
        .max()
        .unwrap_or_default();
    Ok((
        pass,
        format!(
            "{}; {}; slowest run {:.0}s",
            means.join(", "),
            gaps.join(", "),
            slowest.as_secs_f64()
        ),
    ))
}

fn determinism() -> Result<(bool, String), String> {
    let mut cfg = RunConfig::default();
    cfg.pretrain.steps = 300;
    cfg.sample_budget = 120;
    cfg.eval = tailorpo_core::harness::config::EvalConfig {
        every: 40,
        samples: 64,
        drift_samples: 16,
        final_samples: 32,
        ..cfg.eval
    };
    let (a, _) = pretrain_checkpoint(&cfg).map_err(err)?;
    let (b, _) = pretrain_checkpoint(&cfg).map_err(err)?;
    let mut same = a.to_bytes().map_err(err)? == b.to_bytes().map_err(err)?;
    let mut checked = 1;
    for method in Method::ALL {
        let cfg = RunConfig {
            method,
            seed: 9,
            ..cfg.clone()
        };
        let mut files = Vec::new();
        for _ in 0..2 {
            let out = finetune(&cfg, &a).map_err(err)?;
            let mut csv = Vec::new();
            out.log.write_csv(&mut csv).map_err(err)?;
            files.push((csv, out.checkpoint.to_bytes().map_err(err)?));
        }
        same &= files[0] == files[1];
        checked += 2;
    }
    let mut tables = Vec::new();
    for _ in 0..2 {
        let rows = inconsistency_study(&a, &cfg, 1.0, 8, 4, 3).map_err(err)?;
        let mut buf = Vec::new();
        studies::write_rows(&rows, &mut buf).map_err(err)?;
        tables.push(buf);
    }
    same &= tables[0] == tables[1];
    checked += 1;
    Ok((same, format!("{checked} artifacts (pretrained checkpoint, per-method metric CSV and checkpoint, study table) byte-identical on rerun: {same}")))
}

fn moments() -> Result<(bool, String), String> {
    let pre = common::pretrained();
    let cfg = RunConfig::default();
    let (sched, grid) = (cfg.sched().map_err(err)?, cfg.grid().map_err(err)?);
    let data = GaussianMixture::new(cfg.data.clone()).map_err(err)?;
    let mut worst = 0.0f64;
    for c in 0..data.modes() {
        let xs = sample_finals(&pre.params, &pre.spec, &sched, &grid, c, MOMENT_SAMPLES, 10)
            .map_err(err)?;
        let m = data.mode_mean(c);
        let mean: Vec<f64> = (0..2)
            .map(|i| xs.iter().map(|x| x[i]).sum::<f64>() / xs.len() as f64)
            .collect();
        let dev = ((mean[0] - m[0]).powi(2) + (mean[1] - m[1]).powi(2)).sqrt();
        let norm = (m[0] * m[0] + m[1] * m[1]).sqrt();
        worst = worst.max(dev / norm);
    }
    Ok((
        worst <= MOMENT_REL_TOL,
        format!(
            "{MOMENT_SAMPLES} samples per condition, worst |mean - mode| / |mode| = {worst:.4} (<= {MOMENT_REL_TOL}), digest {}",
            &params_digest(&pre.params)[..12]
        ),
    ))
}

fn main() {
    let checks: [(u8, &str, Check); 10] = [
        (10, "moment sanity", moments),
        (1, "gradient oracles", gradient_oracles),
        (2, "indicator-form equivalence", indicator_equivalence),
        (3, "update direction", update_direction),
        (4, "disturbance", disturbance),
        (5, "guidance efficacy", guidance_efficacy),
        (6, "step-wise reward estimator", stepwise_estimator),
        (7, "preference inconsistency", inconsistency),
        (8, "end-to-end ordering", ordering),
        (9, "determinism", determinism),
    ];
    let mut gate_open = true;
    let mut failed = Vec::new();
    for (id, name, check) in checks {
        let start = Instant::now();
        let (pass, detail) = if (5..=8).contains(&id) && !gate_open {
            (false, "skipped: moment sanity gate failed".to_string())
        } else {
            check().unwrap_or_else(|e| (false, format!("error: {e}")))
        };
        if id == 10 {
            gate_open = pass;
        }
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {id:>2} {verdict} [{name}] {detail} ({:.1}s)",
            start.elapsed().as_secs_f64()
        );
        if !pass {
            failed.push(id);
        }
    }
    println!("{}/10 criteria passed", 10 - failed.len());
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
