mod common;

use tailorpo_core::harness::{
    ablation_cells, ablation_sweep, final_evaluation, finetune, AblationAxis, Method, RunConfig,
    RunStatus,
};

#[test]
fn policy_gradient_improves_on_the_pretrained_model() {
    let pre = common::pretrained();
    let base = RunConfig {
        method: Method::PolicyGradient,
        ..RunConfig::default()
    };
    let baseline = final_evaluation(&base, &pre.params, &base.conditions)
        .unwrap()
        .pooled
        .mean;
    let mut rewards = Vec::new();
    for seed in 0..3 {
        let cfg = RunConfig {
            seed,
            ..base.clone()
        };
        let out = finetune(&cfg, pre).unwrap();
        assert_eq!(out.status, RunStatus::Completed);
        rewards.push(
            final_evaluation(&cfg, &out.checkpoint.params, &cfg.conditions)
                .unwrap()
                .pooled
                .mean,
        );
    }
    let mean = rewards.iter().sum::<f64>() / 3.0;
    assert!(
        mean > baseline,
        "policy gradient {mean} vs pretrained {baseline} ({rewards:?})"
    );
}

#[test]
fn every_step_count_cell_improves_on_the_pretrained_model() {
    let pre = common::pretrained();
    let base = RunConfig::default();
    let baseline = final_evaluation(&base, &pre.params, &base.conditions)
        .unwrap()
        .pooled;
    let cells = ablation_cells(&base, AblationAxis::Steps);
    let rows = ablation_sweep(pre, &cells, &[0]).unwrap();
    assert_eq!(
        rows.iter().map(|r| r.cell.as_str()).collect::<Vec<_>>(),
        ["steps=3", "steps=5", "steps=10"]
    );
    for r in &rows {
        assert!(r.completed);
        assert_eq!(r.pretrained_digest, rows[0].pretrained_digest);
        let se = (r.stderr.powi(2) + baseline.stderr.powi(2)).sqrt();
        assert!(
            r.mean_reward > baseline.mean + 5.0 * se,
            "{r:?} vs pretrained {}",
            baseline.mean
        );
    }
}
