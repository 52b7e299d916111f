use proptest::prelude::*;
use tailorpo_core::harness::{energy_distance, Method, RunConfig};
use tailorpo_core::prefopt::{clip_grad_norm, dpo_loss, preference_weight};

fn points(n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 2), 1..n)
}

proptest! {
    #[test]
    fn energy_distance_is_symmetric_and_nonnegative(a in points(12), b in points(12)) {
        let ab = energy_distance(&a, &b);
        let ba = energy_distance(&b, &a);
        prop_assert!((ab - ba).abs() <= 1e-12 * (1.0 + ab.abs()));
        prop_assert!(ab >= -1e-12);
        prop_assert!(energy_distance(&a, &a).abs() < 1e-12);
    }

    #[test]
    fn dpo_loss_stays_finite_for_extreme_margins(m in -1e6..1e6f64, beta in 0.01..10.0f64) {
        let loss = dpo_loss(m, 0.0, 0.0, 0.0, beta);
        prop_assert!(loss.is_finite() && loss >= 0.0);
        let mirrored = dpo_loss(-m, 0.0, 0.0, 0.0, beta);
        // softplus(-h) - softplus(h) = -h
        prop_assert!((loss - mirrored + beta * m).abs() <= 1e-9 * (1.0 + (beta * m).abs()));
        let f = preference_weight(beta * m, beta);
        prop_assert!(f.is_finite() && (0.0..=beta).contains(&f));
    }

    #[test]
    fn clipping_bounds_the_norm_and_keeps_direction(g in prop::collection::vec(-1e3..1e3f64, 1..40), max in 0.1..50.0f64) {
        let mut clipped = g.clone();
        let norm = clip_grad_norm(&mut clipped, max);
        let after = clipped.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(after <= max * (1.0 + 1e-12) || after <= norm);
        if norm <= max {
            prop_assert_eq!(&clipped, &g);
        } else {
            for (a, b) in clipped.iter().zip(&g) {
                prop_assert!((a * norm / max - b).abs() <= 1e-9 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn config_round_trips_through_toml(seed in 0..=i64::MAX as u64, budget in 1usize..10_000, lr in 1e-6..1e-1f64, m in 0usize..4) {
        let method = [Method::Tailorpo, Method::TailorpoG, Method::D3po, Method::PolicyGradient][m];
        let mut cfg = RunConfig { seed, sample_budget: budget, method, ..RunConfig::default() };
        cfg.prefopt.learning_rate = lr;
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn seeds_outside_the_toml_range_are_rejected(seed in i64::MAX as u64 + 1..=u64::MAX) {
        let cfg = RunConfig { seed, ..RunConfig::default() };
        prop_assert!(cfg.validate().is_err());
    }
}
