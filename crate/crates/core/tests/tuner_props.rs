use std::collections::{BTreeMap, BTreeSet};

use packtrain::sim::profile;
use packtrain::tuner::{
    bracket_schedule, config_distance, hyperband, packed_hyperband, AuditEvent, AuditRecord, ConfigSpace,
    HyperbandParams, HyperparamConfig, Metric, PackContext, SimExecutor, Strategy as Packing, TrainTimeModel,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mlp() -> PackContext {
    let f = profile::builtin("mlp3").unwrap();
    PackContext { device: f.device().unwrap().clone(), model: f.model().unwrap().clone() }
}

fn strategy_of(i: usize, threshold: f64, m: usize) -> Packing {
    match i {
        0 => Packing::Original,
        1 => Packing::BatchSize,
        2 => Packing::Random { m },
        _ => Packing::Knn { threshold, metric: Metric::IndexSum },
    }
}

fn survivors(audit: &[AuditRecord]) -> BTreeMap<(u32, usize), BTreeSet<usize>> {
    let mut out: BTreeMap<(u32, usize), BTreeSet<usize>> = BTreeMap::new();
    for r in audit.iter().filter(|r| r.event == AuditEvent::Train) {
        out.entry((r.bracket, r.rung)).or_default().insert(r.config_id.unwrap());
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn index_metrics_are_metrics(a in 0usize..1056, b in 0usize..1056, c in 0usize..1056) {
        let space = ConfigSpace::standard();
        let (a, b, c) = (space.config(a).unwrap(), space.config(b).unwrap(), space.config(c).unwrap());
        for m in [Metric::IndexSum, Metric::Euclid] {
            let ab = config_distance(&a, &b, &m);
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, config_distance(&b, &a, &m));
            prop_assert_eq!(ab == 0.0, a.config_id == b.config_id);
            prop_assert!(config_distance(&a, &c, &m) <= ab + config_distance(&b, &c, &m) + 1e-12);
        }
    }

    #[test]
    fn train_time_metric_is_a_premetric(a in 0usize..1056, b in 0usize..1056) {
        let ctx = mlp();
        let m = Metric::TrainTime(TrainTimeModel { device: ctx.device, model: ctx.model });
        let space = ConfigSpace::standard();
        let (a, b) = (space.config(a).unwrap(), space.config(b).unwrap());
        let d = config_distance(&a, &b, &m);
        prop_assert!(d >= 0.0);
        prop_assert_eq!(d, config_distance(&b, &a, &m));
        prop_assert_eq!(config_distance(&a, &a, &m), 0.0);
    }

    #[test]
    fn grouping_is_a_feasible_partition(
        n in 0usize..120,
        seed in any::<u64>(),
        which in 0usize..4,
        threshold in 0.0f64..18.0,
        m in 1usize..10,
        capacity_gb in 2u64..20,
    ) {
        let mut ctx = mlp();
        ctx.device.memory_capacity = capacity_gb << 30;
        let configs = ConfigSpace::standard().sample(n, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let groups = strategy_of(which, threshold, m).pack(&configs, &ctx, &mut rng).unwrap();
        let mut seen: Vec<usize> = groups.iter().flat_map(|g| g.ids()).collect();
        seen.sort_unstable();
        let mut expected: Vec<usize> = configs.iter().map(|c| c.config_id).collect();
        expected.sort_unstable();
        prop_assert_eq!(seen, expected);
        for g in &groups {
            prop_assert!(!g.members.is_empty());
            prop_assert!(g.memory <= ctx.device.memory_capacity);
            let refs: Vec<&HyperparamConfig> = g.members.iter().collect();
            prop_assert!(ctx.fits(&refs));
            if which == 2 {
                prop_assert!(g.members.len() <= m);
            }
            if which == 1 {
                prop_assert!(g.members.iter().all(|c| c.batch_size == g.members[0].batch_size));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn budget_and_selection_are_packing_invariant(
        max_epochs in 1u64..40,
        eta in 2u64..5,
        seed in any::<u64>(),
        threshold in 0.0f64..18.0,
        m in 1usize..10,
    ) {
        let ctx = mlp();
        let space = ConfigSpace::standard();
        let params = HyperbandParams { max_epochs, eta };
        let expected: f64 = bracket_schedule(&params)
            .unwrap()
            .iter()
            .flat_map(|b| b.rungs.iter().map(|r| r.configs as f64 * r.epochs))
            .sum();
        let mut plain_exec = SimExecutor::new(ctx.device.clone(), ctx.model.clone(), seed);
        let plain = hyperband(&params, &space, &mut plain_exec, seed).unwrap();
        prop_assert!((plain.epochs_charged - expected).abs() <= 1e-9 * expected);
        for which in 0..4 {
            let s = strategy_of(which, threshold, m);
            let mut exec = SimExecutor::new(ctx.device.clone(), ctx.model.clone(), seed);
            let out = packed_hyperband(&params, &space, &s, &ctx, &mut exec, seed).unwrap();
            prop_assert!((out.epochs_charged - expected).abs() <= 1e-9 * expected);
            prop_assert_eq!(survivors(&out.audit), survivors(&plain.audit));
            prop_assert_eq!(out.best.map(|b| b.config.config_id), plain.best.as_ref().map(|b| b.config.config_id));
            let mut again = SimExecutor::new(ctx.device.clone(), ctx.model.clone(), seed);
            let rerun = packed_hyperband(&params, &space, &s, &ctx, &mut again, seed).unwrap();
            prop_assert_eq!(rerun.audit, out.audit);
        }
    }
}
