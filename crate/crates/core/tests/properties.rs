use proptest::prelude::*;

use ergodic_smp::config::{parse_config, to_toml, ControlSpec, RunConfig};
use ergodic_smp::forward::{simulate_state, TimeGrid};
use ergodic_smp::model::{ControlLaw, ConvexSet, ModelConfig, ModelSpec};
use ergodic_smp::smp::{grad_u_hamiltonian, hamiltonian};

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn boxes() -> impl Strategy<Value = ConvexSet> {
    prop::collection::vec((-5.0..5.0f64, 0.0..5.0f64), 1..4).prop_map(|b| ConvexSet::Box {
        lower: b.iter().map(|(lo, _)| *lo).collect(),
        upper: b.iter().map(|(lo, w)| lo + w).collect(),
    })
}

fn balls() -> impl Strategy<Value = ConvexSet> {
    (prop::collection::vec(-3.0..3.0f64, 1..4), 0.0..4.0f64)
        .prop_map(|(center, radius)| ConvexSet::Ball { center, radius })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn projection_is_idempotent_and_nonexpansive(
        set in prop_oneof![boxes(), balls()],
        raw in prop::collection::vec((-20.0..20.0f64, -20.0..20.0f64), 3),
    ) {
        let l = set.dim();
        let a: Vec<f64> = raw.iter().take(l).map(|r| r.0).collect();
        let b: Vec<f64> = raw.iter().take(l).map(|r| r.1).collect();
        let (pa, pb) = (set.project(&a), set.project(&b));
        prop_assert!(set.contains(&pa, 1e-9));
        prop_assert!(dist(&set.project(&pa), &pa) <= 1e-12);
        prop_assert!(dist(&pa, &pb) <= dist(&a, &b) + 1e-12);
    }

    #[test]
    fn control_laws_stay_in_the_set(gain in -50.0..50.0f64, offset in -50.0..50.0f64, x in -100.0..100.0f64) {
        let set = ConvexSet::interval(-5.0, 5.0);
        let law = ControlLaw::affine(&set, 1, vec![gain], vec![offset]).unwrap();
        let u = law.eval_vec(0.0, &[x]);
        prop_assert!(set.contains(&u, 0.0));
        prop_assert!(set.contains(&law.negated().eval_vec(0.0, &[x]), 0.0));
    }

    #[test]
    fn control_gradient_matches_differences(
        x in -3.0..3.0f64, u in -3.0..3.0f64, p in -3.0..3.0f64, q in -3.0..3.0f64, cubic in any::<bool>(),
    ) {
        let m = if cubic { ModelSpec::cubic1() } else { ModelSpec::lq1() };
        let g = grad_u_hamiltonian(&m, &[x], &[u], &[p], &[q])[0];
        let h = 1e-5;
        let fd = (hamiltonian(&m, &[x], &[u + h], &[p], &[q]) - hamiltonian(&m, &[x], &[u - h], &[p], &[q])) / (2.0 * h);
        prop_assert!((fd - g).abs() <= 1e-6 * g.abs().max(1.0));
    }

    #[test]
    fn config_round_trip_is_exact(
        a in -10.0..-0.1f64, b in -5.0..5.0f64, sigma in 0.0..3.0f64, r in 0.1..4.0f64,
        dt in 1e-4..0.1f64, gain in -2.0..2.0f64, seed in 0..=i64::MAX as u64,
    ) {
        let mut c = ModelConfig::lq1();
        c.a = vec![vec![a]];
        c.b = vec![vec![b]];
        c.sigma = vec![vec![sigma]];
        c.r = vec![vec![r]];
        let model = ModelSpec::new(c).unwrap();
        let run = RunConfig {
            seed: Some(seed),
            dt,
            horizon: dt * 1000.0,
            control: ControlSpec::Affine { gain: vec![vec![gain]], offset: None },
            ..RunConfig::default()
        };
        run.validate(&model).unwrap();
        let text = to_toml(&model, &run).unwrap();
        let (m2, run2) = parse_config(&text).unwrap();
        prop_assert_eq!(m2.config(), &model.config().normalized());
        prop_assert_eq!(&run2, &run);
        prop_assert_eq!(to_toml(&m2, &run2).unwrap(), text);
    }

    #[test]
    fn seeds_beyond_toml_integers_are_rejected(seed in (i64::MAX as u64 + 1)..=u64::MAX) {
        let model = ModelSpec::lq1();
        let run = RunConfig { seed: Some(seed), ..RunConfig::default() };
        prop_assert!(run.validate(&model).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn simulation_depends_only_on_seed_and_path(seed in any::<u64>(), paths in 1usize..40) {
        let m = ModelSpec::cubic1();
        let u = ControlLaw::linear_feedback(m.control_set(), 0.5);
        let grid = TimeGrid::new(0.01, 50).unwrap();
        let small = simulate_state(&m, &u, &[0.5], grid, paths, seed).unwrap();
        let large = simulate_state(&m, &u, &[0.5], grid, paths + 7, seed).unwrap();
        for j in 0..paths {
            for k in 0..=grid.steps {
                prop_assert_eq!(small.state(j, k), large.state(j, k));
            }
        }
    }
}
