use std::f64::consts::PI;
use std::sync::Arc;

use dobcbf::dob::{advance, gamma_of, ErrorBound, ObserverConfig, ObserverState};
use dobcbf::dynamics::{BoxSet, DisturbanceFn, SystemModel};
use dobcbf::envs::{goal_reward, unicycle::wrap_angle, EpisodeRecord, PlantKind, REWARD_MAX, REWARD_MIN};
use dobcbf::harness::{ExperimentConfig, MetricsReport};
use dobcbf::hocbf::AffineConstraint;
use dobcbf::qp::{QpProblem, QpSolver, QpStatus};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn qp_from_seed(seed: u64) -> QpProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.random_range(1..=3);
    let half: Vec<f64> = (0..m).map(|_| rng.random_range(0.5..2.0)).collect();
    let bounds = BoxSet::symmetric(&half).unwrap();
    let l = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
    let weight = &l * l.transpose() + DMatrix::identity(m, m) * 0.2;
    let u_ref = DVector::from_fn(m, |j, _| rng.random_range(-1.5 * half[j]..1.5 * half[j]));
    let anchor = bounds.sample(&mut rng);
    let ineqs = (0..rng.random_range(0..=4))
        .map(|_| {
            let a = DVector::from_fn(m, |_, _| rng.random_range(-2.0..2.0));
            let b = a.dot(&anchor) - rng.random_range(0.0..1.0);
            AffineConstraint::new(a, b)
        })
        .collect();
    QpProblem::new(weight, u_ref, ineqs, bounds).unwrap()
}

fn scalar_model(box_radius: f64) -> SystemModel {
    SystemModel::new(
        Arc::new(|x: &DVector<f64>| -x.clone()),
        Arc::new(|_: &DVector<f64>| DMatrix::identity(1, 1)),
        BoxSet::symmetric(&[box_radius]).unwrap(),
        BoxSet::symmetric(&[1.0]).unwrap(),
        1.0,
        0.5,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn qp_solution_is_feasible_and_beats_random_feasible_points(seed in any::<u64>()) {
        let p = qp_from_seed(seed);
        let sol = QpSolver::default().solve(&p);
        prop_assert_eq!(sol.status, QpStatus::Optimal);
        prop_assert!(p.max_violation(&sol.u) <= 1e-9);
        let f = p.objective(&sol.u);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut checked = 0;
        for _ in 0..1000 {
            let v = p.bounds.sample(&mut rng);
            if p.max_violation(&v) <= 0.0 {
                checked += 1;
                prop_assert!(f <= p.objective(&v) + 1e-9, "random feasible point beats the solver");
            }
        }
        prop_assume!(checked > 0);
    }

    #[test]
    fn qp_returns_feasible_reference_exactly(seed in any::<u64>()) {
        let mut p = qp_from_seed(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        p.u_ref = p.bounds.sample(&mut rng);
        // Shift every row so the reference is feasible.
        for c in &mut p.ineqs {
            c.rhs = c.rhs.min(c.coeff.dot(&p.u_ref) - 1e-3);
        }
        let sol = QpSolver::default().solve(&p);
        prop_assert_eq!(sol.u, p.u_ref);
    }

    #[test]
    fn qp_is_deterministic(seed in any::<u64>()) {
        let p = qp_from_seed(seed);
        let a = QpSolver::default().solve(&p);
        let b = QpSolver::default().solve(&p);
        prop_assert_eq!(a.u, b.u);
        prop_assert_eq!(a.status, b.status);
        prop_assert_eq!(a.multipliers, b.multipliers);
    }

    #[test]
    fn clamp_lands_in_box_and_is_idempotent(
        radii in prop::collection::vec(0.01f64..10.0, 1..5),
        seed in any::<u64>(),
    ) {
        let b = BoxSet::symmetric(&radii).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = DVector::from_fn(radii.len(), |_, _| rng.random_range(-30.0..30.0));
        let c = b.clamp(&z);
        prop_assert!(b.contains(&c, 0.0));
        prop_assert_eq!(b.clamp(&c), c.clone());
        if b.contains(&z, 0.0) {
            prop_assert_eq!(c, z);
        }
    }

    #[test]
    fn wrapped_angle_is_principal_and_equivalent(a in -1e3f64..1e3) {
        let w = wrap_angle(a);
        prop_assert!(w > -PI - 1e-12 && w <= PI + 1e-12);
        let turns = (a - w) / (2.0 * PI);
        prop_assert!((turns - turns.round()).abs() < 1e-9);
    }

    #[test]
    fn reward_stays_in_range(
        px in -50.0f64..50.0, py in -50.0f64..50.0,
        u0 in -10.0f64..10.0, u1 in -10.0f64..10.0,
        w in 0.0f64..5.0,
    ) {
        let r = goal_reward([px, py], [1.0, -2.0], &DVector::from_vec(vec![u0, u1]), w);
        prop_assert!((REWARD_MIN..=REWARD_MAX).contains(&r));
    }

    #[test]
    fn gamma_grows_with_period(
        n in 1usize..8, eta in 0.01f64..10.0, theta in 0.01f64..10.0,
        gain in 0.1f64..1e3, t in 1e-5f64..0.1,
    ) {
        let g1 = gamma_of(n, eta, theta, gain, t);
        let g2 = gamma_of(n, eta, theta, gain, t * 1.5);
        prop_assert!(g1 >= 0.0);
        prop_assert!(g2 > g1);
    }

    #[test]
    fn estimate_is_constant_between_samples(c in -2.0f64..2.0, x0 in -1.5f64..1.5, u in -1.0f64..1.0) {
        let model = scalar_model(2.0);
        let d = DisturbanceFn::constant(DVector::from_element(1, c));
        let cfg = ObserverConfig::new(1.0, 0.01).unwrap();
        let mut obs = ObserverState::new(cfg, 1e-3, &DVector::from_element(1, x0)).unwrap();
        let mut x = DVector::from_element(1, x0);
        let u = DVector::from_element(1, u);
        for _ in 0..5 {
            obs.pc_update(&x).unwrap();
            let held = obs.d_hat.clone();
            for _ in 0..obs.substeps() {
                x = advance(&model, &d, &x, &mut obs, &u).unwrap();
                prop_assert_eq!(obs.d_hat[0].to_bits(), held[0].to_bits());
            }
        }
    }

    #[test]
    fn exact_estimate_keeps_predictor_on_state(c in -2.0f64..2.0, x0 in -1.5f64..1.5, u in -1.0f64..1.0, gain in 0.1f64..100.0) {
        let model = scalar_model(2.0);
        let d = DisturbanceFn::constant(DVector::from_element(1, c));
        let cfg = ObserverConfig::new(gain, 0.01).unwrap();
        let mut obs = ObserverState::new(cfg, 1e-3, &DVector::from_element(1, x0)).unwrap();
        obs.d_hat = DVector::from_element(1, c);
        let mut x = DVector::from_element(1, x0);
        let u = DVector::from_element(1, u);
        for _ in 0..5000 {
            x = advance(&model, &d, &x, &mut obs, &u).unwrap();
            prop_assert!(obs.prediction_error(&x).norm() <= 1e-10);
        }
    }

    #[test]
    fn blocks_partition_the_episodes(
        flags in prop::collection::vec(any::<bool>(), 0..120),
        block in 1usize..40,
    ) {
        let mut cfg = ExperimentConfig::defaults(PlantKind::Unicycle);
        cfg.episodes = flags.len();
        cfg.block_size = block;
        let records: Vec<EpisodeRecord> = flags
            .iter()
            .map(|&v| EpisodeRecord {
                violation: v,
                min_h: if v { -0.1 } else { 0.2 },
                first_violation_time: v.then_some(0.5),
                steps_completed: 10,
                ..EpisodeRecord::default()
            })
            .collect();
        let bound = ErrorBound::empirical(1.0, 0.1, 1.0, 0.01);
        let r = MetricsReport::from_records(&cfg, bound, &records);
        prop_assert_eq!(r.blocks.len(), flags.len().div_ceil(block));
        prop_assert_eq!(r.blocks.iter().map(|b| b.episodes).sum::<usize>(), flags.len());
        prop_assert_eq!(r.blocks.iter().map(|b| b.violating).sum::<usize>(), r.violating_episodes);
        prop_assert_eq!(r.violating_episodes, flags.iter().filter(|&&v| v).count());
        for b in &r.blocks {
            prop_assert_eq!(b.first_episode, b.index * block);
            prop_assert!((b.violation_rate - 100.0 * b.violating as f64 / b.episodes as f64).abs() < 1e-12);
        }
    }
}
