//! Property tests for the structural invariants, each checked against an independent route.

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use loopmorse::action::{Action, HamiltonianSpec, PotentialTerm, TrigPotential};
use loopmorse::flow::{integrate, FlowOptions};
use loopmorse::loopspace::{l2_weights, mixed_metric_weights, sobolev_weights, weighted_dot, FourierLoop, SobolevExponent, WindingVector};
use loopmorse::operators::{assemble_l, relative_dimension, SubspaceBasis, TrigField, TrigTerm};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn hamiltonian(a: f64, b: f64) -> HamiltonianSpec {
    HamiltonianSpec::new(
        TrigField {
            dim: 1,
            terms: vec![TrigTerm { component: 0, amplitude: b, time_mode: 1, q_modes: vec![1], sine: true }],
        },
        TrigPotential {
            dim: 1,
            terms: vec![
                PotentialTerm { amplitude: a, time_mode: 0, q_modes: vec![1], sine: false },
                PotentialTerm { amplitude: 0.5 * a, time_mode: 1, q_modes: vec![2], sine: true },
            ],
        },
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, ..ProptestConfig::default() })]

    #[test]
    fn parseval_against_grid_samples(seed in 0u64..1000, k in 1usize..10, extra in 1usize..8) {
        let u = FourierLoop::random(1, k, 0.5, &mut rng(seed));
        let values = loopmorse::loopspace::Grid::new(k, 2 * k + extra).unwrap().evaluate(&u);
        let mean_square = values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64;
        prop_assert!((u.sobolev_norm_sq(0.0) - mean_square).abs() < 1e-10 * (1.0 + mean_square));
    }

    #[test]
    fn negative_norm_is_dual(seed in 0u64..1000, r in 0.0f64..1.5) {
        // sup over unit ||v||_r of <u, v> by Cauchy-Schwarz: v_i proportional to l2_i u_i / w_i
        let u = FourierLoop::random(2, 7, 0.0, &mut rng(seed));
        let w = sobolev_weights(2, 7, r);
        let l2 = l2_weights(2, 7);
        let v: Vec<f64> = u.coeffs().iter().zip(&w).zip(&l2).map(|((c, wi), li)| li * c / wi).collect();
        let v_norm = weighted_dot(&w, &v, &v).sqrt();
        let v = FourierLoop::from_coeffs(2, 7, v.iter().map(|x| x / v_norm).collect()).unwrap();
        prop_assert!((v.sobolev_norm(r) - 1.0).abs() < 1e-12);
        let sup = u.l2_inner(&v);
        prop_assert!((sup - u.sobolev_norm(-r)).abs() < 1e-8 * (1.0 + sup));
        // no other unit direction does better
        let other = FourierLoop::random(2, 7, 0.0, &mut rng(seed + 1));
        let other = other.scaled(1.0 / other.sobolev_norm(r));
        prop_assert!(u.l2_inner(&other) <= sup + 1e-10);
    }

    #[test]
    fn l_is_self_adjoint(seed in 0u64..1000, n in 1usize..3, k in 1usize..9, s in 0.51f64..0.99) {
        let l = assemble_l(n, k, s).unwrap();
        let g = mixed_metric_weights(n, k, s);
        let mut r = rng(seed);
        let mut unit = || {
            let v: Vec<f64> = (0..l.source_dim()).map(|_| r.random_range(-1.0..1.0)).collect();
            let norm = weighted_dot(&g, &v, &v).sqrt();
            v.into_iter().map(|x| x / norm).collect::<Vec<_>>()
        };
        let (z, w) = (unit(), unit());
        let lhs = weighted_dot(&g, &l.apply(&z), &w);
        let rhs = weighted_dot(&g, &z, &l.apply(&w));
        prop_assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn relative_dimension_antisymmetric_additive(seed in 0u64..1000, ambient in 3usize..16) {
        let mut r = rng(seed);
        let weights: Vec<f64> = (0..ambient).map(|_| r.random_range(0.5..2.0)).collect();
        let basis = |r: &mut ChaCha8Rng| {
            let d = r.random_range(0..=ambient);
            SubspaceBasis::new(DMatrix::from_fn(ambient, d, |_, _| r.random_range(-1.0..1.0)), weights.clone()).unwrap()
        };
        let spaces = [basis(&mut r), basis(&mut r), basis(&mut r)];
        let dim = |i: usize, j: usize| relative_dimension(&spaces[i], &spaces[j]).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                prop_assert_eq!(dim(i, j), -dim(j, i));
                prop_assert_eq!(dim(i, j), spaces[i].dim() as i64 - spaces[j].dim() as i64);
                for l in 0..3 {
                    prop_assert_eq!(dim(i, l), dim(i, j) + dim(j, l));
                }
            }
        }
    }

    #[test]
    fn gradient_represents_differential(seed in 0u64..1000, a in -0.3f64..0.3, b in -0.2f64..0.2, m in -1i64..=1) {
        let s = SobolevExponent::for_action(0.6).unwrap();
        let action = Action::new(hamiltonian(a, b), 5, s).unwrap();
        let mut r = rng(seed);
        let v: Vec<f64> = (0..action.dim()).map(|_| r.random_range(-0.3..0.3)).collect();
        let z = action.point(WindingVector(vec![m]), &v);
        let w: Vec<f64> = (0..action.dim()).map(|_| r.random_range(-1.0..1.0)).collect();
        let grad = action.gradient(&z).unwrap();
        let c = action.differential(&z).unwrap();
        let via_metric = weighted_dot(action.metric_weights(), &grad, &w);
        let direct: f64 = c.iter().zip(&w).map(|(x, y)| x * y).sum();
        prop_assert!((via_metric - direct).abs() < 1e-10 * (1.0 + direct.abs()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 8, ..ProptestConfig::default() })]

    #[test]
    fn flow_is_monotone_and_keeps_winding(seed in 0u64..1000, a in 0.01f64..0.1, m in -1i64..=1) {
        let s = SobolevExponent::for_action(0.6).unwrap();
        let action = Action::new(hamiltonian(a, 0.05), 4, s).unwrap();
        let mut r = rng(seed);
        let half = action.dim() / 2;
        let mut v: Vec<f64> = (0..action.dim()).map(|_| r.random_range(-0.05..0.05)).collect();
        v[half] = m as f64;
        let z = action.point(WindingVector(vec![m]), &v);
        let traj = integrate(&action, &z, 3.0, &FlowOptions::default()).unwrap();
        prop_assert!(traj.is_monotone(1e-10));
        prop_assert!(traj.winding_constant());
        prop_assert!(traj.actions.windows(2).all(|w| w[1] <= w[0] + 1e-10));
        let recomputed: Vec<f64> = traj.points.iter().map(|p| action.value(p).unwrap()).collect();
        prop_assert_eq!(recomputed, traj.actions.clone());
    }
}
