mod common;

use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bregmangrid::controllers::{ControllerConfig, ControllerKind};
use bregmangrid::power_flow::{manufacture_equilibrium, reactive_power, solve_equilibrium};
use bregmangrid::simulator::{equilibrium_state, GridState};
use bregmangrid::storage::{
    bregman_s, d2h_dv2_diag, dh_dv, dynamic_storage_cq, energy_u, hessian, hessian_full,
    secondary_storage_c, shaping_h,
};
use bregmangrid::topology::{from_phi, to_phi, NetworkTopology};
use common::random_topology;

fn state_at(
    eq: &bregmangrid::power_flow::Equilibrium,
    theta: DVector<f64>,
    omega: DVector<f64>,
    v: DVector<f64>,
) -> GridState {
    GridState {
        theta,
        omega,
        v,
        xi: eq.xi_bar.clone(),
        lambda: None,
    }
}

#[test]
fn energy_flat_state_is_shunt_sum() {
    let top = common::ring3();
    let cfg = ControllerConfig::new(ControllerKind::ConventionalDroop, &top);
    let u = energy_u(
        &top,
        &cfg,
        &DVector::from_element(3, 0.7),
        &DVector::zeros(3),
        &DVector::from_element(3, 1.0),
    )
    .unwrap();
    let expect = 0.5 * top.shunt().sum();
    assert!((u - expect).abs() < 1e-14);
}

#[test]
fn energy_kinetic_term_adds_half() {
    let top = common::ring3();
    let mut cfg = ControllerConfig::new(ControllerKind::ConventionalDroop, &top);
    cfg.k_p = DVector::from_element(3, 1.0);
    cfg.t_p = DVector::from_element(3, 1.0);
    let theta = DVector::from_vec(vec![0.1, -0.2, 0.05]);
    let v = DVector::from_vec(vec![1.05, 0.95, 1.0]);
    let u0 = energy_u(&top, &cfg, &theta, &DVector::zeros(3), &v).unwrap();
    let mut e1 = DVector::zeros(3);
    e1[0] = 1.0;
    let u1 = energy_u(&top, &cfg, &theta, &e1, &v).unwrap();
    assert!((u1 - u0 - 0.5).abs() < 1e-14);
}

#[test]
fn magnetic_energy_is_half_total_reactive_power() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let top = random_topology(&mut rng, 6);
    let cfg = ControllerConfig::new(ControllerKind::ConventionalDroop, &top);
    let theta = DVector::from_fn(6, |_, _| rng.gen_range(-1.0..1.0));
    let v = DVector::from_fn(6, |_, _| rng.gen_range(0.7..1.3));
    let u = energy_u(&top, &cfg, &theta, &DVector::zeros(6), &v).unwrap();
    let q = reactive_power(&top, &theta, &v).unwrap();
    assert!((u - 0.5 * q.sum()).abs() < 1e-12);
}

#[test]
fn shaping_examples_per_kind() {
    let top = common::line2(1.0, [0.1, 0.1]);
    let v = DVector::from_vec(vec![1.0, 2.0]);

    let rc = ControllerConfig::new(ControllerKind::ReactiveCurrent, &top);
    let (_, eq) = manufacture_equilibrium(&top, &rc, &DVector::zeros(2), &DVector::from_element(2, 1.0)).unwrap();
    assert_eq!(shaping_h(&rc, &v, &eq).unwrap(), 0.0);

    let mut quad = ControllerConfig::new(ControllerKind::QuadraticDroop, &top);
    quad.k_q = DVector::from_element(2, 1.0);
    let (_, eq_q) = manufacture_equilibrium(&top, &quad, &DVector::zeros(2), &DVector::from_element(2, 1.0)).unwrap();
    assert!((shaping_h(&quad, &v, &eq_q).unwrap() - 2.5).abs() < 1e-14);
}

#[test]
fn droop_shaping_value_and_gradient() {
    let top = common::ring3();
    let cfg = ControllerConfig::new(ControllerKind::ConventionalDroop, &top);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let theta = DVector::from_fn(3, |_, _| rng.gen_range(-0.2..0.2));
    let v_bar = DVector::from_fn(3, |_, _| rng.gen_range(0.95..1.05));
    let (cfg, eq) = manufacture_equilibrium(&top, &cfg, &theta, &v_bar).unwrap();

    let h_at = |v: &DVector<f64>| shaping_h(&cfg, v, &eq).unwrap();
    let direct: f64 = (0..3)
        .map(|i| {
            cfg.k_q[i] * eq.v_bar[i]
                - (eq.q_bar[i] + eq.v_bar[i] / cfg.k_q[i]) * eq.v_bar[i].ln()
        })
        .sum();
    assert!((h_at(&eq.v_bar) - direct).abs() < 1e-12);

    let v = DVector::from_fn(3, |_, _| rng.gen_range(0.85..1.15));
    let grad = dh_dv(&cfg, &v, &eq).unwrap();
    for i in 0..3 {
        let fd = common::central_diff(|x| h_at(x), &v, i);
        assert!((fd - grad[i]).abs() < 1e-6, "node {i}: fd {fd}, grad {}", grad[i]);
    }
}

#[test]
fn droop_shaping_requires_positive_reference_input() {
    let top = common::line2(1.0, [0.1, 0.1]);
    let mut cfg = ControllerConfig::new(ControllerKind::ConventionalDroop, &top);
    // Manufacture an equilibrium, then poison the reference input sign.
    let (mut cfg2, eq) = manufacture_equilibrium(
        &top,
        &cfg,
        &DVector::zeros(2),
        &DVector::from_element(2, 1.0),
    )
    .unwrap();
    cfg2.u_q_bar[0] = -0.4;
    let v = DVector::from_element(2, 1.0);
    assert!(shaping_h(&cfg2, &v, &eq).is_err());

    cfg.u_q_bar = DVector::from_element(2, 1.1);
    let (cfg3, eq3) = manufacture_equilibrium(
        &top,
        &cfg,
        &DVector::zeros(2),
        &DVector::from_element(2, 1.0),
    )
    .unwrap();
    let bad_v = DVector::from_vec(vec![1.0, -1.0]);
    assert!(shaping_h(&cfg3, &bad_v, &eq3).is_err());
}

#[test]
fn curvature_matches_finite_differences_of_gradient() {
    // The conventional droop diagonal has no constant K_Q term: finite
    // differences of dH/dV decide the form.
    let top = common::ring3();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for kind in ControllerKind::ALL {
        let base = ControllerConfig::new(kind, &top);
        let theta = DVector::from_fn(3, |_, _| rng.gen_range(-0.2..0.2));
        let v_bar = DVector::from_fn(3, |_, _| rng.gen_range(0.95..1.05));
        let (cfg, eq) = manufacture_equilibrium(&top, &base, &theta, &v_bar).unwrap();
        let v = DVector::from_fn(3, |_, _| rng.gen_range(0.9..1.1));
        let h2 = d2h_dv2_diag(&cfg, &v, &eq).unwrap();
        for i in 0..3 {
            let fd = common::central_diff_vec(|x| dh_dv(&cfg, x, &eq).unwrap(), &v, i);
            assert!(
                (fd[i] - h2[i]).abs() < 1e-6,
                "{kind:?} node {i}: fd {} analytic {}",
                fd[i],
                h2[i]
            );
            if kind == ControllerKind::ConventionalDroop {
                let with_constant_term = h2[i] + cfg.k_q[i];
                assert!(
                    (fd[i] - with_constant_term).abs() > 0.01,
                    "adding K_Q would not be detectable"
                );
            }
        }
    }
}

#[test]
fn bregman_zero_at_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let top = common::net4();
    for kind in ControllerKind::ALL {
        let cfg = common::light_config(&mut rng, kind, &top);
        let eq = solve_equilibrium(&top, &cfg).unwrap();
        let state = equilibrium_state(&cfg, &eq);
        let eval = bregman_s(&top, &cfg, &state, &eq).unwrap();
        assert!(eval.bregman_value.abs() < 1e-10, "{kind:?}");
        assert!(eval.grad_theta.amax() < 1e-9, "{kind:?}");
        assert!(eval.grad_omega.amax() < 1e-12, "{kind:?}");
        assert!(eval.grad_v.amax() < 1e-9, "{kind:?}");
        assert!(eval.c_value.abs() < 1e-15);
        assert!(eval.c_q_value.abs() < 1e-15);
    }
}

#[test]
fn bregman_rotational_invariance() {
    let top = common::ring3();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let cfg = common::light_config(&mut rng, ControllerKind::ConventionalDroop, &top);
    let eq = solve_equilibrium(&top, &cfg).unwrap();
    for _ in 0..20 {
        let theta = DVector::from_fn(3, |i, _| eq.theta0[i] + rng.gen_range(-0.3..0.3));
        let omega = DVector::from_fn(3, |_, _| rng.gen_range(-0.3..0.3));
        let v = DVector::from_fn(3, |i, _| eq.v_bar[i] * rng.gen_range(0.9..1.1));
        let c = rng.gen_range(-2.0..2.0);
        let s1 = bregman_s(&top, &cfg, &state_at(&eq, theta.clone(), omega.clone(), v.clone()), &eq)
            .unwrap();
        let s2 = bregman_s(
            &top,
            &cfg,
            &state_at(&eq, theta.map(|t| t + c), omega, v),
            &eq,
        )
        .unwrap();
        assert!((s1.bregman_value - s2.bregman_value).abs() < 1e-10);
    }
}

#[test]
fn bregman_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let top = common::net4();
    let n = top.n();
    for kind in ControllerKind::ALL {
        let base = ControllerConfig::new(kind, &top);
        let theta0 = DVector::from_fn(n, |_, _| rng.gen_range(-0.2..0.2));
        let v0 = DVector::from_fn(n, |_, _| rng.gen_range(0.95..1.05));
        let (cfg, eq) = manufacture_equilibrium(&top, &base, &theta0, &v0).unwrap();
        for _ in 0..5 {
            let theta = DVector::from_fn(n, |i, _| eq.theta0[i] + rng.gen_range(-0.2..0.2));
            let omega = DVector::from_fn(n, |_, _| rng.gen_range(-0.3..0.3));
            let v = DVector::from_fn(n, |i, _| eq.v_bar[i] * rng.gen_range(0.92..1.08));
            let eval = bregman_s(&top, &cfg, &state_at(&eq, theta.clone(), omega.clone(), v.clone()), &eq).unwrap();
            let scale = 1.0f64
                .max(eval.grad_theta.amax())
                .max(eval.grad_omega.amax())
                .max(eval.grad_v.amax());
            for i in 0..n {
                let fd_t = common::central_diff(
                    |x| {
                        bregman_s(&top, &cfg, &state_at(&eq, x.clone(), omega.clone(), v.clone()), &eq)
                            .unwrap()
                            .bregman_value
                    },
                    &theta,
                    i,
                );
                let fd_w = common::central_diff(
                    |x| {
                        bregman_s(&top, &cfg, &state_at(&eq, theta.clone(), x.clone(), v.clone()), &eq)
                            .unwrap()
                            .bregman_value
                    },
                    &omega,
                    i,
                );
                let fd_v = common::central_diff(
                    |x| {
                        bregman_s(&top, &cfg, &state_at(&eq, theta.clone(), omega.clone(), x.clone()), &eq)
                            .unwrap()
                            .bregman_value
                    },
                    &v,
                    i,
                );
                assert!((fd_t - eval.grad_theta[i]).abs() < 1e-6 * scale, "{kind:?} theta {i}");
                assert!((fd_w - eval.grad_omega[i]).abs() < 1e-6 * scale, "{kind:?} omega {i}");
                assert!((fd_v - eval.grad_v[i]).abs() < 1e-6 * scale, "{kind:?} V {i}");
            }
        }
    }
}

#[test]
fn auxiliary_storages() {
    let xi = DVector::from_vec(vec![0.2, -0.1, 0.4]);
    assert_eq!(secondary_storage_c(&xi, &xi), 0.0);
    let mut shifted = xi.clone();
    shifted[0] += 1.0;
    assert!((secondary_storage_c(&shifted, &xi) - 0.5).abs() < 1e-15);

    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let a = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
    let b = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
    let d = &a - &b;
    assert!((secondary_storage_c(&a, &b) - 0.5 * d.norm_squared()).abs() < 1e-14);

    let top = common::ring3();
    let mut cfg = ControllerConfig::new(ControllerKind::ConventionalDroop, &top);
    cfg.k_lambda = DVector::from_element(3, 2.0);
    let lam = DVector::from_vec(vec![1.0, 0.0, 0.0]);
    assert!((dynamic_storage_cq(&cfg, &lam, &DVector::zeros(3)) - 1.0).abs() < 1e-15);
    assert_eq!(dynamic_storage_cq(&cfg, &lam, &lam), 0.0);
    let w: f64 = (0..3)
        .map(|i| 0.5 * cfg.k_lambda[i] * (a[i] - b[i]).powi(2))
        .sum();
    assert!((dynamic_storage_cq(&cfg, &a, &b) - w).abs() < 1e-14);
}

#[test]
fn hessian_single_node_is_shunt() {
    let top = NetworkTopology::new(1, &[], &[2.0]).unwrap();
    let cfg = ControllerConfig::new(ControllerKind::ReactiveCurrent, &top);
    let (cfg, eq) = manufacture_equilibrium(&top, &cfg, &DVector::zeros(1), &DVector::from_element(1, 1.0)).unwrap();
    let h = hessian(&top, &cfg, &DVector::zeros(0), &DVector::from_element(1, 1.0), &eq).unwrap();
    assert_eq!(h.shape(), (1, 1));
    assert!((h[(0, 0)] - 2.0).abs() < 1e-14);
}

#[test]
fn hessian_cross_block_vanishes_at_zero_flow() {
    let top = common::line2(1.0, [0.1, 0.1]);
    let cfg = ControllerConfig::new(ControllerKind::ReactiveCurrent, &top);
    let v = DVector::from_element(2, 1.0);
    let (cfg, eq) = manufacture_equilibrium(&top, &cfg, &DVector::zeros(2), &v).unwrap();
    let h = hessian(&top, &cfg, &DVector::zeros(1), &v, &eq).unwrap();
    // Order (phi, V): the angle-voltage coupling carries sin(eta) = 0.
    assert_eq!(h[(0, 1)], 0.0);
    assert_eq!(h[(0, 2)], 0.0);
    assert!((h.clone() - h.transpose()).amax() < 1e-12);
}

#[test]
fn hessian_matches_finite_differences_of_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let top = common::net4();
    let n = top.n();
    for kind in ControllerKind::ALL {
        let base = ControllerConfig::new(kind, &top);
        let theta0 = DVector::from_fn(n, |_, _| rng.gen_range(-0.2..0.2));
        let v0 = DVector::from_fn(n, |_, _| rng.gen_range(0.95..1.05));
        let (cfg, eq) = manufacture_equilibrium(&top, &base, &theta0, &v0).unwrap();
        let phi = DVector::from_fn(n - 1, |i, _| to_phi(&eq.theta0)[i] + rng.gen_range(-0.1..0.1));
        let v = DVector::from_fn(n, |i, _| eq.v_bar[i] * rng.gen_range(0.95..1.05));
        let h = hessian(&top, &cfg, &phi, &v, &eq).unwrap();
        assert!((h.clone() - h.transpose()).amax() < 1e-12);

        // (phi, V) gradient of the Bregman storage at omega = omega_bar.
        let grad = |phi_x: &DVector<f64>, v_x: &DVector<f64>| -> DVector<f64> {
            let st = state_at(&eq, from_phi(phi_x), DVector::from_element(n, eq.omega0), v_x.clone());
            let e = bregman_s(&top, &cfg, &st, &eq).unwrap();
            let mut g = DVector::zeros(2 * n - 1);
            for i in 0..n - 1 {
                g[i] = e.grad_theta[i];
            }
            for i in 0..n {
                g[n - 1 + i] = e.grad_v[i];
            }
            g
        };
        let scale = 1.0f64.max(h.amax());
        for j in 0..n - 1 {
            let fd = common::central_diff_vec(|x| grad(x, &v), &phi, j);
            assert!(
                (fd - h.column(j)).amax() < 1e-5 * scale,
                "{kind:?} phi column {j}"
            );
        }
        for j in 0..n {
            let fd = common::central_diff_vec(|x| grad(&phi, x), &v, j);
            assert!(
                (fd - h.column(n - 1 + j)).amax() < 1e-5 * scale,
                "{kind:?} V column {j}"
            );
        }
    }
}

#[test]
fn full_hessian_adds_frequency_block() {
    let top = common::ring3();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let cfg = common::light_config(&mut rng, ControllerKind::ConventionalDroop, &top);
    let eq = solve_equilibrium(&top, &cfg).unwrap();
    let phi = to_phi(&eq.theta0);
    let h3 = hessian_full(&top, &cfg, &phi, &eq.v_bar, &eq).unwrap();
    assert_eq!(h3.shape(), (8, 8));
    for i in 0..3 {
        assert!((h3[(2 + i, 2 + i)] - cfg.t_p[i] / cfg.k_p[i]).abs() < 1e-14);
    }
    assert!((h3.clone() - h3.transpose()).amax() < 1e-12);
}

#[test]
fn positive_definite_hessian_implies_local_nonnegativity() {
    let top = common::ring3();
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let cfg = common::light_config(&mut rng, ControllerKind::ConventionalDroop, &top);
    let eq = solve_equilibrium(&top, &cfg).unwrap();
    let phi = to_phi(&eq.theta0);
    let h = hessian(&top, &cfg, &phi, &eq.v_bar, &eq).unwrap();
    let min_eig = h.symmetric_eigenvalues().min();
    assert!(min_eig > 0.0, "test needs a convex instance, got {min_eig}");
    for _ in 0..200 {
        let theta = DVector::from_fn(3, |i, _| eq.theta0[i] + rng.gen_range(-0.05..0.05));
        let omega = DVector::from_fn(3, |_, _| rng.gen_range(-0.05..0.05));
        let v = DVector::from_fn(3, |i, _| eq.v_bar[i] + rng.gen_range(-0.05..0.05));
        let val = bregman_s(&top, &cfg, &state_at(&eq, theta, omega, v), &eq)
            .unwrap()
            .bregman_value;
        assert!(val >= -1e-12, "negative Bregman value {val}");
    }
}

#[test]
fn supply_rate_weights() {
    let top = common::ring3();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let cfg = common::light_config(&mut rng, ControllerKind::ConventionalDroop, &top);
    let eq = solve_equilibrium(&top, &cfg).unwrap();
    let state = equilibrium_state(&cfg, &eq);
    let eval = bregman_s(&top, &cfg, &state, &eq).unwrap();
    for i in 0..3 {
        assert!((eval.w_omega[i] - 1.0 / cfg.k_p[i]).abs() < 1e-15);
        assert!((eval.r_omega[i] - 1.0 / cfg.k_p[i]).abs() < 1e-15);
        assert!((eval.r_v[i] - 1.0 / cfg.t_q[i]).abs() < 1e-15);
        // Droop damping X = K_Q [V] / T_Q on the diagonal.
        let expect = cfg.k_q[i] * eq.v_bar[i] / cfg.t_q[i];
        assert!((eval.w_v[(i, i)] - expect).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn bregman_theta_gauge_freedom(seed in 0u64..500, c in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let top = common::net4();
        let kind = ControllerKind::ALL[(seed % 4) as usize];
        let base = ControllerConfig::new(kind, &top);
        let theta0 = DVector::from_fn(4, |_, _| rng.gen_range(-0.2..0.2));
        let v0 = DVector::from_fn(4, |_, _| rng.gen_range(0.95..1.05));
        let (cfg, eq) = manufacture_equilibrium(&top, &base, &theta0, &v0).unwrap();
        let theta = DVector::from_fn(4, |i, _| eq.theta0[i] + rng.gen_range(-0.2..0.2));
        let omega = DVector::from_fn(4, |_, _| rng.gen_range(-0.2..0.2));
        let v = DVector::from_fn(4, |i, _| eq.v_bar[i] * rng.gen_range(0.95..1.05));
        let s1 = bregman_s(&top, &cfg, &state_at(&eq, theta.clone(), omega.clone(), v.clone()), &eq).unwrap();
        let s2 = bregman_s(&top, &cfg, &state_at(&eq, theta.map(|t| t + c), omega, v), &eq).unwrap();
        prop_assert!((s1.bregman_value - s2.bregman_value).abs() < 1e-9);
    }
}
