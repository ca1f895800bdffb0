mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bregmangrid::controllers::{
    damping_x_eff, dynamic_uq_field, electrical_laplacian, frequency_field, grad_v_incremental,
    r2_diag, secondary_field, voltage_field, voltage_field_jacobian, ControllerConfig,
    ControllerKind,
};
use bregmangrid::power_flow::{
    manufacture_equilibrium, optimal_feedforward, power_jacobian, reactive_power,
    solve_equilibrium,
};
use bregmangrid::topology::from_phi;
use common::{light_config, random_topology};

#[test]
fn droop_field_vanishes_at_consistent_point() {
    let top = common::ring3();
    let mut cfg = ControllerConfig::new(ControllerKind::ConventionalDroop, &top);
    let v = DVector::from_vec(vec![1.01, 0.99, 1.02]);
    let q = DVector::from_vec(vec![0.2, -0.1, 0.15]);
    cfg.u_q_bar = DVector::from_fn(3, |i, _| v[i] + cfg.k_q[i] * q[i]);
    let f = voltage_field(&cfg, &v, &q, &cfg.u_q_bar).unwrap();
    assert!(f.amax() < 1e-15);
}

#[test]
fn quadratic_field_vanishes_at_unit_point() {
    let top = common::ring3();
    let cfg = ControllerConfig::new(ControllerKind::QuadraticDroop, &top);
    let ones = DVector::from_element(3, 1.0);
    let f = voltage_field(&cfg, &ones, &DVector::zeros(3), &ones).unwrap();
    assert!(f.amax() < 1e-15);
}

#[test]
fn earp_field_kills_uniform_scaled_power() {
    let top = common::net4();
    let mut cfg = ControllerConfig::new(ControllerKind::EArp, &top);
    cfg.k_q = DVector::from_element(4, 1.0);
    let v = DVector::from_vec(vec![1.1, 0.9, 1.0, 1.05]);
    let q = DVector::from_element(4, 0.7);
    let u_q = DVector::from_vec(vec![0.3, -0.1, 0.2, -0.4]);
    let f = voltage_field(&cfg, &v, &q, &u_q).unwrap();
    let expect = v.component_mul(&u_q);
    assert!((f - expect).amax() < 1e-14);
}

#[test]
fn frequency_field_zeroes() {
    let top = common::ring3();
    let mut cfg = ControllerConfig::new(ControllerKind::ConventionalDroop, &top);
    cfg.omega_star = 0.4;
    cfg.p_star = DVector::from_vec(vec![0.2, -0.1, -0.1]);
    let omega = DVector::from_element(3, 0.4);
    let zero_u = DVector::zeros(3);
    let f = frequency_field(&cfg, &omega, &cfg.p_star, &zero_u);
    assert!(f.amax() < 1e-15);

    // Balance: P - P* = K_P^{-1} u_P keeps the field at zero.
    let u = DVector::from_vec(vec![0.3, -0.2, 0.1]);
    let p = DVector::from_fn(3, |i, _| cfg.p_star[i] + u[i] / cfg.k_p[i]);
    let f = frequency_field(&cfg, &omega, &p, &u);
    assert!(f.amax() < 1e-14);
}

#[test]
fn frequency_field_matches_scalar_oracle() {
    let top = common::net4();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut cfg = ControllerConfig::new(ControllerKind::ConventionalDroop, &top);
    cfg.omega_star = 0.1;
    cfg.k_p = DVector::from_fn(4, |_, _| rng.gen_range(0.2..2.0));
    cfg.p_star = DVector::from_fn(4, |_, _| rng.gen_range(-0.5..0.5));
    let omega = DVector::from_fn(4, |_, _| rng.gen_range(-0.5..0.5));
    let p = DVector::from_fn(4, |_, _| rng.gen_range(-0.5..0.5));
    let u = DVector::from_fn(4, |_, _| rng.gen_range(-0.5..0.5));
    let f = frequency_field(&cfg, &omega, &p, &u);
    for i in 0..4 {
        let expect = -(omega[i] - 0.1) - cfg.k_p[i] * (p[i] - cfg.p_star[i]) + u[i];
        assert!((f[i] - expect).abs() < 1e-15);
    }
}

#[test]
fn secondary_field_consensus_fixed_points() {
    let top = common::ring3();
    let mut cfg = ControllerConfig::new(ControllerKind::ConventionalDroop, &top);
    cfg.omega_star = 0.2;
    let omega = DVector::from_element(3, 0.2);
    let xi = DVector::from_element(3, -0.7);
    assert!(secondary_field(&cfg, &xi, &omega).amax() < 1e-14);

    cfg.p_star = DVector::from_vec(vec![0.4, 0.1, 0.3]);
    let u_bar = optimal_feedforward(&cfg.k_p, &cfg.p_star);
    assert!(secondary_field(&cfg, &u_bar, &omega).amax() < 1e-14);
}

#[test]
fn secondary_field_column_sums() {
    let top = common::net4();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut cfg = ControllerConfig::new(ControllerKind::ConventionalDroop, &top);
    cfg.k_p = DVector::from_fn(4, |_, _| rng.gen_range(0.2..2.0));
    let xi = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
    let omega = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
    let xdot = secondary_field(&cfg, &xi, &omega);
    let expect: f64 = (0..4).map(|i| (cfg.omega_star - omega[i]) / cfg.k_p[i]).sum();
    assert!((xdot.sum() - expect).abs() < 1e-12);
}

#[test]
fn secondary_field_is_linear() {
    let top = common::ring3();
    let cfg = ControllerConfig::new(ControllerKind::ConventionalDroop, &top);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let draw = |rng: &mut ChaCha8Rng| DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
    let (x1, w1) = (draw(&mut rng), draw(&mut rng));
    let (x2, w2) = (draw(&mut rng), draw(&mut rng));
    // The affine offset from omega_star cancels in the superposition check.
    let f = |x: &DVector<f64>, w: &DVector<f64>| secondary_field(&cfg, x, w);
    let lhs = f(&(&x1 + &x2), &(&w1 + &w2));
    let rhs = f(&x1, &w1) + f(&x2, &w2)
        - f(&DVector::zeros(3), &DVector::zeros(3));
    assert!((lhs - rhs).amax() < 1e-12);
}

#[test]
fn dynamic_uq_field_vanishes_at_equilibrium() {
    let top = common::net4();
    for kind in ControllerKind::ALL {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let base = ControllerConfig::new(kind, &top);
        let theta = DVector::from_fn(4, |_, _| rng.gen_range(-0.2..0.2));
        let v = DVector::from_fn(4, |_, _| rng.gen_range(0.95..1.05));
        let (_, eq) = manufacture_equilibrium(&top, &base, &theta, &v).unwrap();
        let ldot = dynamic_uq_field(&base, &eq.v_bar, &eq.q_bar, &eq.v_bar, &eq.q_bar).unwrap();
        assert!(ldot.amax() < 1e-14, "{kind:?}: {}", ldot.amax());
    }
}

#[test]
fn dynamic_uq_droop_reduced_form() {
    let top = common::ring3();
    let cfg = ControllerConfig::new(ControllerKind::ConventionalDroop, &top);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..50 {
        let v = DVector::from_fn(3, |_, _| rng.gen_range(0.8..1.2));
        let q = DVector::from_fn(3, |_, _| rng.gen_range(-0.5..0.5));
        let v_bar = DVector::from_fn(3, |_, _| rng.gen_range(0.9..1.1));
        let q_bar = DVector::from_fn(3, |_, _| rng.gen_range(-0.3..0.3));
        let f = dynamic_uq_field(&cfg, &v, &q, &v_bar, &q_bar).unwrap();
        // Reduced form for droop: -[V]^{-1}((Q - Q_bar) + K_Q^{-1}(V - V_bar)).
        for i in 0..3 {
            let expect = -((q[i] - q_bar[i]) + (v[i] - v_bar[i]) / cfg.k_q[i]) / v[i];
            assert!((f[i] - expect).abs() < 1e-13);
        }
    }
}

#[test]
fn voltage_field_zero_at_solved_equilibrium_every_kind() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let top = common::net4();
    for kind in ControllerKind::ALL {
        let cfg = light_config(&mut rng, kind, &top);
        let eq = solve_equilibrium(&top, &cfg).unwrap();
        let f = voltage_field(&cfg, &eq.v_bar, &eq.q_bar, &cfg.u_q_bar).unwrap();
        assert!(f.amax() < 1e-9, "{kind:?}: residual {}", f.amax());
    }
}

#[test]
fn voltage_field_factors_through_damping_and_gradient() {
    // f(V, Q, u_Q_bar) = -C(V) grad_V with C = T_Q X(V), for every kind.
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let top = common::net4();
    for kind in ControllerKind::ALL {
        let base = ControllerConfig::new(kind, &top);
        let theta = DVector::from_fn(4, |_, _| rng.gen_range(-0.2..0.2));
        let v_ref = DVector::from_fn(4, |_, _| rng.gen_range(0.95..1.05));
        let (cfg, eq) = manufacture_equilibrium(&top, &base, &theta, &v_ref).unwrap();
        for _ in 0..20 {
            let v = DVector::from_fn(4, |_, _| rng.gen_range(0.8..1.2));
            let q = DVector::from_fn(4, |_, _| rng.gen_range(-0.5..0.5));
            let f = voltage_field(&cfg, &v, &q, &cfg.u_q_bar).unwrap();
            let g = grad_v_incremental(kind, &cfg.k_q, &v, &q, &eq.v_bar, &eq.q_bar).unwrap();
            let x = damping_x_eff(&cfg, &v);
            let mut expect = -(&x * &g);
            for i in 0..4 {
                expect[i] *= cfg.t_q[i];
            }
            assert!(
                (f - expect).amax() < 1e-11,
                "{kind:?}: factorization residual"
            );
        }
    }
}

#[test]
fn r2_diag_per_kind() {
    let v = DVector::from_vec(vec![0.9, 1.1]);
    assert_eq!(
        r2_diag(ControllerKind::ConventionalDroop, &v),
        DVector::from_element(2, 1.0)
    );
    assert_eq!(r2_diag(ControllerKind::QuadraticDroop, &v), v);
    assert_eq!(
        r2_diag(ControllerKind::ReactiveCurrent, &v),
        DVector::from_element(2, 1.0)
    );
    assert_eq!(r2_diag(ControllerKind::EArp, &v), v);
}

#[test]
fn damping_is_positive_semidefinite() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let top = common::net4();
    for kind in ControllerKind::ALL {
        let cfg = ControllerConfig::new(kind, &top);
        let v = DVector::from_fn(4, |_, _| rng.gen_range(0.8..1.2));
        let x = damping_x_eff(&cfg, &v);
        assert!((&x - x.transpose()).amax() < 1e-12);
        let eigs = x.symmetric_eigenvalues();
        assert!(eigs.iter().all(|&e| e > -1e-12), "{kind:?}: {eigs:?}");
        if kind != ControllerKind::EArp {
            assert!(eigs.iter().all(|&e| e > 0.0), "{kind:?} should be PD");
        }
    }
}

#[test]
fn voltage_jacobian_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let top = common::net4();
    let n = top.n();
    for kind in ControllerKind::ALL {
        let cfg = light_config(&mut rng, kind, &top);
        let theta = DVector::from_fn(n, |_, _| rng.gen_range(-0.3..0.3));
        let v = DVector::from_fn(n, |_, _| rng.gen_range(0.9..1.1));
        let phi = bregmangrid::topology::to_phi(&theta);
        let pj = power_jacobian(&top, &theta, &v).unwrap();
        let q = reactive_power(&top, &theta, &v).unwrap();
        let (df_dphi, df_dv) =
            voltage_field_jacobian(&cfg, &v, &q, &cfg.u_q_bar, &pj.dq_dphi, &pj.dq_dv).unwrap();
        let eval = |ph: &DVector<f64>, vv: &DVector<f64>| {
            let th = from_phi(ph);
            let qq = reactive_power(&top, &th, vv).unwrap();
            voltage_field(&cfg, vv, &qq, &cfg.u_q_bar).unwrap()
        };
        for j in 0..n - 1 {
            let fd = common::central_diff_vec(|ph| eval(ph, &v), &phi, j);
            assert!(
                (fd - df_dphi.column(j)).amax() < 1e-6,
                "{kind:?} phi column {j}"
            );
        }
        for j in 0..n {
            let fd = common::central_diff_vec(|vv| eval(&phi, vv), &v, j);
            assert!(
                (fd - df_dv.column(j)).amax() < 1e-6,
                "{kind:?} V column {j}"
            );
        }
    }
}

#[test]
fn electrical_laplacian_shape() {
    let top = common::ring3();
    let l = electrical_laplacian(&top);
    assert_eq!(l, l.transpose());
    assert!((l.clone() * DVector::from_element(3, 1.0)).amax() < 1e-14);
    assert_eq!(l[(0, 1)], -1.0);
}

#[test]
fn validation_rejects_bad_configs() {
    let top = common::ring3();

    let mut cfg = ControllerConfig::new(ControllerKind::EArp, &top);
    cfg.t_q = DVector::from_element(3, 0.5);
    assert!(cfg.validate().is_err(), "E-ARP requires unit T_Q");

    let mut cfg = ControllerConfig::new(ControllerKind::EArp, &top);
    cfg.u_q_bar = DVector::from_vec(vec![0.5, 0.0, 0.0]);
    assert!(cfg.validate().is_err(), "E-ARP requires balanced u_Q_bar");

    let mut cfg = ControllerConfig::new(ControllerKind::ConventionalDroop, &top);
    cfg.k_p[1] = 0.0;
    assert!(cfg.validate().is_err());

    let mut cfg = ControllerConfig::new(ControllerKind::ConventionalDroop, &top);
    cfg.phi_loss = -0.2;
    assert!(cfg.validate().is_err());

    let mut cfg = ControllerConfig::new(ControllerKind::ConventionalDroop, &top);
    cfg.l_p = DMatrix::zeros(3, 3);
    assert!(cfg.validate().is_err(), "disconnected communication graph");

    let mut cfg = ControllerConfig::new(ControllerKind::ConventionalDroop, &top);
    cfg.voltage_disturbance = Some(DVector::zeros(2));
    assert!(cfg.validate().is_err(), "disturbance dimension mismatch");

    assert!(ControllerConfig::new(ControllerKind::EArp, &top)
        .validate()
        .is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn earp_conserved_generator_annihilates_field(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let top = random_topology(&mut rng, 5);
        let mut cfg = ControllerConfig::new(ControllerKind::EArp, &top);
        cfg.k_q = DVector::from_fn(5, |_, _| rng.gen_range(0.2..2.0));
        let v = DVector::from_fn(5, |_, _| rng.gen_range(0.5..1.5));
        let q = DVector::from_fn(5, |_, _| rng.gen_range(-1.0..1.0));
        let f = voltage_field(&cfg, &v, &q, &DVector::zeros(5)).unwrap();
        let gen: f64 = (0..5).map(|i| f[i] / (cfg.k_q[i] * v[i])).sum();
        prop_assert!(gen.abs() < 1e-11, "generator residual {gen}");
    }

    #[test]
    fn grad_v_vanishes_at_reference(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = DVector::from_fn(4, |_, _| rng.gen_range(0.5..1.5));
        let q = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
        let k_q = DVector::from_fn(4, |_, _| rng.gen_range(0.2..2.0));
        for kind in ControllerKind::ALL {
            let g = grad_v_incremental(kind, &k_q, &v, &q, &v, &q).unwrap();
            prop_assert!(g.amax() < 1e-14);
        }
    }
}
