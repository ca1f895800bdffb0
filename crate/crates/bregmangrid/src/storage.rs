//! Energy function, controller-specific shaping terms, the incremental
//! (Bregman) storage and its derivatives.
//!
//! The base storage is `S = U + H` with
//!
//! ```text
//! U = 1/2 omega^T K_P^{-1} T_P omega + 1/2 V^T A(cos(D^T theta)) V
//! ```
//!
//! and `H` per controller kind. The Bregman distance to the reference
//! equilibrium,
//!
//! ```text
//! S_inc(x) = S(x) - S(x_bar) - grad S(x_bar)^T (x - x_bar),
//! ```
//!
//! has value zero and gradient zero exactly at the reference, which makes it
//! the natural Lyapunov candidate for incremental dissipativity statements.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::controllers::{damping_x_eff, r2_diag, ConfigError, ControllerConfig, ControllerKind};
use crate::power_flow::{active_power, edge_cosines, edge_sines, reactive_power, Equilibrium};
use crate::simulator::GridState;
use crate::topology::NetworkTopology;
use crate::{check_positive, DomainError};

/// Errors from storage evaluation: domain violations (nonpositive voltage
/// under a logarithm) or configurations outside a kind's stated hypotheses.
#[derive(Debug, Error)]
pub enum StorageError {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// One full evaluation of the incremental storage at a state.
#[derive(Clone, Debug)]
pub struct StorageEvaluation {
    pub u_value: f64,
    pub h_value: f64,
    /// `S = U + H` at the state (not incremental).
    pub s_value: f64,
    /// The Bregman distance to the reference equilibrium.
    pub bregman_value: f64,
    /// `P - P_bar`.
    pub grad_theta: DVector<f64>,
    /// `K_P^{-1} T_P (omega - omega_bar)`.
    pub grad_omega: DVector<f64>,
    /// Controller-dependent voltage gradient.
    pub grad_v: DVector<f64>,
    pub c_value: f64,
    pub c_q_value: f64,
    /// Diagonal frequency damping weight `K_P^{-1}` of the supply rate.
    pub w_omega: DVector<f64>,
    /// Voltage damping weight `X(V)` of the supply rate.
    pub w_v: DMatrix<f64>,
    /// Diagonal frequency input weight `K_P^{-1}`.
    pub r_omega: DVector<f64>,
    /// Diagonal voltage input weight `T_Q^{-1} R_2(V)`.
    pub r_v: DVector<f64>,
}

/// `U = 1/2 omega^T K_P^{-1} T_P omega + 1/2 V^T A(cos(D^T theta)) V`.
/// The magnetic term equals half the total reactive injection `1^T Q / 2`.
pub fn energy_u(
    top: &NetworkTopology,
    cfg: &ControllerConfig,
    theta: &DVector<f64>,
    omega: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<f64, DomainError> {
    check_positive(v)?;
    let kinetic: f64 = (0..top.n())
        .map(|i| 0.5 * cfg.t_p[i] / cfg.k_p[i] * omega[i] * omega[i])
        .sum();
    let a = top.loopy_laplacian(&edge_cosines(top, theta));
    let magnetic = 0.5 * v.dot(&(&a * v));
    debug_assert!({
        let q = reactive_power(top, theta, v).unwrap();
        (magnetic - 0.5 * q.sum()).abs() <= 1e-10 * (1.0 + magnetic.abs())
    });
    Ok(kinetic + magnetic)
}

/// Controller shaping term `H(V)`:
///
/// - conventional droop: `1^T K_Q V - (Q_bar + K_Q^{-1} V_bar)^T ln V`
///   (requires `u_Q_bar > 0` element-wise for well-posedness)
/// - quadratic droop: `1/2 V^T K_Q^{-1} V`
/// - reactive current: `0`
/// - E-ARP: `-Q_bar^T ln V`
pub fn shaping_h(
    cfg: &ControllerConfig,
    v: &DVector<f64>,
    eq: &Equilibrium,
) -> Result<f64, StorageError> {
    let n = v.len();
    match cfg.kind {
        ControllerKind::ReactiveCurrent => Ok(0.0),
        ControllerKind::QuadraticDroop => {
            Ok((0..n).map(|i| 0.5 * v[i] * v[i] / cfg.k_q[i]).sum())
        }
        ControllerKind::ConventionalDroop => {
            for (index, &value) in cfg.u_q_bar.iter().enumerate() {
                if !(value > 0.0) {
                    return Err(ConfigError::NonPositive {
                        what: "u_Q_bar",
                        index,
                        value,
                    }
                    .into());
                }
            }
            check_positive(v)?;
            Ok((0..n)
                .map(|i| {
                    cfg.k_q[i] * v[i]
                        - (eq.q_bar[i] + eq.v_bar[i] / cfg.k_q[i]) * v[i].ln()
                })
                .sum())
        }
        ControllerKind::EArp => {
            check_positive(v)?;
            Ok((0..n).map(|i| -eq.q_bar[i] * v[i].ln()).sum())
        }
    }
}

/// Gradient of the shaping term at `v`.
pub fn dh_dv(
    cfg: &ControllerConfig,
    v: &DVector<f64>,
    eq: &Equilibrium,
) -> Result<DVector<f64>, DomainError> {
    let n = v.len();
    match cfg.kind {
        ControllerKind::ReactiveCurrent => Ok(DVector::zeros(n)),
        ControllerKind::QuadraticDroop => {
            Ok(DVector::from_fn(n, |i, _| v[i] / cfg.k_q[i]))
        }
        ControllerKind::ConventionalDroop => {
            check_positive(v)?;
            Ok(DVector::from_fn(n, |i, _| {
                cfg.k_q[i] - (eq.q_bar[i] + eq.v_bar[i] / cfg.k_q[i]) / v[i]
            }))
        }
        ControllerKind::EArp => {
            check_positive(v)?;
            Ok(DVector::from_fn(n, |i, _| -eq.q_bar[i] / v[i]))
        }
    }
}

/// Diagonal of `d^2 H / dV^2` at `v`. For conventional droop this is the
/// second derivative of the `H` above, `[V]^{-2}(Q_bar + K_Q^{-1} V_bar)`;
/// the linear term contributes nothing.
pub fn d2h_dv2_diag(
    cfg: &ControllerConfig,
    v: &DVector<f64>,
    eq: &Equilibrium,
) -> Result<DVector<f64>, DomainError> {
    let n = v.len();
    match cfg.kind {
        ControllerKind::ReactiveCurrent => Ok(DVector::zeros(n)),
        ControllerKind::QuadraticDroop => {
            Ok(DVector::from_fn(n, |i, _| 1.0 / cfg.k_q[i]))
        }
        ControllerKind::ConventionalDroop => {
            check_positive(v)?;
            Ok(DVector::from_fn(n, |i, _| {
                (eq.q_bar[i] + eq.v_bar[i] / cfg.k_q[i]) / (v[i] * v[i])
            }))
        }
        ControllerKind::EArp => {
            check_positive(v)?;
            Ok(DVector::from_fn(n, |i, _| eq.q_bar[i] / (v[i] * v[i])))
        }
    }
}

/// `C = 1/2 ||xi - xi_bar||^2`, the secondary controller storage.
pub fn secondary_storage_c(xi: &DVector<f64>, xi_bar: &DVector<f64>) -> f64 {
    0.5 * (xi - xi_bar).norm_squared()
}

/// `C_Q = 1/2 (lambda - lambda_bar)^T K_lambda (lambda - lambda_bar)`.
pub fn dynamic_storage_cq(
    cfg: &ControllerConfig,
    lambda: &DVector<f64>,
    lambda_bar: &DVector<f64>,
) -> f64 {
    (0..lambda.len())
        .map(|i| {
            let d = lambda[i] - lambda_bar[i];
            0.5 * cfg.k_lambda[i] * d * d
        })
        .sum()
}

/// Evaluates the Bregman storage, its gradients and the supply-rate weights
/// at `state` relative to the reference equilibrium.
pub fn bregman_s(
    top: &NetworkTopology,
    cfg: &ControllerConfig,
    state: &GridState,
    eq: &Equilibrium,
) -> Result<StorageEvaluation, StorageError> {
    let n = top.n();
    let theta = &state.theta;
    let omega = &state.omega;
    let v = &state.v;
    check_positive(v)?;

    let u_value = energy_u(top, cfg, theta, omega, v)?;
    let h_value = shaping_h(cfg, v, eq)?;
    let s_value = u_value + h_value;

    let omega_bar = eq.omega_bar(n);
    let u_bar = energy_u(top, cfg, &eq.theta0, &omega_bar, &eq.v_bar)?;
    let h_bar = shaping_h(cfg, &eq.v_bar, eq)?;

    // grad S at the reference: (P_bar, K_P^{-1} T_P omega_bar,
    // [V_bar]^{-1} Q_bar + dH/dV(V_bar)).
    let grad_v_bar_s = DVector::from_fn(n, |i, _| eq.q_bar[i] / eq.v_bar[i])
        + dh_dv(cfg, &eq.v_bar, eq)?;
    let linear: f64 = (0..n)
        .map(|i| {
            eq.p_bar[i] * (theta[i] - eq.theta0[i])
                + cfg.t_p[i] / cfg.k_p[i] * eq.omega0 * (omega[i] - eq.omega0)
                + grad_v_bar_s[i] * (v[i] - eq.v_bar[i])
        })
        .sum();
    let bregman_value = s_value - (u_bar + h_bar) - linear;

    let p = active_power(top, theta, v)?;
    let q = reactive_power(top, theta, v)?;
    let grad_theta = &p - &eq.p_bar;
    let grad_omega =
        DVector::from_fn(n, |i, _| cfg.t_p[i] / cfg.k_p[i] * (omega[i] - eq.omega0));
    let grad_v = DVector::from_fn(n, |i, _| q[i] / v[i]) + dh_dv(cfg, v, eq)?
        - DVector::from_fn(n, |i, _| eq.q_bar[i] / eq.v_bar[i])
        - dh_dv(cfg, &eq.v_bar, eq)?;

    let c_value = secondary_storage_c(&state.xi, &eq.xi_bar);
    let c_q_value = match &state.lambda {
        Some(lambda) => dynamic_storage_cq(cfg, lambda, &eq.lambda_bar),
        None => 0.0,
    };

    let w_omega = DVector::from_fn(n, |i, _| 1.0 / cfg.k_p[i]);
    let w_v = damping_x_eff(cfg, v);
    let r_v = r2_diag(cfg.kind, v).component_div(&cfg.t_q);

    Ok(StorageEvaluation {
        u_value,
        h_value,
        s_value,
        bregman_value,
        grad_theta,
        grad_omega,
        grad_v,
        c_value,
        c_q_value,
        r_omega: w_omega.clone(),
        w_omega,
        w_v,
        r_v,
    })
}

/// Analytic Hessian of the incremental storage in `(phi, V)` coordinates,
/// a symmetric `(2n-1) x (2n-1)` matrix with blocks
///
/// ```text
/// [ D_1 Gamma(V) [cos eta] D_1^T    D_1 [sin eta] Gamma(V) |D|^T [V]^{-1} ]
/// [            (sym.)               A(cos eta) + d^2H/dV^2               ]
/// ```
///
/// where `eta = D_1^T phi`. The omega block `K_P^{-1} T_P` is constant and
/// positive definite, so convexity checks reduce to this sub-matrix; see
/// [`hessian_full`] for the three-block version.
pub fn hessian(
    top: &NetworkTopology,
    cfg: &ControllerConfig,
    phi: &DVector<f64>,
    v: &DVector<f64>,
    eq: &Equilibrium,
) -> Result<DMatrix<f64>, DomainError> {
    let n = top.n();
    let m = top.m();
    let theta = crate::topology::from_phi(phi);
    let gamma = top.gamma_diag(v)?;
    let sin_eta = edge_sines(top, &theta);
    let cos_eta = edge_cosines(top, &theta);
    let d1 = top.reduced_incidence();
    let d_abs = top.absolute_incidence();

    let gc = DMatrix::from_diagonal(&DVector::from_fn(m, |k, _| gamma[k] * cos_eta[k]));
    let gs = DMatrix::from_diagonal(&DVector::from_fn(m, |k, _| gamma[k] * sin_eta[k]));

    let block_pp = d1 * &gc * d1.transpose();
    let mut block_pv = d1 * &gs * d_abs.transpose();
    for col in 0..n {
        for row in 0..n - 1 {
            block_pv[(row, col)] /= v[col];
        }
    }
    let mut block_vv = top.loopy_laplacian(&cos_eta);
    let h_diag = d2h_dv2_diag(cfg, v, eq)?;
    for i in 0..n {
        block_vv[(i, i)] += h_diag[i];
    }

    let mut out = DMatrix::zeros(2 * n - 1, 2 * n - 1);
    for r in 0..n - 1 {
        for c in 0..n - 1 {
            out[(r, c)] = block_pp[(r, c)];
        }
        for c in 0..n {
            out[(r, n - 1 + c)] = block_pv[(r, c)];
            out[(n - 1 + c, r)] = block_pv[(r, c)];
        }
    }
    for r in 0..n {
        for c in 0..n {
            out[(n - 1 + r, n - 1 + c)] = block_vv[(r, c)];
        }
    }
    Ok(out)
}

/// Hessian over the full `(phi, omega, V)` state: the `(phi, V)` blocks of
/// [`hessian`] plus the decoupled constant block `K_P^{-1} T_P`.
pub fn hessian_full(
    top: &NetworkTopology,
    cfg: &ControllerConfig,
    phi: &DVector<f64>,
    v: &DVector<f64>,
    eq: &Equilibrium,
) -> Result<DMatrix<f64>, DomainError> {
    let n = top.n();
    let sub = hessian(top, cfg, phi, v, eq)?;
    let mut out = DMatrix::zeros(3 * n - 1, 3 * n - 1);
    for r in 0..n - 1 {
        for c in 0..n - 1 {
            out[(r, c)] = sub[(r, c)];
        }
        for c in 0..n {
            out[(r, 2 * n - 1 + c)] = sub[(r, n - 1 + c)];
            out[(2 * n - 1 + c, r)] = sub[(r, n - 1 + c)];
        }
    }
    for i in 0..n {
        out[(n - 1 + i, n - 1 + i)] = cfg.t_p[i] / cfg.k_p[i];
    }
    for r in 0..n {
        for c in 0..n {
            out[(2 * n - 1 + r, 2 * n - 1 + c)] = sub[(n - 1 + r, n - 1 + c)];
        }
    }
    Ok(out)
}
