//! The four voltage controller laws, the frequency droop dynamics, the
//! distributed secondary controller and the integral extension of `u_Q`.
//!
//! All fields are pure functions of their arguments. Power injections `P`,
//! `Q` are passed in rather than recomputed, so this module stays independent
//! of the network algebra.
//!
//! Right-hand sides follow the convention of the model: [`voltage_field`]
//! returns the right side of `T_Q V_dot`, [`frequency_field`] the right side
//! of `T_P omega_dot`, [`dynamic_uq_field`] the right side of
//! `T_Q lambda_dot`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;
use thiserror::Error;

use crate::topology::NetworkTopology;
use crate::{check_positive, DomainError};

/// The voltage controller selecting `f(V, Q, u_Q)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ControllerKind {
    /// `f = -V - K_Q Q + u_Q`
    ConventionalDroop,
    /// `f = -K_Q Q - [V](V - u_Q)`
    QuadraticDroop,
    /// `f = -[V]^{-1} Q + u_Q`
    ReactiveCurrent,
    /// `f = -[V] K_Q L_Q K_Q Q + [V] u_Q`, consensus on scaled reactive power
    EArp,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 4] = [
        ControllerKind::ConventionalDroop,
        ControllerKind::QuadraticDroop,
        ControllerKind::ReactiveCurrent,
        ControllerKind::EArp,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ControllerKind::ConventionalDroop => "ConventionalDroop",
            ControllerKind::QuadraticDroop => "QuadraticDroop",
            ControllerKind::ReactiveCurrent => "ReactiveCurrent",
            ControllerKind::EArp => "EArp",
        }
    }
}

/// Configuration problems detected by [`ControllerConfig::validate`].
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dim {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{what} must be strictly positive, got entry {index} = {value}")]
    NonPositive {
        what: &'static str,
        index: usize,
        value: f64,
    },
    #[error("E-ARP requires T_Q = I, got entry {index} = {value}")]
    EArpTimeConstant { index: usize, value: f64 },
    #[error("E-ARP requires sum_i u_Q_bar_i / k_Q_i = 0, got {0}")]
    EArpInputBalance(f64),
    #[error("communication Laplacian {0} is not symmetric")]
    LaplacianAsymmetric(&'static str),
    #[error("communication Laplacian {what} must have zero row sums, row {row} sums to {sum}")]
    LaplacianRowSum {
        what: &'static str,
        row: usize,
        sum: f64,
    },
    #[error("communication Laplacian {what} is not connected (algebraic connectivity {lambda2})")]
    LaplacianDisconnected { what: &'static str, lambda2: f64 },
    #[error("communication Laplacian {what} has a negative eigenvalue {eig}")]
    LaplacianIndefinite { what: &'static str, eig: f64 },
    #[error("phi_loss must lie in [0, pi/2], got {0}")]
    PhiLossOutOfRange(f64),
}

/// Full configuration of the closed loop: controller kind, diagonal gains,
/// setpoints, communication graphs, the lossy homogeneity angle and the
/// switches selecting the secondary and dynamic-input extensions.
///
/// Diagonal matrices (`T_P`, `T_Q`, `K_P`, `K_Q`, `K_lambda`) are stored as
/// their diagonal vectors.
#[derive(Clone, Debug)]
pub struct ControllerConfig {
    pub kind: ControllerKind,
    pub t_p: DVector<f64>,
    pub t_q: DVector<f64>,
    pub k_p: DVector<f64>,
    pub k_q: DVector<f64>,
    pub omega_star: f64,
    pub p_star: DVector<f64>,
    pub u_q_bar: DVector<f64>,
    pub l_p: DMatrix<f64>,
    pub l_q: DMatrix<f64>,
    pub k_lambda: DVector<f64>,
    /// Homogeneity angle of the lines; `pi/2` is the lossless case.
    pub phi_loss: f64,
    pub use_secondary: bool,
    pub use_dynamic_uq: bool,
    /// Optional constant disturbance added to the right side of `T_Q V_dot`.
    pub voltage_disturbance: Option<DVector<f64>>,
}

/// Unit-weight Laplacian of the electrical graph, the default communication
/// graph when a scenario does not specify one.
pub fn electrical_laplacian(top: &NetworkTopology) -> DMatrix<f64> {
    let n = top.n();
    let mut l = DMatrix::zeros(n, n);
    for e in top.edges() {
        l[(e.i, e.i)] += 1.0;
        l[(e.j, e.j)] += 1.0;
        l[(e.i, e.j)] -= 1.0;
        l[(e.j, e.i)] -= 1.0;
    }
    l
}

impl ControllerConfig {
    /// Baseline configuration: unit gains, `T = 0.1 I` (`T_Q = I` for E-ARP),
    /// zero setpoints, unit-weight electrical communication graphs, lossless
    /// lines. `u_q_bar` defaults to `1` except for E-ARP where it must be
    /// balanced and defaults to `0`.
    pub fn new(kind: ControllerKind, top: &NetworkTopology) -> Self {
        let n = top.n();
        let ones = DVector::from_element(n, 1.0);
        let l = electrical_laplacian(top);
        let u_q_bar = match kind {
            ControllerKind::EArp => DVector::zeros(n),
            _ => ones.clone(),
        };
        let t_q = match kind {
            ControllerKind::EArp => ones.clone(),
            _ => DVector::from_element(n, 0.1),
        };
        Self {
            kind,
            t_p: DVector::from_element(n, 0.1),
            t_q,
            k_p: ones.clone(),
            k_q: ones.clone(),
            omega_star: 0.0,
            p_star: DVector::zeros(n),
            u_q_bar,
            l_p: l.clone(),
            l_q: l,
            k_lambda: ones,
            phi_loss: FRAC_PI_2,
            use_secondary: false,
            use_dynamic_uq: false,
            voltage_disturbance: None,
        }
    }

    pub fn n(&self) -> usize {
        self.k_p.len()
    }

    /// Checks dimensions, gain positivity, the E-ARP structural requirements
    /// (`T_Q = I` and a balanced constant input) and the communication
    /// Laplacians (symmetric, zero row sums, PSD, connected).
    pub fn validate(&self) -> Result<(), ConfigError> {
        let n = self.n();
        let dims: [(&'static str, usize); 6] = [
            ("T_P", self.t_p.len()),
            ("T_Q", self.t_q.len()),
            ("K_Q", self.k_q.len()),
            ("K_lambda", self.k_lambda.len()),
            ("P_star", self.p_star.len()),
            ("u_Q_bar", self.u_q_bar.len()),
        ];
        for (what, got) in dims {
            if got != n {
                return Err(ConfigError::Dim {
                    what,
                    expected: n,
                    got,
                });
            }
        }
        if let Some(d) = &self.voltage_disturbance {
            if d.len() != n {
                return Err(ConfigError::Dim {
                    what: "voltage_disturbance",
                    expected: n,
                    got: d.len(),
                });
            }
        }
        for (what, v) in [
            ("T_P", &self.t_p),
            ("T_Q", &self.t_q),
            ("K_P", &self.k_p),
            ("K_Q", &self.k_q),
            ("K_lambda", &self.k_lambda),
        ] {
            for (index, &value) in v.iter().enumerate() {
                if !(value > 0.0) {
                    return Err(ConfigError::NonPositive { what, index, value });
                }
            }
        }
        if self.kind == ControllerKind::EArp {
            for (index, &value) in self.t_q.iter().enumerate() {
                if (value - 1.0).abs() > 1e-12 {
                    return Err(ConfigError::EArpTimeConstant { index, value });
                }
            }
            let balance: f64 = self
                .u_q_bar
                .iter()
                .zip(self.k_q.iter())
                .map(|(&u, &k)| u / k)
                .sum();
            if balance.abs() > 1e-9 * (1.0 + self.u_q_bar.amax()) {
                return Err(ConfigError::EArpInputBalance(balance));
            }
        }
        if !(0.0..=FRAC_PI_2).contains(&self.phi_loss) {
            return Err(ConfigError::PhiLossOutOfRange(self.phi_loss));
        }
        validate_laplacian("L_P", &self.l_p, n)?;
        validate_laplacian("L_Q", &self.l_q, n)?;
        Ok(())
    }
}

fn validate_laplacian(what: &'static str, l: &DMatrix<f64>, n: usize) -> Result<(), ConfigError> {
    if l.nrows() != n || l.ncols() != n {
        return Err(ConfigError::Dim {
            what,
            expected: n,
            got: l.nrows(),
        });
    }
    let scale = 1.0f64.max(l.amax());
    for i in 0..n {
        for j in (i + 1)..n {
            if (l[(i, j)] - l[(j, i)]).abs() > 1e-9 * scale {
                return Err(ConfigError::LaplacianAsymmetric(what));
            }
        }
        let sum = l.row(i).sum();
        if sum.abs() > 1e-9 * scale {
            return Err(ConfigError::LaplacianRowSum { what, row: i, sum });
        }
    }
    if n > 1 {
        let eigs = l.clone().symmetric_eigen().eigenvalues;
        let mut sorted: Vec<f64> = eigs.iter().copied().collect();
        sorted.sort_by(f64::total_cmp);
        if sorted[0] < -1e-9 * scale {
            return Err(ConfigError::LaplacianIndefinite {
                what,
                eig: sorted[0],
            });
        }
        let lambda2 = sorted[1];
        if lambda2 <= 1e-9 * scale {
            return Err(ConfigError::LaplacianDisconnected { what, lambda2 });
        }
    }
    Ok(())
}

/// The controller-specific right side of `T_Q V_dot`.
pub fn voltage_field(
    cfg: &ControllerConfig,
    v: &DVector<f64>,
    q: &DVector<f64>,
    u_q: &DVector<f64>,
) -> Result<DVector<f64>, DomainError> {
    check_positive(v)?;
    Ok(match cfg.kind {
        ControllerKind::ConventionalDroop => -v - cfg.k_q.component_mul(q) + u_q,
        ControllerKind::QuadraticDroop => {
            -cfg.k_q.component_mul(q) - v.component_mul(&(v - u_q))
        }
        ControllerKind::ReactiveCurrent => -q.component_div(v) + u_q,
        ControllerKind::EArp => {
            let consensus = scaled_consensus(cfg, q);
            v.component_mul(&(u_q - consensus))
        }
    })
}

/// `K_Q L_Q K_Q q` for the E-ARP law.
fn scaled_consensus(cfg: &ControllerConfig, q: &DVector<f64>) -> DVector<f64> {
    cfg.k_q.component_mul(&(&cfg.l_q * cfg.k_q.component_mul(q)))
}

/// Right side of `T_P omega_dot`: `-(omega - omega* 1) - K_P (P - P*) + u_P`.
pub fn frequency_field(
    cfg: &ControllerConfig,
    omega: &DVector<f64>,
    p: &DVector<f64>,
    u_p: &DVector<f64>,
) -> DVector<f64> {
    let mut out = u_p.clone();
    for i in 0..omega.len() {
        out[i] += -(omega[i] - cfg.omega_star) - cfg.k_p[i] * (p[i] - cfg.p_star[i]);
    }
    out
}

/// Distributed secondary controller `xi_dot = -L_P xi + K_P^{-1}(omega* 1 - omega)`;
/// its output is `u_P = xi`.
pub fn secondary_field(
    cfg: &ControllerConfig,
    xi: &DVector<f64>,
    omega: &DVector<f64>,
) -> DVector<f64> {
    let mut out = -(&cfg.l_p * xi);
    for i in 0..omega.len() {
        out[i] += (cfg.omega_star - omega[i]) / cfg.k_p[i];
    }
    out
}

/// Incremental voltage gradient of the storage function, the error coordinate
/// every voltage law damps:
///
/// - conventional droop: `[V]^{-1} K_Q^{-1} (K_Q (Q - Q_bar) + V - V_bar)`
/// - quadratic droop:    `[V]^{-1} Q - [V_bar]^{-1} Q_bar + K_Q^{-1} (V - V_bar)`
/// - reactive current:   `[V]^{-1} Q - [V_bar]^{-1} Q_bar`
/// - E-ARP:              `[V]^{-1} (Q - Q_bar)`
pub fn grad_v_incremental(
    kind: ControllerKind,
    k_q: &DVector<f64>,
    v: &DVector<f64>,
    q: &DVector<f64>,
    v_bar: &DVector<f64>,
    q_bar: &DVector<f64>,
) -> Result<DVector<f64>, DomainError> {
    check_positive(v)?;
    check_positive(v_bar)?;
    let n = v.len();
    Ok(match kind {
        ControllerKind::ConventionalDroop => DVector::from_fn(n, |i, _| {
            (q[i] - q_bar[i] + (v[i] - v_bar[i]) / k_q[i]) / v[i]
        }),
        ControllerKind::QuadraticDroop => DVector::from_fn(n, |i, _| {
            q[i] / v[i] - q_bar[i] / v_bar[i] + (v[i] - v_bar[i]) / k_q[i]
        }),
        ControllerKind::ReactiveCurrent => {
            DVector::from_fn(n, |i, _| q[i] / v[i] - q_bar[i] / v_bar[i])
        }
        ControllerKind::EArp => DVector::from_fn(n, |i, _| (q[i] - q_bar[i]) / v[i]),
    })
}

/// Diagonal of the input weight `R_2 = df/du_Q`: identity for conventional
/// droop and reactive current, `[V]` for quadratic droop and E-ARP.
pub fn r2_diag(kind: ControllerKind, v: &DVector<f64>) -> DVector<f64> {
    match kind {
        ControllerKind::ConventionalDroop | ControllerKind::ReactiveCurrent => {
            DVector::from_element(v.len(), 1.0)
        }
        ControllerKind::QuadraticDroop | ControllerKind::EArp => v.clone(),
    }
}

/// The effective damping `X(V)` in `V_dot = -X(V) grad_V` at constant input:
/// `T_Q^{-1} K_Q [V]` for both droop laws, `T_Q^{-1}` for reactive current,
/// and `[V] K_Q L_Q K_Q [V]` for E-ARP (positive semidefinite).
pub fn damping_x_eff(cfg: &ControllerConfig, v: &DVector<f64>) -> DMatrix<f64> {
    let n = v.len();
    match cfg.kind {
        ControllerKind::ConventionalDroop | ControllerKind::QuadraticDroop => {
            DMatrix::from_diagonal(&DVector::from_fn(n, |i, _| {
                cfg.k_q[i] * v[i] / cfg.t_q[i]
            }))
        }
        ControllerKind::ReactiveCurrent => {
            DMatrix::from_diagonal(&DVector::from_fn(n, |i, _| 1.0 / cfg.t_q[i]))
        }
        ControllerKind::EArp => {
            let mut x = cfg.l_q.clone();
            for i in 0..n {
                for j in 0..n {
                    x[(i, j)] *= cfg.k_q[i] * v[i] * cfg.k_q[j] * v[j];
                }
            }
            x
        }
    }
}

/// Right side of `T_Q lambda_dot = -R_2(V) grad_V` for the integral extension
/// of the voltage input; the realized input is `u_Q = K_lambda lambda`.
pub fn dynamic_uq_field(
    cfg: &ControllerConfig,
    v: &DVector<f64>,
    q: &DVector<f64>,
    v_bar: &DVector<f64>,
    q_bar: &DVector<f64>,
) -> Result<DVector<f64>, DomainError> {
    let grad = grad_v_incremental(cfg.kind, &cfg.k_q, v, q, v_bar, q_bar)?;
    Ok(-r2_diag(cfg.kind, v).component_mul(&grad))
}

/// Partial derivatives of the voltage field with respect to `phi` and `V`,
/// by the chain rule through the supplied injection Jacobians `dQ/dphi`
/// and `dQ/dV`. Used by the equilibrium solver and the closed-loop Jacobian.
pub fn voltage_field_jacobian(
    cfg: &ControllerConfig,
    v: &DVector<f64>,
    q: &DVector<f64>,
    u_q: &DVector<f64>,
    dq_dphi: &DMatrix<f64>,
    dq_dv: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>), DomainError> {
    check_positive(v)?;
    let n = v.len();
    let scale_rows = |mat: &DMatrix<f64>, s: &DVector<f64>| -> DMatrix<f64> {
        let mut out = mat.clone();
        for i in 0..out.nrows() {
            for j in 0..out.ncols() {
                out[(i, j)] *= s[i];
            }
        }
        out
    };
    Ok(match cfg.kind {
        ControllerKind::ConventionalDroop => {
            let df_dphi = -scale_rows(dq_dphi, &cfg.k_q);
            let mut df_dv = -scale_rows(dq_dv, &cfg.k_q);
            for i in 0..n {
                df_dv[(i, i)] -= 1.0;
            }
            (df_dphi, df_dv)
        }
        ControllerKind::QuadraticDroop => {
            let df_dphi = -scale_rows(dq_dphi, &cfg.k_q);
            let mut df_dv = -scale_rows(dq_dv, &cfg.k_q);
            for i in 0..n {
                df_dv[(i, i)] += -2.0 * v[i] + u_q[i];
            }
            (df_dphi, df_dv)
        }
        ControllerKind::ReactiveCurrent => {
            let inv_v = DVector::from_fn(n, |i, _| 1.0 / v[i]);
            let df_dphi = -scale_rows(dq_dphi, &inv_v);
            let mut df_dv = -scale_rows(dq_dv, &inv_v);
            for i in 0..n {
                df_dv[(i, i)] += q[i] / (v[i] * v[i]);
            }
            (df_dphi, df_dv)
        }
        ControllerKind::EArp => {
            // f = [V](u_Q - G q) with G = K_Q L_Q K_Q.
            let gq = scaled_consensus(cfg, q);
            let g_dq_dphi = scale_rows(&(&cfg.l_q * scale_rows(dq_dphi, &cfg.k_q)), &cfg.k_q);
            let g_dq_dv = scale_rows(&(&cfg.l_q * scale_rows(dq_dv, &cfg.k_q)), &cfg.k_q);
            let df_dphi = -scale_rows(&g_dq_dphi, v);
            let mut df_dv = -scale_rows(&g_dq_dv, v);
            for i in 0..n {
                df_dv[(i, i)] += u_q[i] - gq[i];
            }
            (df_dphi, df_dv)
        }
    })
}
