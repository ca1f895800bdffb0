//! Power injections, the lossy-line rotation, the optimal feedforward input
//! and the synchronous equilibrium solver.
//!
//! Injections use the lossless trigonometric forms
//!
//! ```text
//! P = D Gamma(V) sin(D^T theta)
//! Q = [V] A(cos(D^T theta)) V
//! ```
//!
//! so `1^T P = 0` identically. A synchronous equilibrium is a pair
//! `(theta0, V_bar)` solving the angle feasibility equation
//! `D Gamma(V_bar) sin(D^T theta0) = Pi P*` (with `Pi` the oblique projection
//! removing the component absorbed by the feedforward) together with the
//! controller fixed-point equation `f(V_bar, Q_bar, u_Q_bar) = 0`.

use log::{debug, info};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::FRAC_PI_2;
use thiserror::Error;

use crate::controllers::{
    voltage_field, voltage_field_jacobian, ConfigError, ControllerConfig, ControllerKind,
};
use crate::topology::{from_phi, to_phi, NetworkTopology};
use crate::{check_positive, DomainError};

/// Per-node active and reactive injections at one operating point.
#[derive(Clone, Debug)]
pub struct PowerInjection {
    pub p: DVector<f64>,
    pub q: DVector<f64>,
}

/// Solver failures from [`solve_equilibrium`].
#[derive(Debug, Error)]
pub enum SolverError {
    #[error(
        "equilibrium iteration did not converge: residual {residual:.3e} after {attempts} starts"
    )]
    NoConvergence { residual: f64, attempts: usize },
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// A synchronous solution: uniformly rotating angles, constant frequency and
/// voltages, and the constant inputs sustaining them.
#[derive(Clone, Debug)]
pub struct Equilibrium {
    pub theta0: DVector<f64>,
    /// Synchronous frequency; equals `omega_star` under the optimal feedforward.
    pub omega0: f64,
    pub v_bar: DVector<f64>,
    pub u_p_bar: DVector<f64>,
    pub u_q_bar: DVector<f64>,
    pub p_bar: DVector<f64>,
    pub q_bar: DVector<f64>,
    /// Steady state of the secondary controller, `xi_bar = u_p_bar`.
    pub xi_bar: DVector<f64>,
    /// Steady state of the integral voltage extension, `K_lambda^{-1} u_Q_bar`.
    pub lambda_bar: DVector<f64>,
    /// Per-edge equilibrium angle differences `eta_bar = D^T theta0`.
    pub eta_bar: DVector<f64>,
    /// Infinity norm of the angle feasibility residual.
    pub residual_freq: f64,
    /// Infinity norm of the voltage fixed-point residual.
    pub residual_voltage: f64,
    /// True when every `|eta_bar_k| < pi/2`.
    pub security_region: bool,
}

impl Equilibrium {
    /// Uniform frequency vector `omega0 * 1`.
    pub fn omega_bar(&self, n: usize) -> DVector<f64> {
        DVector::from_element(n, self.omega0)
    }
}

/// `P = D Gamma(V) sin(D^T theta)` (compact form).
pub fn active_power(
    top: &NetworkTopology,
    theta: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<DVector<f64>, DomainError> {
    let gamma = top.gamma_diag(v)?;
    let mut p = DVector::zeros(top.n());
    for (k, e) in top.edges().iter().enumerate() {
        let flow = gamma[k] * (theta[e.i] - theta[e.j]).sin();
        p[e.i] += flow;
        p[e.j] -= flow;
    }
    Ok(p)
}

/// `P_i = sum_j B_ij V_i V_j sin(theta_i - theta_j)`, the element-wise form
/// of [`active_power`]; the two agree to rounding error.
pub fn active_power_elementwise(
    top: &NetworkTopology,
    theta: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<DVector<f64>, DomainError> {
    check_positive(v)?;
    let n = top.n();
    let mut b = DMatrix::zeros(n, n);
    for e in top.edges() {
        b[(e.i, e.j)] = e.b;
        b[(e.j, e.i)] = e.b;
    }
    Ok(DVector::from_fn(n, |i, _| {
        (0..n)
            .map(|j| b[(i, j)] * v[i] * v[j] * (theta[i] - theta[j]).sin())
            .sum()
    }))
}

/// `Q = [V] A(cos(D^T theta)) V` via the loopy Laplacian.
pub fn reactive_power(
    top: &NetworkTopology,
    theta: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<DVector<f64>, DomainError> {
    check_positive(v)?;
    let cos_eta = edge_cosines(top, theta);
    let a = top.loopy_laplacian(&cos_eta);
    let q = v.component_mul(&(&a * v));
    debug_assert!({
        let alt = reactive_power_shunt_form(top, theta, v).unwrap();
        (&q - &alt).amax() <= 1e-10 * (1.0 + q.amax())
    });
    Ok(q)
}

/// `Q = [V][A_0]V - |D| Gamma(V) cos(D^T theta)`, the variant separating the
/// diagonal `A_0 = col(B_11, ..., B_nn)` from the branch flows.
pub fn reactive_power_shunt_form(
    top: &NetworkTopology,
    theta: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<DVector<f64>, DomainError> {
    let gamma = top.gamma_diag(v)?;
    let mut q = DVector::from_fn(top.n(), |i, _| top.diag_term()[i] * v[i] * v[i]);
    for (k, e) in top.edges().iter().enumerate() {
        let flow = gamma[k] * (theta[e.i] - theta[e.j]).cos();
        q[e.i] -= flow;
        q[e.j] -= flow;
    }
    Ok(q)
}

/// Both injections at once.
pub fn injections(
    top: &NetworkTopology,
    theta: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<PowerInjection, DomainError> {
    Ok(PowerInjection {
        p: active_power(top, theta, v)?,
        q: reactive_power(top, theta, v)?,
    })
}

/// Per-edge cosines of `D^T theta`.
pub fn edge_cosines(top: &NetworkTopology, theta: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(top.m(), |k, _| {
        let e = top.edges()[k];
        (theta[e.i] - theta[e.j]).cos()
    })
}

/// Per-edge sines of `D^T theta`.
pub fn edge_sines(top: &NetworkTopology, theta: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(top.m(), |k, _| {
        let e = top.edges()[k];
        (theta[e.i] - theta[e.j]).sin()
    })
}

/// Sine and cosine of the homogeneity angle with exact endpoints: the cosine
/// is computed as `sin(pi/2 - phi)` so `phi = pi/2` yields exactly `(1, 0)`
/// and `phi = 0` exactly `(0, 1)`.
pub fn lossy_sin_cos(phi_loss: f64) -> Result<(f64, f64), DomainError> {
    if !(0.0..=FRAC_PI_2).contains(&phi_loss) {
        return Err(DomainError::PhiLossOutOfRange(phi_loss));
    }
    Ok((phi_loss.sin(), (FRAC_PI_2 - phi_loss).sin()))
}

/// Rotates lossless injections into the lossy network quantities:
/// `(P_l, Q_l) = Phi(phi) (P, Q)` per node, `Phi = [[sin, cos], [-cos, sin]]`.
pub fn lossy_transform(
    p: &DVector<f64>,
    q: &DVector<f64>,
    phi_loss: f64,
) -> Result<(DVector<f64>, DVector<f64>), DomainError> {
    let (s, c) = lossy_sin_cos(phi_loss)?;
    let n = p.len();
    let p_ell = DVector::from_fn(n, |i, _| s * p[i] + c * q[i]);
    let q_ell = DVector::from_fn(n, |i, _| -c * p[i] + s * q[i]);
    Ok((p_ell, q_ell))
}

/// Inverse rotation: `P = P_l sin(phi) - Q_l cos(phi)`,
/// `Q = P_l cos(phi) + Q_l sin(phi)`.
pub fn inverse_lossy_transform(
    p_ell: &DVector<f64>,
    q_ell: &DVector<f64>,
    phi_loss: f64,
) -> Result<(DVector<f64>, DVector<f64>), DomainError> {
    let (s, c) = lossy_sin_cos(phi_loss)?;
    let n = p_ell.len();
    let p = DVector::from_fn(n, |i, _| s * p_ell[i] - c * q_ell[i]);
    let q = DVector::from_fn(n, |i, _| c * p_ell[i] + s * q_ell[i]);
    Ok((p, q))
}

/// The constant input `u_P_bar = -1 (1^T P*) / (1^T K_P^{-1} 1)`, the minimum
/// `K_P^{-1}`-norm feedforward compatible with synchronization at
/// `omega = omega*`.
pub fn optimal_feedforward(k_p: &DVector<f64>, p_star: &DVector<f64>) -> DVector<f64> {
    let s: f64 = k_p.iter().map(|&k| 1.0 / k).sum();
    let level = -p_star.sum() / s;
    DVector::from_element(k_p.len(), level)
}

/// The steady injections `Pi P* = P* - K_P^{-1} 1 (1^T P*) / (1^T K_P^{-1} 1)`
/// realized under the optimal feedforward; they sum to zero.
pub fn steady_injections(k_p: &DVector<f64>, p_star: &DVector<f64>) -> DVector<f64> {
    let s: f64 = k_p.iter().map(|&k| 1.0 / k).sum();
    let shift = p_star.sum() / s;
    DVector::from_fn(p_star.len(), |i, _| p_star[i] - shift / k_p[i])
}

/// Jacobians of the injections with respect to `(phi, V)` at a point with
/// per-edge angles `eta = D_1^T phi`.
pub struct PowerJacobian {
    pub dp_dphi: DMatrix<f64>,
    pub dp_dv: DMatrix<f64>,
    pub dq_dphi: DMatrix<f64>,
    pub dq_dv: DMatrix<f64>,
}

/// Analytic injection Jacobians:
/// `dP/dphi = D Gamma [cos] D_1^T`, `dP/dV = D [sin] Gamma |D|^T [V]^{-1}`,
/// `dQ/dphi = |D| Gamma [sin] D_1^T`, `dQ/dV = [V] A(cos) + diag(A(cos) V)`.
pub fn power_jacobian(
    top: &NetworkTopology,
    theta: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<PowerJacobian, DomainError> {
    let n = top.n();
    let m = top.m();
    let gamma = top.gamma_diag(v)?;
    let sin_eta = edge_sines(top, theta);
    let cos_eta = edge_cosines(top, theta);

    let d = top.incidence();
    let d1 = top.reduced_incidence();
    let d_abs = top.absolute_incidence();

    let diag = |w: &DVector<f64>| DMatrix::from_diagonal(w);

    let gc = DVector::from_fn(m, |k, _| gamma[k] * cos_eta[k]);
    let gs = DVector::from_fn(m, |k, _| gamma[k] * sin_eta[k]);

    let dp_dphi = d * diag(&gc) * d1.transpose();
    let mut dp_dv = d * diag(&gs) * d_abs.transpose();
    for col in 0..n {
        for row in 0..n {
            dp_dv[(row, col)] /= v[col];
        }
    }
    let dq_dphi = d_abs * diag(&gs) * d1.transpose();

    let a = top.loopy_laplacian(&cos_eta);
    let av = &a * v;
    let mut dq_dv = a;
    for row in 0..n {
        for col in 0..n {
            dq_dv[(row, col)] *= v[row];
        }
        dq_dv[(row, row)] += av[row];
    }

    Ok(PowerJacobian {
        dp_dphi,
        dp_dv,
        dq_dphi,
        dq_dv,
    })
}

/// Feasibility margin for tree networks:
/// `|| Gamma(V_bar)^{-1} D^+ Pi P* ||_inf` with `D^+ = (D^T D)^{-1} D^T`.
/// A value below one certifies solvability of the angle equation at `V_bar`.
pub fn tree_feasibility_margin(
    top: &NetworkTopology,
    v_bar: &DVector<f64>,
    k_p: &DVector<f64>,
    p_star: &DVector<f64>,
) -> Result<f64, DomainError> {
    if !top.is_tree() {
        return Err(DomainError::NotATree {
            n: top.n(),
            m: top.m(),
        });
    }
    let gamma = top.gamma_diag(v_bar)?;
    if top.m() == 0 {
        return Ok(0.0);
    }
    let d = top.incidence();
    let gram = d.transpose() * d;
    let rhs = d.transpose() * steady_injections(k_p, p_star);
    let w = gram
        .lu()
        .solve(&rhs)
        .expect("tree incidence matrix has full column rank");
    Ok((0..top.m())
        .map(|k| (w[k] / gamma[k]).abs())
        .fold(0.0, f64::max))
}

/// Residual of the two feasibility equations at `(phi, V)`. The first
/// `n - 1` rows are the reduced angle equation, the remaining `n` the voltage
/// fixed point. For E-ARP the last voltage row is linearly dependent on the
/// others and is replaced by the gauge `sum_i ln(V_i) / k_Q_i = 0` fixing the
/// conserved quantity of that controller.
fn equilibrium_residual(
    top: &NetworkTopology,
    cfg: &ControllerConfig,
    phi: &DVector<f64>,
    v: &DVector<f64>,
    pi_p_star: &DVector<f64>,
) -> Result<DVector<f64>, DomainError> {
    let n = top.n();
    let theta = from_phi(phi);
    let p = active_power(top, &theta, v)?;
    let q = reactive_power(top, &theta, v)?;
    let f = voltage_field(cfg, v, &q, &cfg.u_q_bar)?;
    let mut r = DVector::zeros(2 * n - 1);
    for i in 0..n - 1 {
        r[i] = p[i] - pi_p_star[i];
    }
    for i in 0..n {
        r[n - 1 + i] = f[i];
    }
    if cfg.kind == ControllerKind::EArp {
        r[2 * n - 2] = (0..n).map(|i| v[i].ln() / cfg.k_q[i]).sum();
    }
    Ok(r)
}

fn equilibrium_jacobian(
    top: &NetworkTopology,
    cfg: &ControllerConfig,
    phi: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<DMatrix<f64>, DomainError> {
    let n = top.n();
    let theta = from_phi(phi);
    let q = reactive_power(top, &theta, v)?;
    let pj = power_jacobian(top, &theta, v)?;
    let (df_dphi, df_dv) =
        voltage_field_jacobian(cfg, v, &q, &cfg.u_q_bar, &pj.dq_dphi, &pj.dq_dv)?;

    let mut jac = DMatrix::zeros(2 * n - 1, 2 * n - 1);
    for i in 0..n - 1 {
        for c in 0..n - 1 {
            jac[(i, c)] = pj.dp_dphi[(i, c)];
        }
        for c in 0..n {
            jac[(i, n - 1 + c)] = pj.dp_dv[(i, c)];
        }
    }
    for i in 0..n {
        for c in 0..n - 1 {
            jac[(n - 1 + i, c)] = df_dphi[(i, c)];
        }
        for c in 0..n {
            jac[(n - 1 + i, n - 1 + c)] = df_dv[(i, c)];
        }
    }
    if cfg.kind == ControllerKind::EArp {
        for c in 0..n - 1 {
            jac[(2 * n - 2, c)] = 0.0;
        }
        for c in 0..n {
            jac[(2 * n - 2, n - 1 + c)] = 1.0 / (cfg.k_q[c] * v[c]);
        }
    }
    Ok(jac)
}

const NEWTON_TOL: f64 = 1e-10;
const NEWTON_MAX_ITERS: usize = 50;
const NEWTON_RESTARTS: usize = 10;
/// Seed of the deterministic restart sequence; never varied so repeated
/// solves of the same problem take identical paths.
const RESTART_SEED: u64 = 0xBE11_F10E;

/// A converged `(phi, V)` pair.
type PhiV = (DVector<f64>, DVector<f64>);

fn newton_attempt(
    top: &NetworkTopology,
    cfg: &ControllerConfig,
    mut phi: DVector<f64>,
    mut v: DVector<f64>,
    pi_p_star: &DVector<f64>,
) -> Result<Option<PhiV>, DomainError> {
    let n = top.n();
    for iter in 0..NEWTON_MAX_ITERS {
        let r = equilibrium_residual(top, cfg, &phi, &v, pi_p_star)?;
        let norm = r.amax();
        debug!("newton iter {iter}: residual {norm:.3e}");
        if norm < NEWTON_TOL {
            return Ok(Some((phi, v)));
        }
        let jac = equilibrium_jacobian(top, cfg, &phi, &v)?;
        let Some(delta) = jac.lu().solve(&(-&r)) else {
            return Ok(None);
        };
        // Halve the step while it would push a voltage out of the positive
        // orthant; give up on this start if no acceptable step remains.
        let dphi = delta.rows(0, n - 1).into_owned();
        let dv = delta.rows(n - 1, n).into_owned();
        let mut alpha = 1.0f64;
        let mut halvings = 0;
        while (0..n).any(|i| v[i] + alpha * dv[i] <= 0.0) {
            alpha *= 0.5;
            halvings += 1;
            if halvings > 60 {
                return Ok(None);
            }
        }
        phi += alpha * &dphi;
        v += alpha * &dv;
    }
    Ok(None)
}

/// Solves the synchronous equilibrium equations by Newton iteration on the
/// `2n - 1` unknowns `(phi, V)`: a flat start (`phi = 0`, `V = 1`) followed by
/// up to ten deterministic random restarts with `V in [0.8, 1.2]^n` and
/// `phi in [-0.3, 0.3]^{n-1}`. Converged solutions have `V_bar > 0` and
/// residual infinity norm below `1e-10`.
pub fn solve_equilibrium(
    top: &NetworkTopology,
    cfg: &ControllerConfig,
) -> Result<Equilibrium, SolverError> {
    cfg.validate()?;
    let n = top.n();
    assert_eq!(cfg.n(), n, "configuration sized for a different network");
    let pi_p_star = steady_injections(&cfg.k_p, &cfg.p_star);

    let mut rng = ChaCha8Rng::seed_from_u64(RESTART_SEED);
    let mut best_residual = f64::INFINITY;
    for attempt in 0..=NEWTON_RESTARTS {
        let (phi0, v0) = if attempt == 0 {
            (DVector::zeros(n - 1), DVector::from_element(n, 1.0))
        } else {
            (
                DVector::from_fn(n - 1, |_, _| rng.gen_range(-0.3..=0.3)),
                DVector::from_fn(n, |_, _| rng.gen_range(0.8..=1.2)),
            )
        };
        match newton_attempt(top, cfg, phi0.clone(), v0.clone(), &pi_p_star)? {
            Some((phi, v)) => {
                info!("equilibrium converged on attempt {attempt}");
                return Ok(build_equilibrium(top, cfg, &phi, &v)?);
            }
            None => {
                let r = equilibrium_residual(top, cfg, &phi0, &v0, &pi_p_star)
                    .map(|r| r.amax())
                    .unwrap_or(f64::INFINITY);
                best_residual = best_residual.min(r);
            }
        }
    }
    Err(SolverError::NoConvergence {
        residual: best_residual,
        attempts: NEWTON_RESTARTS + 1,
    })
}

fn build_equilibrium(
    top: &NetworkTopology,
    cfg: &ControllerConfig,
    phi: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<Equilibrium, DomainError> {
    let theta0 = from_phi(phi);
    Equilibrium::from_operating_point(top, cfg, &theta0, v)
}

impl Equilibrium {
    /// Packages `(theta0, V_bar)` as an equilibrium of `cfg`, recomputing the
    /// injections, inputs and residuals. The residual norms say how exactly
    /// the point satisfies the feasibility equations; callers decide how much
    /// slack to accept.
    pub fn from_operating_point(
        top: &NetworkTopology,
        cfg: &ControllerConfig,
        theta0: &DVector<f64>,
        v_bar: &DVector<f64>,
    ) -> Result<Self, DomainError> {
        let p_bar = active_power(top, theta0, v_bar)?;
        let q_bar = reactive_power(top, theta0, v_bar)?;
        let u_p_bar = optimal_feedforward(&cfg.k_p, &cfg.p_star);
        let pi_p_star = steady_injections(&cfg.k_p, &cfg.p_star);
        let f = voltage_field(cfg, v_bar, &q_bar, &cfg.u_q_bar)?;
        let eta_bar = DVector::from_fn(top.m(), |k, _| {
            let e = top.edges()[k];
            theta0[e.i] - theta0[e.j]
        });
        let lambda_bar = DVector::from_fn(top.n(), |i, _| cfg.u_q_bar[i] / cfg.k_lambda[i]);
        Ok(Equilibrium {
            theta0: theta0.clone(),
            omega0: cfg.omega_star,
            v_bar: v_bar.clone(),
            u_p_bar: u_p_bar.clone(),
            u_q_bar: cfg.u_q_bar.clone(),
            p_bar: p_bar.clone(),
            q_bar,
            xi_bar: u_p_bar,
            lambda_bar,
            residual_freq: (&p_bar - &pi_p_star).amax(),
            residual_voltage: f.amax(),
            security_region: eta_bar.iter().all(|&e| e.abs() < FRAC_PI_2),
            eta_bar,
        })
    }
}

/// Adjusts `p_star` and `u_q_bar` of `cfg` so that the given `(theta0, V_bar)`
/// is an exact equilibrium of the returned configuration:
/// `P* := P(theta0, V_bar)` (making the optimal feedforward zero) and
/// `u_Q_bar` solves `f(V_bar, Q_bar, u_Q_bar) = 0` for the configured kind.
/// Useful for constructing operating points with prescribed stress.
pub fn manufacture_equilibrium(
    top: &NetworkTopology,
    cfg: &ControllerConfig,
    theta0: &DVector<f64>,
    v_bar: &DVector<f64>,
) -> Result<(ControllerConfig, Equilibrium), DomainError> {
    check_positive(v_bar)?;
    let p_bar = active_power(top, theta0, v_bar)?;
    let q_bar = reactive_power(top, theta0, v_bar)?;
    let n = top.n();
    let u_q_bar = match cfg.kind {
        ControllerKind::ConventionalDroop => {
            DVector::from_fn(n, |i, _| v_bar[i] + cfg.k_q[i] * q_bar[i])
        }
        ControllerKind::QuadraticDroop => {
            DVector::from_fn(n, |i, _| v_bar[i] + cfg.k_q[i] * q_bar[i] / v_bar[i])
        }
        ControllerKind::ReactiveCurrent => DVector::from_fn(n, |i, _| q_bar[i] / v_bar[i]),
        ControllerKind::EArp => {
            cfg.k_q
                .component_mul(&(&cfg.l_q * cfg.k_q.component_mul(&q_bar)))
        }
    };
    let mut out = cfg.clone();
    out.p_star = p_bar;
    out.u_q_bar = u_q_bar;
    let eq = Equilibrium::from_operating_point(top, &out, theta0, v_bar)?;
    Ok((out, eq))
}

/// Closed-form quadratic droop voltage profile at fixed angles:
/// `V_bar = (I + K_Q A(cos(D^T theta0)))^{-1} u_Q_bar`.
pub fn quadratic_droop_voltage(
    top: &NetworkTopology,
    cfg: &ControllerConfig,
    theta0: &DVector<f64>,
) -> Option<DVector<f64>> {
    let cos_eta = edge_cosines(top, theta0);
    let mut mat = top.loopy_laplacian(&cos_eta);
    for i in 0..top.n() {
        for j in 0..top.n() {
            mat[(i, j)] *= cfg.k_q[i];
        }
        mat[(i, i)] += 1.0;
    }
    mat.lu().solve(&cfg.u_q_bar)
}

/// Closed-form reactive current voltage profile at fixed angles:
/// `V_bar = A(cos(D^T theta0))^{-1} u_Q_bar`.
pub fn reactive_current_voltage(
    top: &NetworkTopology,
    cfg: &ControllerConfig,
    theta0: &DVector<f64>,
) -> Option<DVector<f64>> {
    let cos_eta = edge_cosines(top, theta0);
    top.loopy_laplacian(&cos_eta).lu().solve(&cfg.u_q_bar)
}

/// Reduced angle coordinates of the equilibrium, `phi0 = to_phi(theta0)`.
pub fn equilibrium_phi(eq: &Equilibrium) -> DVector<f64> {
    to_phi(&eq.theta0)
}
