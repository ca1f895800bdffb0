//! Analysis and simulation of droop-controlled inverter microgrids.
//!
//! The crate models a network-reduced microgrid: `n` inverter nodes coupled
//! through `m` inductive lines with susceptance weights `B_ij > 0` and
//! optional shunts `B^_ii >= 0`. Writing `D` for the graph incidence matrix,
//! `Gamma(V) = diag(V_i V_j B_ij)` for the per-edge coupling weights and
//! `A(c)` for the shunt-augmented ("loopy") Laplacian, the closed loop reads
//!
//! ```text
//! theta_dot = omega
//! T_P omega_dot = -(omega - omega* 1) - K_P (P - P*) + u_P
//! T_Q V_dot     = f(V, Q, u_Q)
//!
//! P = D Gamma(V) sin(D^T theta)
//! Q = [V] A(cos(D^T theta)) V
//! ```
//!
//! where `f` is one of four interchangeable voltage controllers (conventional
//! droop, quadratic droop, reactive current, and the consensus-based E-ARP
//! law), `u_P` comes from a constant feedforward or a distributed secondary
//! controller, and `u_Q` is a constant or an optional integral extension.
//!
//! Around a synchronous equilibrium the crate evaluates an incremental
//! storage function of Bregman type,
//!
//! ```text
//! S_inc(x) = S(x) - S(x_bar) - grad S(x_bar)^T (x - x_bar),
//! ```
//!
//! together with its gradients, its analytic Hessian in reduced angle
//! coordinates, and the dissipation identity satisfied along trajectories.
//! From the Hessian it derives machine-checkable certificates: a per-node
//! Gershgorin convexity test, cut-set instability witnesses for stressed
//! operating points, and the spectrum of the closed-loop Jacobian.
//!
//! Modules:
//! - [`topology`]: graph, incidence algebra, loopy Laplacian.
//! - [`power_flow`]: injections, lossy rotation, feedforward, equilibrium solver.
//! - [`controllers`]: the four voltage laws, frequency/secondary/dynamic fields.
//! - [`storage`]: energy and shaping functions, incremental storage, Hessian.
//! - [`stability`]: convexity and instability certificates.
//! - [`simulator`]: fixed-step integration with dissipation/conservation/sharing monitors.
//! - [`scenario`]: JSON scenario files and the commands behind the CLI.
//! - [`batch`]: data-parallel fan-out used by sweeps (rayon behind the `parallel` feature).
//!
//! # Example
//!
//! ```
//! use bregmangrid::topology::NetworkTopology;
//! use bregmangrid::power_flow;
//! use nalgebra::DVector;
//!
//! // Two nodes joined by a line with B_12 = 1, small shunts at both ends.
//! let top = NetworkTopology::new(2, &[(1, 2, 1.0)], &[0.1, 0.1]).unwrap();
//! let theta = DVector::from_vec(vec![std::f64::consts::FRAC_PI_6, 0.0]);
//! let v = DVector::from_element(2, 1.0);
//! let p = power_flow::active_power(&top, &theta, &v).unwrap();
//! assert!((p[0] - 0.5).abs() < 1e-12);
//! assert!((p[0] + p[1]).abs() < 1e-12); // lossless: injections sum to zero
//! ```

// Guards of the form `!(x > 0.0)` are deliberate: unlike `x <= 0.0` they
// also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod batch;
pub mod controllers;
pub mod power_flow;
pub mod scenario;
pub mod simulator;
pub mod stability;
pub mod storage;
pub mod topology;

use nalgebra::DVector;
use thiserror::Error;

pub use controllers::{ControllerConfig, ControllerKind};
pub use power_flow::Equilibrium;
pub use simulator::GridState;
pub use stability::{Certificate, Verdict};
pub use topology::NetworkTopology;

/// Violations of the mathematical domain of an operation (as opposed to
/// configuration or I/O problems).
#[derive(Debug, Clone, Error)]
pub enum DomainError {
    /// A voltage magnitude was zero or negative where strict positivity is required.
    #[error("voltage must be strictly positive, got V_{index} = {value}")]
    NonPositiveVoltage { index: usize, value: f64 },
    /// The homogeneity angle of the lossy transform lies outside `[0, pi/2]`.
    #[error("homogeneity angle must lie in [0, pi/2], got {0}")]
    PhiLossOutOfRange(f64),
    /// Conventional droop storage needs a strictly positive constant input.
    #[error("conventional droop storage requires u_Q_bar > 0, got entry {index} = {value}")]
    NonPositiveDroopInput { index: usize, value: f64 },
    /// Operation defined only for tree networks.
    #[error("operation requires a tree network, got n = {n} nodes and m = {m} edges")]
    NotATree { n: usize, m: usize },
}

/// Checks `v > 0` element-wise, reporting the first violation.
pub(crate) fn check_positive(v: &DVector<f64>) -> Result<(), DomainError> {
    for (index, &value) in v.iter().enumerate() {
        if !(value > 0.0) {
            return Err(DomainError::NonPositiveVoltage { index, value });
        }
    }
    Ok(())
}
