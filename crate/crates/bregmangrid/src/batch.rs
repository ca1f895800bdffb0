//! Fan-out of independent solve-and-certify jobs over many cases.
//!
//! With the default `parallel` feature the batch runs on a rayon pool;
//! without it the same entry point falls back to a sequential loop. Results
//! come back in input order either way, so downstream output is identical.

use crate::power_flow::{solve_equilibrium, Equilibrium, SolverError};
use crate::stability::{certify, Certificate};
use crate::topology::NetworkTopology;
use crate::ControllerConfig;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// One solve-and-certify outcome; the equilibrium is kept so callers can
/// report residuals or feed simulations without re-solving.
pub type CertifyOutcome = Result<(Equilibrium, Certificate), SolverError>;

fn certify_case(top: &NetworkTopology, cfg: &ControllerConfig) -> CertifyOutcome {
    let eq = solve_equilibrium(top, cfg)?;
    let cert = certify(top, cfg, &eq)?;
    Ok((eq, cert))
}

/// Sequential reference implementation; always available.
pub fn certify_batch_sequential(cases: &[(NetworkTopology, ControllerConfig)]) -> Vec<CertifyOutcome> {
    cases.iter().map(|(t, c)| certify_case(t, c)).collect()
}

/// Solves and certifies every case, in parallel when the `parallel` feature
/// is enabled. Output order always matches input order.
#[cfg(feature = "parallel")]
pub fn certify_batch(cases: &[(NetworkTopology, ControllerConfig)]) -> Vec<CertifyOutcome> {
    cases.par_iter().map(|(t, c)| certify_case(t, c)).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn certify_batch(cases: &[(NetworkTopology, ControllerConfig)]) -> Vec<CertifyOutcome> {
    certify_batch_sequential(cases)
}
