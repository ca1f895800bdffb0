//! Fixed-step closed-loop simulation with online Lyapunov, conservation and
//! power-sharing monitors, plus the CSV trace writer.
//!
//! Integration is classical fourth-order Runge-Kutta with a constant step;
//! together with seeded perturbations this makes every trace reproducible to
//! the bit. Timestamps are computed as `i * dt`, never accumulated.

use log::warn;
use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

use crate::controllers::{
    dynamic_uq_field, frequency_field, secondary_field, voltage_field, ControllerConfig,
    ControllerKind,
};
use crate::power_flow::{injections, inverse_lossy_transform, lossy_transform, Equilibrium};
use crate::storage::{bregman_s, StorageError, StorageEvaluation};
use crate::topology::NetworkTopology;
use crate::{check_positive, DomainError};

/// Voltages at or below this level abort a run as an assumption violation.
pub const V_MIN: f64 = 1e-6;

/// Full dynamic state of the closed loop. `lambda` is present exactly when
/// the dynamic `u_Q` extension is enabled.
#[derive(Clone, Debug, PartialEq)]
pub struct GridState {
    pub theta: DVector<f64>,
    pub omega: DVector<f64>,
    pub v: DVector<f64>,
    pub xi: DVector<f64>,
    pub lambda: Option<DVector<f64>>,
}

impl GridState {
    pub fn dim(&self) -> usize {
        3 * self.theta.len() + self.xi.len() + self.lambda.as_ref().map_or(0, |l| l.len())
    }

    pub fn is_finite(&self) -> bool {
        let finite = |v: &DVector<f64>| v.iter().all(|x| x.is_finite());
        finite(&self.theta)
            && finite(&self.omega)
            && finite(&self.v)
            && finite(&self.xi)
            && self.lambda.as_ref().is_none_or(finite)
    }

    /// Flattens to `[theta; omega; V; xi; lambda?]` for the integrator.
    pub fn pack(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        let n = self.theta.len();
        for i in 0..n {
            out[i] = self.theta[i];
            out[n + i] = self.omega[i];
            out[2 * n + i] = self.v[i];
            out[3 * n + i] = self.xi[i];
        }
        if let Some(l) = &self.lambda {
            for i in 0..n {
                out[4 * n + i] = l[i];
            }
        }
        out
    }

    pub fn unpack(n: usize, has_lambda: bool, x: &DVector<f64>) -> GridState {
        GridState {
            theta: DVector::from_fn(n, |i, _| x[i]),
            omega: DVector::from_fn(n, |i, _| x[n + i]),
            v: DVector::from_fn(n, |i, _| x[2 * n + i]),
            xi: DVector::from_fn(n, |i, _| x[3 * n + i]),
            lambda: has_lambda.then(|| DVector::from_fn(n, |i, _| x[4 * n + i])),
        }
    }
}

/// The exact fixed point of the closed loop as a state vector.
pub fn equilibrium_state(cfg: &ControllerConfig, eq: &Equilibrium) -> GridState {
    let n = eq.theta0.len();
    GridState {
        theta: eq.theta0.clone(),
        omega: DVector::from_element(n, eq.omega0),
        v: eq.v_bar.clone(),
        xi: eq.xi_bar.clone(),
        lambda: cfg.use_dynamic_uq.then(|| eq.lambda_bar.clone()),
    }
}

/// Equilibrium state with a uniform random perturbation of the given radius
/// on `theta`, `omega` and `V` (in that draw order); `xi` and `lambda` start
/// at their steady values. Deterministic in `seed`.
pub fn perturbed_state(
    cfg: &ControllerConfig,
    eq: &Equilibrium,
    radius: f64,
    seed: u64,
) -> GridState {
    let mut state = equilibrium_state(cfg, eq);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = state.theta.len();
    for i in 0..n {
        state.theta[i] += rng.gen_range(-radius..=radius);
    }
    for i in 0..n {
        state.omega[i] += rng.gen_range(-radius..=radius);
    }
    for i in 0..n {
        state.v[i] += rng.gen_range(-radius..=radius);
    }
    state
}

/// Injections as the controllers see them. In the lossy case the physical
/// quantities are `(P_l, Q_l)` and the controllers apply the inverse rotation,
/// yielding `(p_eff, q_eff)`; mathematically this recovers `(P, Q)` exactly,
/// so the closed lossy loop reproduces the lossless one. The exact-zero
/// cosine at `phi = pi/2` keeps that case on the bit-identical plain path.
pub struct Measurement {
    pub p: DVector<f64>,
    pub q: DVector<f64>,
    pub p_eff: DVector<f64>,
    pub q_eff: DVector<f64>,
    pub p_ell: Option<DVector<f64>>,
    pub q_ell: Option<DVector<f64>>,
}

pub fn measure(
    top: &NetworkTopology,
    cfg: &ControllerConfig,
    theta: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<Measurement, DomainError> {
    let inj = injections(top, theta, v)?;
    let (_, c) = crate::power_flow::lossy_sin_cos(cfg.phi_loss)?;
    if c == 0.0 {
        return Ok(Measurement {
            p_eff: inj.p.clone(),
            q_eff: inj.q.clone(),
            p: inj.p,
            q: inj.q,
            p_ell: None,
            q_ell: None,
        });
    }
    let (p_ell, q_ell) = lossy_transform(&inj.p, &inj.q, cfg.phi_loss)?;
    let (p_eff, q_eff) = inverse_lossy_transform(&p_ell, &q_ell, cfg.phi_loss)?;
    Ok(Measurement {
        p: inj.p,
        q: inj.q,
        p_eff,
        q_eff,
        p_ell: Some(p_ell),
        q_ell: Some(q_ell),
    })
}

/// Time derivative of the closed-loop state. The model is autonomous; `_t` is
/// accepted for signature uniformity only.
pub fn rhs(
    top: &NetworkTopology,
    cfg: &ControllerConfig,
    eq: &Equilibrium,
    state: &GridState,
    _t: f64,
) -> Result<GridState, DomainError> {
    check_positive(&state.v)?;
    let n = top.n();
    let meas = measure(top, cfg, &state.theta, &state.v)?;

    let u_p = if cfg.use_secondary {
        state.xi.clone()
    } else {
        eq.u_p_bar.clone()
    };
    let omega_dot = frequency_field(cfg, &state.omega, &meas.p_eff, &u_p)
        .component_div(&cfg.t_p);

    let u_q = if cfg.use_dynamic_uq {
        let lambda = state
            .lambda
            .as_ref()
            .expect("dynamic u_Q enabled but the state carries no lambda");
        cfg.k_lambda.component_mul(lambda)
    } else {
        cfg.u_q_bar.clone()
    };
    let mut f = voltage_field(cfg, &state.v, &meas.q_eff, &u_q)?;
    if let Some(d) = &cfg.voltage_disturbance {
        f += d;
    }
    let v_dot = f.component_div(&cfg.t_q);

    let xi_dot = if cfg.use_secondary {
        secondary_field(cfg, &state.xi, &state.omega)
    } else {
        DVector::zeros(n)
    };
    let lambda_dot = if cfg.use_dynamic_uq {
        Some(
            dynamic_uq_field(cfg, &state.v, &meas.q_eff, &eq.v_bar, &eq.q_bar)?
                .component_div(&cfg.t_q),
        )
    } else {
        None
    };

    Ok(GridState {
        theta: state.omega.clone(),
        omega: omega_dot,
        v: v_dot,
        xi: xi_dot,
        lambda: lambda_dot,
    })
}

/// One sampled point of a simulation.
#[derive(Clone, Debug)]
pub struct TraceRecord {
    pub t: f64,
    pub state: GridState,
    /// Injections in the lossless frame (what the controllers act on).
    pub p: DVector<f64>,
    pub q: DVector<f64>,
    /// Physical lossy injections, recorded when `phi_loss < pi/2`.
    pub p_ell: Option<DVector<f64>>,
    pub q_ell: Option<DVector<f64>>,
    pub s: f64,
    pub c: f64,
    pub c_q: f64,
    /// Analytic `d(S + C + C_Q)/dt` at this state.
    pub d_lyap: f64,
    /// `1^T K_Q^{-1} ln V`, conserved under E-ARP.
    pub conserved: f64,
    /// `k_P,i P_i` per node.
    pub sharing_p: DVector<f64>,
    /// `k_Q,i Q_i` per node.
    pub sharing_q: DVector<f64>,
}

/// Analytic dissipation rate of the total storage `S + C + C_Q`:
/// frequency damping, voltage damping through `X(V)`, consensus damping of
/// the secondary layer, and the supply from a constant voltage disturbance.
pub fn analytic_dissipation(
    cfg: &ControllerConfig,
    eq: &Equilibrium,
    state: &GridState,
    eval: &StorageEvaluation,
) -> f64 {
    let n = state.omega.len();
    let mut rate: f64 = (0..n)
        .map(|i| {
            let w = state.omega[i] - eq.omega0;
            -w * w / cfg.k_p[i]
        })
        .sum();
    rate -= eval.grad_v.dot(&(&eval.w_v * &eval.grad_v));
    if cfg.use_secondary {
        let xt = &state.xi - &eq.xi_bar;
        rate -= xt.dot(&(&cfg.l_p * &xt));
    }
    if let Some(d) = &cfg.voltage_disturbance {
        rate += (0..n).map(|i| eval.grad_v[i] * d[i] / cfg.t_q[i]).sum::<f64>();
    }
    rate
}

fn make_record(
    top: &NetworkTopology,
    cfg: &ControllerConfig,
    eq: &Equilibrium,
    t: f64,
    state: &GridState,
) -> Result<TraceRecord, StorageError> {
    let meas = measure(top, cfg, &state.theta, &state.v)?;
    let eval = bregman_s(top, cfg, state, eq)?;
    let d_lyap = analytic_dissipation(cfg, eq, state, &eval);
    let n = top.n();
    let conserved = (0..n).map(|i| state.v[i].ln() / cfg.k_q[i]).sum();
    Ok(TraceRecord {
        t,
        state: state.clone(),
        sharing_p: DVector::from_fn(n, |i, _| cfg.k_p[i] * meas.p_eff[i]),
        sharing_q: DVector::from_fn(n, |i, _| cfg.k_q[i] * meas.q_eff[i]),
        p: meas.p_eff,
        q: meas.q_eff,
        p_ell: meas.p_ell,
        q_ell: meas.q_ell,
        s: eval.bregman_value,
        c: eval.c_value,
        c_q: eval.c_q_value,
        d_lyap,
        conserved,
    })
}

/// How a run ended.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "kind")]
pub enum SimStatus {
    Completed,
    /// Some voltage reached `V_MIN`; Assumption-1 violation, not a crash.
    VoltageFloor { step: usize, node: usize },
    NonFinite { step: usize },
}

#[derive(Clone, Debug)]
pub struct SimResult {
    pub records: Vec<TraceRecord>,
    pub status: SimStatus,
    /// Number of steps actually taken.
    pub steps: usize,
    pub final_t: f64,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("dt must be positive, got {0}")]
    BadTimeStep(f64),
    #[error("t_end must be nonnegative, got {0}")]
    BadHorizon(f64),
    #[error("sample_every must be at least 1")]
    BadSampleStride,
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Storage(#[from] StorageError),
}

fn rk4_step(
    top: &NetworkTopology,
    cfg: &ControllerConfig,
    eq: &Equilibrium,
    x: &DVector<f64>,
    t: f64,
    dt: f64,
    has_lambda: bool,
) -> Result<DVector<f64>, DomainError> {
    let n = top.n();
    let deriv = |y: &DVector<f64>, s: f64| -> Result<DVector<f64>, DomainError> {
        let state = GridState::unpack(n, has_lambda, y);
        Ok(rhs(top, cfg, eq, &state, s)?.pack())
    };
    let k1 = deriv(x, t)?;
    let k2 = deriv(&(x + 0.5 * dt * &k1), t + 0.5 * dt)?;
    let k3 = deriv(&(x + 0.5 * dt * &k2), t + 0.5 * dt)?;
    let k4 = deriv(&(x + dt * &k3), t + dt)?;
    Ok(x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
}

/// Integrates the closed loop from `initial` to `t_end` with fixed step `dt`,
/// recording every `sample_every` steps and at the final time. Runs end early
/// with a [`SimStatus::VoltageFloor`] when a voltage reaches [`V_MIN`] (also
/// when an internal stage leaves the positive orthant), or with
/// [`SimStatus::NonFinite`] on numeric blow-up; the last valid state is
/// always recorded.
pub fn integrate(
    top: &NetworkTopology,
    cfg: &ControllerConfig,
    eq: &Equilibrium,
    initial: &GridState,
    t_end: f64,
    dt: f64,
    sample_every: usize,
) -> Result<SimResult, SimError> {
    if !(dt > 0.0) {
        return Err(SimError::BadTimeStep(dt));
    }
    if !(t_end >= 0.0) {
        return Err(SimError::BadHorizon(t_end));
    }
    if sample_every == 0 {
        return Err(SimError::BadSampleStride);
    }
    check_positive(&initial.v)?;
    let n = top.n();
    let has_lambda = initial.lambda.is_some();
    let steps = (t_end / dt).round() as usize;

    let mut records = Vec::with_capacity(steps / sample_every + 2);
    let mut x = initial.pack();
    let mut last_recorded = 0usize;
    records.push(make_record(top, cfg, eq, 0.0, initial)?);

    let mut status = SimStatus::Completed;
    let mut taken = 0usize;
    for i in 1..=steps {
        let t_prev = (i - 1) as f64 * dt;
        let next = match rk4_step(top, cfg, eq, &x, t_prev, dt, has_lambda) {
            Ok(next) => next,
            Err(DomainError::NonPositiveVoltage { index, .. }) => {
                status = SimStatus::VoltageFloor {
                    step: i,
                    node: index,
                };
                break;
            }
            Err(e) => return Err(e.into()),
        };
        let state = GridState::unpack(n, has_lambda, &next);
        if !state.is_finite() {
            status = SimStatus::NonFinite { step: i };
            break;
        }
        if let Some(node) = (0..n).find(|&j| state.v[j] <= V_MIN) {
            status = SimStatus::VoltageFloor { step: i, node };
            break;
        }
        x = next;
        taken = i;
        if i % sample_every == 0 && i != steps {
            records.push(make_record(top, cfg, eq, i as f64 * dt, &state)?);
            last_recorded = i;
        }
        if i == steps {
            records.push(make_record(top, cfg, eq, t_end, &state)?);
            last_recorded = i;
        }
    }
    if status != SimStatus::Completed && last_recorded != taken {
        let state = GridState::unpack(n, has_lambda, &x);
        records.push(make_record(top, cfg, eq, taken as f64 * dt, &state)?);
    }
    if status != SimStatus::Completed {
        warn!("simulation ended early: {status:?}");
    }
    Ok(SimResult {
        records,
        final_t: taken as f64 * dt,
        steps: taken,
        status,
    })
}

fn fmt_sci(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    let s = format!("{x:.12e}");
    let (mant, exp) = s.split_once('e').expect("scientific format");
    match exp.strip_prefix('-') {
        Some(d) => format!("{mant}e-{d:0>2}"),
        None => format!("{mant}e+{exp:0>2}"),
    }
}

/// Writes the trace in the fixed column layout
/// `t,theta_1..,omega_1..,V_1..,xi_1..,P_1..,Q_1..,S,C,CQ,dLyap,conserved`,
/// every value in full-precision scientific notation.
pub fn write_csv<W: Write>(out: &mut W, n: usize, records: &[TraceRecord]) -> std::io::Result<()> {
    let mut header = String::from("t");
    for name in ["theta", "omega", "V", "xi", "P", "Q"] {
        for i in 1..=n {
            header.push_str(&format!(",{name}_{i}"));
        }
    }
    header.push_str(",S,C,CQ,dLyap,conserved");
    writeln!(out, "{header}")?;
    for r in records {
        let mut row = fmt_sci(r.t);
        for v in [&r.state.theta, &r.state.omega, &r.state.v, &r.state.xi, &r.p, &r.q] {
            for i in 0..n {
                row.push(',');
                row.push_str(&fmt_sci(v[i]));
            }
        }
        for x in [r.s, r.c, r.c_q, r.d_lyap, r.conserved] {
            row.push(',');
            row.push_str(&fmt_sci(x));
        }
        writeln!(out, "{row}")?;
    }
    Ok(())
}

pub fn write_csv_path(path: &Path, n: usize, records: &[TraceRecord]) -> std::io::Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_csv(&mut file, n, records)
}

/// Lyapunov-decrease check over a trace: compares the differenced total
/// storage against the recorded analytic rate and scans for monotonicity.
#[derive(Clone, Debug, Serialize)]
pub struct DissipationReport {
    pub samples: usize,
    /// Worst `|numeric - analytic|` over the compared samples.
    pub max_abs_mismatch: f64,
    /// Same, scaled by the largest analytic rate magnitude.
    pub max_rel_mismatch: f64,
    pub monotone: bool,
    /// Worst increase of the total storage between consecutive samples
    /// beyond the slack (0 when monotone).
    pub max_increase: f64,
    /// Largest analytic rate seen; above slack-zero only under a disturbance.
    pub max_rate: f64,
    pub nonpositive_rate: bool,
    /// True when a constant voltage disturbance was configured, in which case
    /// positive rates are expected and the two flags above are informational.
    pub disturbance_active: bool,
}

/// Central differences on the uniformly sampled part of the trace, one-sided
/// second-order stencils at the ends. A trailing record at an odd spacing
/// (the final step) is excluded from differencing but kept for monotonicity.
pub fn dissipation_monitor(records: &[TraceRecord], cfg: &ControllerConfig) -> DissipationReport {
    let ell: Vec<f64> = records.iter().map(|r| r.s + r.c + r.c_q).collect();
    let ts: Vec<f64> = records.iter().map(|r| r.t).collect();
    let ana: Vec<f64> = records.iter().map(|r| r.d_lyap).collect();

    let mut uniform_len = ts.len();
    if ts.len() >= 3 {
        let step = ts[1] - ts[0];
        for i in 1..ts.len() - 1 {
            if ((ts[i + 1] - ts[i]) - step).abs() > 1e-9 * step.max(1e-12) {
                uniform_len = i + 1;
                break;
            }
        }
    }

    let mut max_abs = 0.0f64;
    if uniform_len >= 3 {
        let h = ts[1] - ts[0];
        for i in 0..uniform_len {
            let numeric = if i == 0 {
                (-3.0 * ell[0] + 4.0 * ell[1] - ell[2]) / (2.0 * h)
            } else if i == uniform_len - 1 {
                (3.0 * ell[i] - 4.0 * ell[i - 1] + ell[i - 2]) / (2.0 * h)
            } else {
                (ell[i + 1] - ell[i - 1]) / (2.0 * h)
            };
            max_abs = max_abs.max((numeric - ana[i]).abs());
        }
    }
    let scale = ana.iter().fold(0.0f64, |a, &x| a.max(x.abs())).max(1e-9);

    let slack = 1e-9 * ell.first().map_or(0.0, |l| l.abs()) + 1e-15;
    let mut max_increase = 0.0f64;
    for w in ell.windows(2) {
        max_increase = max_increase.max(w[1] - w[0] - slack);
    }
    let max_rate = ana.iter().fold(f64::NEG_INFINITY, |a, &x| a.max(x));

    DissipationReport {
        samples: records.len(),
        max_abs_mismatch: max_abs,
        max_rel_mismatch: max_abs / scale,
        monotone: max_increase <= 0.0,
        max_increase: max_increase.max(0.0),
        max_rate,
        nonpositive_rate: max_rate <= slack,
        disturbance_active: cfg.voltage_disturbance.is_some(),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ConservationReport {
    /// False for every kind except E-ARP.
    pub applicable: bool,
    pub initial: f64,
    /// Max deviation of `1^T K_Q^{-1} ln V` from its initial value.
    pub drift: f64,
}

pub fn conservation_monitor(records: &[TraceRecord], cfg: &ControllerConfig) -> ConservationReport {
    if cfg.kind != ControllerKind::EArp || records.is_empty() {
        return ConservationReport {
            applicable: false,
            initial: records.first().map_or(0.0, |r| r.conserved),
            drift: 0.0,
        };
    }
    let c0 = records[0].conserved;
    let drift = records
        .iter()
        .fold(0.0f64, |a, r| a.max((r.conserved - c0).abs()));
    ConservationReport {
        applicable: true,
        initial: c0,
        drift,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SharingReport {
    /// True when the rotating-frame derivative stayed below `1e-8` over the
    /// final second of the run; the deviations are meaningful only then.
    pub steady: bool,
    pub window_max_rhs: f64,
    /// `max_{i,j} |k_P,i P_i - k_P,j P_j|` at the final sample.
    pub active_max_dev: f64,
    /// `max_{i,j} |k_Q,i Q_i - k_Q,j Q_j|`, E-ARP only.
    pub reactive_earp_max_dev: Option<f64>,
    /// Spread of `(k_Q,i Q_i + V_i) / u_Q_bar,i`, conventional droop only.
    pub droop_ratio_max_dev: Option<f64>,
    /// Lossy-frame sharing spreads, recorded when `phi_loss < pi/2`.
    pub lossy_active_max_dev: Option<f64>,
    pub lossy_reactive_max_dev: Option<f64>,
}

fn spread(values: impl Iterator<Item = f64>) -> f64 {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo > hi {
        0.0
    } else {
        hi - lo
    }
}

/// Largest deviation of the closed loop from its synchronous motion: the
/// plain derivative with `omega* 1` subtracted from the angle rates.
fn rotating_frame_residual(
    top: &NetworkTopology,
    cfg: &ControllerConfig,
    eq: &Equilibrium,
    state: &GridState,
) -> Result<f64, DomainError> {
    let d = rhs(top, cfg, eq, state, 0.0)?;
    let mut worst = 0.0f64;
    for i in 0..top.n() {
        worst = worst.max((d.theta[i] - cfg.omega_star).abs());
        worst = worst.max(d.omega[i].abs());
        worst = worst.max(d.v[i].abs());
        worst = worst.max(d.xi[i].abs());
        if let Some(l) = &d.lambda {
            worst = worst.max(l[i].abs());
        }
    }
    Ok(worst)
}

/// Terminal power-sharing deviations, evaluated at the last sample and gated
/// by a steadiness check over the final second of simulated time.
pub fn sharing_monitor(
    top: &NetworkTopology,
    cfg: &ControllerConfig,
    eq: &Equilibrium,
    records: &[TraceRecord],
) -> Result<SharingReport, DomainError> {
    let Some(last) = records.last() else {
        return Ok(SharingReport {
            steady: false,
            window_max_rhs: f64::INFINITY,
            active_max_dev: 0.0,
            reactive_earp_max_dev: None,
            droop_ratio_max_dev: None,
            lossy_active_max_dev: None,
            lossy_reactive_max_dev: None,
        });
    };
    let t_end = last.t;
    let mut window_max_rhs = 0.0f64;
    let mut window_ok = t_end >= 1.0;
    for r in records.iter().filter(|r| r.t >= t_end - 1.0 - 1e-9) {
        let res = rotating_frame_residual(top, cfg, eq, &r.state)?;
        window_max_rhs = window_max_rhs.max(res);
        if res >= 1e-8 {
            window_ok = false;
        }
    }
    let n = top.n();
    let reactive_earp_max_dev = (cfg.kind == ControllerKind::EArp)
        .then(|| spread((0..n).map(|i| last.sharing_q[i])));
    let droop_ratio_max_dev = (cfg.kind == ControllerKind::ConventionalDroop
        && cfg.u_q_bar.iter().all(|&u| u.abs() > 0.0))
    .then(|| spread((0..n).map(|i| (cfg.k_q[i] * last.q[i] + last.state.v[i]) / cfg.u_q_bar[i])));
    let lossy_active_max_dev = last
        .p_ell
        .as_ref()
        .map(|p| spread((0..n).map(|i| cfg.k_p[i] * p[i])));
    let lossy_reactive_max_dev = last
        .q_ell
        .as_ref()
        .map(|q| spread((0..n).map(|i| cfg.k_q[i] * q[i])));
    Ok(SharingReport {
        steady: window_ok,
        window_max_rhs,
        active_max_dev: spread((0..n).map(|i| last.sharing_p[i])),
        reactive_earp_max_dev,
        droop_ratio_max_dev,
        lossy_active_max_dev,
        lossy_reactive_max_dev,
    })
}
