//! Scenario files, report serialization and the command implementations
//! behind the CLI front end.
//!
//! A scenario bundles a network reference, a controller block, an initial
//! condition and the simulation horizon. All numeric output is emitted as
//! full-precision JSON or CSV so repeated runs with the same inputs and seed
//! are byte-identical.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::batch::certify_batch;
use crate::controllers::{ControllerConfig, ControllerKind};
use crate::power_flow::{solve_equilibrium, tree_feasibility_margin, Equilibrium, SolverError};
use crate::simulator::{
    conservation_monitor, dissipation_monitor, equilibrium_state, integrate, perturbed_state,
    sharing_monitor, write_csv_path, ConservationReport, DissipationReport, GridState,
    SharingReport, SimStatus,
};
use crate::stability::{certify, Verdict};
use crate::topology::NetworkTopology;

#[derive(Debug, Error)]
pub enum CliError {
    /// Malformed input of any sort; exit code 1.
    #[error("{0}")]
    Input(String),
    /// Equilibrium solver failure; exit code 2.
    #[error(transparent)]
    Solver(#[from] SolverError),
    /// Assumption-1 violation during simulation; exit code 3.
    #[error("voltage at node {node} hit the floor at step {step}; outputs were still written")]
    Assumption { node: usize, step: usize },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 1,
            CliError::Solver(_) => 2,
            CliError::Assumption { .. } => 3,
        }
    }

    fn input(e: impl std::fmt::Display) -> Self {
        CliError::Input(e.to_string())
    }
}

/// Scalar-or-per-node gain entry.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(untagged)]
pub enum GainSpec {
    Scalar(f64),
    PerNode(Vec<f64>),
}

impl GainSpec {
    fn to_vector(&self, n: usize, what: &str) -> Result<DVector<f64>, CliError> {
        match self {
            GainSpec::Scalar(x) => Ok(DVector::from_element(n, *x)),
            GainSpec::PerNode(v) if v.len() == n => Ok(DVector::from_vec(v.clone())),
            GainSpec::PerNode(v) => Err(CliError::Input(format!(
                "{what}: expected {n} entries, got {}",
                v.len()
            ))),
        }
    }
}

/// One weighted communication edge, 1-based endpoints.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CommEdge {
    pub i: usize,
    pub j: usize,
    #[serde(default = "one")]
    pub w: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSpec {
    pub kind: ControllerKind,
    #[serde(default)]
    pub t_p: Option<GainSpec>,
    #[serde(default)]
    pub t_q: Option<GainSpec>,
    #[serde(default)]
    pub k_p: Option<GainSpec>,
    #[serde(default)]
    pub k_q: Option<GainSpec>,
    #[serde(default)]
    pub k_lambda: Option<GainSpec>,
    #[serde(default)]
    pub omega_star: Option<f64>,
    #[serde(default)]
    pub p_star: Option<Vec<f64>>,
    #[serde(default)]
    pub u_q_bar: Option<Vec<f64>>,
    /// Communication graph for the secondary layer; electrical by default.
    #[serde(default)]
    pub l_p: Option<Vec<CommEdge>>,
    #[serde(default)]
    pub l_q: Option<Vec<CommEdge>>,
    #[serde(default)]
    pub phi_loss: Option<f64>,
    #[serde(default)]
    pub use_secondary: bool,
    #[serde(default)]
    pub use_dynamic_uq: bool,
    #[serde(default)]
    pub voltage_disturbance: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialSpec {
    /// Start exactly at the solved equilibrium.
    #[default]
    Equilibrium,
    /// Uniform perturbation of the equilibrium, deterministic in `seed`.
    Perturbed {
        radius: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Explicit state arrays.
    Explicit {
        theta: Vec<f64>,
        omega: Vec<f64>,
        v: Vec<f64>,
        #[serde(default)]
        xi: Option<Vec<f64>>,
        #[serde(default)]
        lambda: Option<Vec<f64>>,
    },
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// One of `omega_star`, `phi_loss`, or an indexed entry such as
    /// `p_star[2]`, `u_q_bar[1]`, `k_p[1]`, `k_q[3]`, `shunt_b[1]`,
    /// `edge_b[2]` (indices 1-based).
    pub parameter: String,
    pub from: f64,
    pub to: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    /// Network file path, relative to this scenario file.
    pub network: String,
    pub controller: ControllerSpec,
    #[serde(default)]
    pub initial: InitialSpec,
    #[serde(default = "default_t_end")]
    pub t_end: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_sample_every")]
    pub sample_every: usize,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
}

fn default_t_end() -> f64 {
    10.0
}
fn default_dt() -> f64 {
    1e-3
}
fn default_sample_every() -> usize {
    1
}

fn laplacian_from_edges(n: usize, edges: &[CommEdge]) -> Result<DMatrix<f64>, CliError> {
    let mut l = DMatrix::zeros(n, n);
    for e in edges {
        if e.i < 1 || e.i > n || e.j < 1 || e.j > n || e.i == e.j {
            return Err(CliError::Input(format!(
                "communication edge ({}, {}) out of range for {n} nodes",
                e.i, e.j
            )));
        }
        let (i, j) = (e.i - 1, e.j - 1);
        l[(i, i)] += e.w;
        l[(j, j)] += e.w;
        l[(i, j)] -= e.w;
        l[(j, i)] -= e.w;
    }
    Ok(l)
}

fn vector_field(
    values: &Option<Vec<f64>>,
    n: usize,
    what: &str,
) -> Result<Option<DVector<f64>>, CliError> {
    match values {
        None => Ok(None),
        Some(v) if v.len() == n => Ok(Some(DVector::from_vec(v.clone()))),
        Some(v) => Err(CliError::Input(format!(
            "{what}: expected {n} entries, got {}",
            v.len()
        ))),
    }
}

impl ControllerSpec {
    /// Materializes a config against a topology: defaults from
    /// [`ControllerConfig::new`], overridden field by field, then validated.
    pub fn build(&self, top: &NetworkTopology) -> Result<ControllerConfig, CliError> {
        let n = top.n();
        let mut cfg = ControllerConfig::new(self.kind, top);
        if let Some(g) = &self.t_p {
            cfg.t_p = g.to_vector(n, "t_p")?;
        }
        if let Some(g) = &self.t_q {
            cfg.t_q = g.to_vector(n, "t_q")?;
        }
        if let Some(g) = &self.k_p {
            cfg.k_p = g.to_vector(n, "k_p")?;
        }
        if let Some(g) = &self.k_q {
            cfg.k_q = g.to_vector(n, "k_q")?;
        }
        if let Some(g) = &self.k_lambda {
            cfg.k_lambda = g.to_vector(n, "k_lambda")?;
        }
        if let Some(w) = self.omega_star {
            cfg.omega_star = w;
        }
        if let Some(p) = vector_field(&self.p_star, n, "p_star")? {
            cfg.p_star = p;
        }
        if let Some(u) = vector_field(&self.u_q_bar, n, "u_q_bar")? {
            cfg.u_q_bar = u;
        }
        if let Some(edges) = &self.l_p {
            cfg.l_p = laplacian_from_edges(n, edges)?;
        }
        if let Some(edges) = &self.l_q {
            cfg.l_q = laplacian_from_edges(n, edges)?;
        }
        if let Some(phi) = self.phi_loss {
            cfg.phi_loss = phi;
        }
        cfg.use_secondary = self.use_secondary;
        cfg.use_dynamic_uq = self.use_dynamic_uq;
        cfg.voltage_disturbance = vector_field(&self.voltage_disturbance, n, "voltage_disturbance")?;
        cfg.validate().map_err(CliError::input)?;
        Ok(cfg)
    }
}

/// A parsed, validated scenario with its topology resolved.
pub struct LoadedScenario {
    pub scenario: ScenarioFile,
    pub topology: NetworkTopology,
    pub config: ControllerConfig,
}

/// Reads and validates a scenario. `network_override` replaces the network
/// path inside the file; otherwise that path resolves relative to the
/// scenario file's directory.
pub fn load_scenario(
    path: &Path,
    network_override: Option<&Path>,
) -> Result<LoadedScenario, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    let scenario: ScenarioFile = serde_json::from_str(&text)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    if !(scenario.dt > 0.0) {
        return Err(CliError::Input(format!(
            "dt must be positive, got {}",
            scenario.dt
        )));
    }
    if scenario.sample_every == 0 {
        return Err(CliError::Input("sample_every must be at least 1".into()));
    }
    if let InitialSpec::Perturbed { radius, .. } = &scenario.initial {
        if *radius < 0.0 {
            return Err(CliError::Input(format!(
                "perturbation radius must be nonnegative, got {radius}"
            )));
        }
    }
    let network_path = match network_override {
        Some(p) => p.to_path_buf(),
        None => path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&scenario.network),
    };
    let topology = NetworkTopology::from_path(&network_path).map_err(CliError::input)?;
    let config = scenario.controller.build(&topology)?;
    Ok(LoadedScenario {
        scenario,
        topology,
        config,
    })
}

fn vec_of(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

/// Equilibrium solution in plain-array form for JSON output.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EquilibriumReport {
    pub theta0: Vec<f64>,
    pub omega0: f64,
    pub v_bar: Vec<f64>,
    pub u_p_bar: Vec<f64>,
    pub u_q_bar: Vec<f64>,
    pub p_bar: Vec<f64>,
    pub q_bar: Vec<f64>,
    pub eta_bar: Vec<f64>,
    pub residual_freq: f64,
    pub residual_voltage: f64,
    pub security_region: bool,
    /// Angle-feasibility margin, reported for tree networks only.
    pub tree_margin: Option<f64>,
}

impl EquilibriumReport {
    pub fn new(top: &NetworkTopology, cfg: &ControllerConfig, eq: &Equilibrium) -> Self {
        let tree_margin = top
            .is_tree()
            .then(|| tree_feasibility_margin(top, &eq.v_bar, &cfg.k_p, &cfg.p_star))
            .and_then(Result::ok);
        EquilibriumReport {
            theta0: vec_of(&eq.theta0),
            omega0: eq.omega0,
            v_bar: vec_of(&eq.v_bar),
            u_p_bar: vec_of(&eq.u_p_bar),
            u_q_bar: vec_of(&eq.u_q_bar),
            p_bar: vec_of(&eq.p_bar),
            q_bar: vec_of(&eq.q_bar),
            eta_bar: vec_of(&eq.eta_bar),
            residual_freq: eq.residual_freq,
            residual_voltage: eq.residual_voltage,
            security_region: eq.security_region,
            tree_margin,
        }
    }
}

fn emit(
    out_dir: Option<&Path>,
    file_name: &str,
    value: &impl Serialize,
) -> Result<String, CliError> {
    let text = serde_json::to_string_pretty(value).map_err(CliError::input)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(CliError::input)?;
        std::fs::write(dir.join(file_name), format!("{text}\n")).map_err(CliError::input)?;
    }
    Ok(text)
}

/// `equilibrium` subcommand: solve and print the report.
pub fn cmd_equilibrium(
    scenario_path: &Path,
    network_override: Option<&Path>,
    out_dir: Option<&Path>,
) -> Result<(), CliError> {
    let loaded = load_scenario(scenario_path, network_override)?;
    let eq = solve_equilibrium(&loaded.topology, &loaded.config)?;
    let report = EquilibriumReport::new(&loaded.topology, &loaded.config, &eq);
    let text = emit(out_dir, "equilibrium.json", &report)?;
    println!("{text}");
    Ok(())
}

/// `certify` subcommand: solve, certify and print the certificate.
pub fn cmd_certify(
    scenario_path: &Path,
    network_override: Option<&Path>,
    out_dir: Option<&Path>,
) -> Result<(), CliError> {
    let loaded = load_scenario(scenario_path, network_override)?;
    let eq = solve_equilibrium(&loaded.topology, &loaded.config)?;
    let cert = certify(&loaded.topology, &loaded.config, &eq).map_err(CliError::input)?;
    let text = emit(out_dir, "certificate.json", &cert)?;
    println!("{text}");
    Ok(())
}

#[derive(Serialize)]
struct MonitorBundle {
    dissipation: DissipationReport,
    conservation: ConservationReport,
    sharing: SharingReport,
}

#[derive(Serialize)]
struct SimulationSummary {
    status: SimStatus,
    steps: usize,
    final_t: f64,
    records: usize,
    trace_csv: String,
    monitors: MonitorBundle,
}

fn build_initial(
    spec: &InitialSpec,
    cfg: &ControllerConfig,
    eq: &Equilibrium,
    seed_override: Option<u64>,
) -> Result<GridState, CliError> {
    let n = cfg.n();
    Ok(match spec {
        InitialSpec::Equilibrium => equilibrium_state(cfg, eq),
        InitialSpec::Perturbed { radius, seed } => {
            perturbed_state(cfg, eq, *radius, seed_override.unwrap_or(*seed))
        }
        InitialSpec::Explicit {
            theta,
            omega,
            v,
            xi,
            lambda,
        } => {
            let arr = |name: &str, x: &Vec<f64>| -> Result<DVector<f64>, CliError> {
                if x.len() != n {
                    return Err(CliError::Input(format!(
                        "initial.{name}: expected {n} entries, got {}",
                        x.len()
                    )));
                }
                Ok(DVector::from_vec(x.clone()))
            };
            let xi = match xi {
                Some(x) => arr("xi", x)?,
                None => eq.xi_bar.clone(),
            };
            let lambda = match (cfg.use_dynamic_uq, lambda) {
                (false, _) => None,
                (true, Some(l)) => Some(arr("lambda", l)?),
                (true, None) => Some(eq.lambda_bar.clone()),
            };
            GridState {
                theta: arr("theta", theta)?,
                omega: arr("omega", omega)?,
                v: arr("v", v)?,
                xi,
                lambda,
            }
        }
    })
}

/// `simulate` subcommand: solve, integrate, write the CSV trace and monitor
/// report. Returns the Assumption-1 error (exit 3) when the run hit the
/// voltage floor; outputs are written in every case.
pub fn cmd_simulate(
    scenario_path: &Path,
    network_override: Option<&Path>,
    out_dir: Option<&Path>,
    seed_override: Option<u64>,
) -> Result<(), CliError> {
    let loaded = load_scenario(scenario_path, network_override)?;
    let top = &loaded.topology;
    let cfg = &loaded.config;
    let eq = solve_equilibrium(top, cfg)?;
    let initial = build_initial(&loaded.scenario.initial, cfg, &eq, seed_override)?;
    let result = integrate(
        top,
        cfg,
        &eq,
        &initial,
        loaded.scenario.t_end,
        loaded.scenario.dt,
        loaded.scenario.sample_every,
    )
    .map_err(CliError::input)?;

    let dir = out_dir.unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir).map_err(CliError::input)?;
    let csv_path = dir.join("trace.csv");
    write_csv_path(&csv_path, top.n(), &result.records).map_err(CliError::input)?;

    let monitors = MonitorBundle {
        dissipation: dissipation_monitor(&result.records, cfg),
        conservation: conservation_monitor(&result.records, cfg),
        sharing: sharing_monitor(top, cfg, &eq, &result.records).map_err(CliError::input)?,
    };
    let summary = SimulationSummary {
        status: result.status.clone(),
        steps: result.steps,
        final_t: result.final_t,
        records: result.records.len(),
        trace_csv: csv_path.display().to_string(),
        monitors,
    };
    let text = emit(Some(dir), "monitors.json", &summary)?;
    println!("{text}");
    match result.status {
        SimStatus::VoltageFloor { step, node } => Err(CliError::Assumption { node, step }),
        _ => Ok(()),
    }
}

enum SweepTarget {
    OmegaStar,
    PhiLoss,
    PStar(usize),
    UQBar(usize),
    KP(usize),
    KQ(usize),
    ShuntB(usize),
    EdgeB(usize),
}

fn parse_sweep_target(name: &str) -> Result<SweepTarget, CliError> {
    match name {
        "omega_star" => return Ok(SweepTarget::OmegaStar),
        "phi_loss" => return Ok(SweepTarget::PhiLoss),
        _ => {}
    }
    let bad = || CliError::Input(format!("unknown sweep parameter '{name}'"));
    let open = name.find('[').ok_or_else(bad)?;
    if !name.ends_with(']') {
        return Err(bad());
    }
    let index: usize = name[open + 1..name.len() - 1].parse().map_err(|_| bad())?;
    if index == 0 {
        return Err(CliError::Input(format!(
            "sweep parameter '{name}': indices are 1-based"
        )));
    }
    Ok(match &name[..open] {
        "p_star" => SweepTarget::PStar(index - 1),
        "u_q_bar" => SweepTarget::UQBar(index - 1),
        "k_p" => SweepTarget::KP(index - 1),
        "k_q" => SweepTarget::KQ(index - 1),
        "shunt_b" => SweepTarget::ShuntB(index - 1),
        "edge_b" => SweepTarget::EdgeB(index - 1),
        _ => return Err(bad()),
    })
}

fn apply_sweep_target(
    top: &NetworkTopology,
    cfg: &ControllerConfig,
    target: &SweepTarget,
    value: f64,
) -> Result<(NetworkTopology, ControllerConfig), CliError> {
    let n = top.n();
    let mut cfg = cfg.clone();
    let check = |index: usize, len: usize| -> Result<(), CliError> {
        if index >= len {
            return Err(CliError::Input(format!(
                "sweep index {} out of range (size {len})",
                index + 1
            )));
        }
        Ok(())
    };
    let top = match target {
        SweepTarget::OmegaStar => {
            cfg.omega_star = value;
            top.clone()
        }
        SweepTarget::PhiLoss => {
            cfg.phi_loss = value;
            top.clone()
        }
        SweepTarget::PStar(i) => {
            check(*i, n)?;
            cfg.p_star[*i] = value;
            top.clone()
        }
        SweepTarget::UQBar(i) => {
            check(*i, n)?;
            cfg.u_q_bar[*i] = value;
            top.clone()
        }
        SweepTarget::KP(i) => {
            check(*i, n)?;
            cfg.k_p[*i] = value;
            top.clone()
        }
        SweepTarget::KQ(i) => {
            check(*i, n)?;
            cfg.k_q[*i] = value;
            top.clone()
        }
        SweepTarget::ShuntB(i) => {
            check(*i, n)?;
            let mut shunts = vec_of(top.shunt());
            shunts[*i] = value;
            rebuild_topology(top, None, &shunts)?
        }
        SweepTarget::EdgeB(k) => {
            check(*k, top.m())?;
            rebuild_topology(top, Some((*k, value)), &vec_of(top.shunt()))?
        }
    };
    cfg.validate().map_err(CliError::input)?;
    Ok((top, cfg))
}

fn rebuild_topology(
    top: &NetworkTopology,
    edge_change: Option<(usize, f64)>,
    shunts: &[f64],
) -> Result<NetworkTopology, CliError> {
    let edges: Vec<(usize, usize, f64)> = top
        .edges()
        .iter()
        .enumerate()
        .map(|(k, e)| {
            let b = match edge_change {
                Some((kk, value)) if kk == k => value,
                _ => e.b,
            };
            (e.i + 1, e.j + 1, b)
        })
        .collect();
    NetworkTopology::new(top.n(), &edges, shunts).map_err(CliError::input)
}

/// One certified point of a parameter sweep.
#[derive(Serialize, Deserialize, Debug)]
pub struct SweepPoint {
    pub value: f64,
    pub solved: bool,
    pub verdict: Option<Verdict>,
    pub hessian_min_eig: Option<f64>,
    pub max_real_part: Option<f64>,
    pub gershgorin_pass: Option<bool>,
    pub has_cutset_witness: Option<bool>,
    pub error: Option<String>,
}

/// `sweep` subcommand: linear grid over one scalar parameter, each point
/// solved and certified (in parallel with the default feature set), results
/// in grid order.
pub fn cmd_sweep(
    scenario_path: &Path,
    network_override: Option<&Path>,
    out_dir: Option<&Path>,
) -> Result<(), CliError> {
    let loaded = load_scenario(scenario_path, network_override)?;
    let Some(sweep) = &loaded.scenario.sweep else {
        return Err(CliError::Input(
            "scenario has no sweep block; nothing to sweep".into(),
        ));
    };
    if sweep.steps == 0 {
        return Err(CliError::Input("sweep.steps must be at least 1".into()));
    }
    let target = parse_sweep_target(&sweep.parameter)?;
    let values: Vec<f64> = (0..sweep.steps)
        .map(|j| {
            if sweep.steps == 1 {
                sweep.from
            } else {
                sweep.from + (sweep.to - sweep.from) * j as f64 / (sweep.steps - 1) as f64
            }
        })
        .collect();
    let mut cases = Vec::with_capacity(values.len());
    for &value in &values {
        cases.push(apply_sweep_target(
            &loaded.topology,
            &loaded.config,
            &target,
            value,
        )?);
    }
    let outcomes = certify_batch(&cases);
    let points: Vec<SweepPoint> = values
        .iter()
        .zip(outcomes)
        .map(|(&value, outcome)| match outcome {
            Ok((_, cert)) => SweepPoint {
                value,
                solved: true,
                verdict: Some(cert.verdict),
                hessian_min_eig: Some(cert.hessian_min_eig),
                max_real_part: Some(cert.jacobian.max_real_part),
                gershgorin_pass: Some(cert.gershgorin.pass),
                has_cutset_witness: Some(cert.cutset_witness.is_some()),
                error: None,
            },
            Err(e) => SweepPoint {
                value,
                solved: false,
                verdict: None,
                hessian_min_eig: None,
                max_real_part: None,
                gershgorin_pass: None,
                has_cutset_witness: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    let text = emit(out_dir, "sweep.json", &points)?;
    println!("{text}");
    Ok(())
}

/// Guards against a scenario accidentally redefining the lossless angle in a
/// sweep beyond its domain; used by the sweep path before validation.
pub fn phi_loss_in_range(phi: f64) -> bool {
    (0.0..=FRAC_PI_2).contains(&phi)
}

/// Re-exported assembly for tests: path of the scenario's network file.
pub fn resolve_network_path(scenario_path: &Path, network: &str) -> PathBuf {
    scenario_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(network)
}
