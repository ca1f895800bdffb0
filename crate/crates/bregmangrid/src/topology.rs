//! Network graph of the reduced microgrid: incidence algebra, edge and shunt
//! susceptances, and the loopy Laplacian consumed by every other module.
//!
//! Conventions fixed here and relied on everywhere else:
//! - nodes carry 1-based ids in files and reports, 0-based indices internally;
//! - edges are stored sorted by `(min endpoint, max endpoint)` and the
//!   incidence matrix `D` carries `+1` at the smaller endpoint, so matrices
//!   are reproducible across runs and platforms;
//! - node `n` (the last node) is the angle reference for the reduced
//!   coordinates `phi_i = theta_i - theta_n`.

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use std::path::Path;
use thiserror::Error;

use crate::{check_positive, DomainError};

/// Errors raised while constructing or parsing a [`NetworkTopology`].
#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("network must have at least one node")]
    Empty,
    #[error("node ids must be the consecutive integers 1..=n; {0} is missing or duplicated")]
    BadNodeIds(usize),
    #[error("edge ({from}, {to}) references a node outside 1..={n}")]
    EdgeOutOfRange { from: usize, to: usize, n: usize },
    #[error("edge ({0}, {0}) is a self-loop")]
    SelfLoop(usize),
    #[error("parallel edges between {0} and {1}; sum their susceptances into one line")]
    ParallelEdges(usize, usize),
    #[error("edge ({from}, {to}) must have positive susceptance, got {b}")]
    NonPositiveSusceptance { from: usize, to: usize, b: f64 },
    #[error("shunt susceptance at node {0} must be nonnegative, got {1}")]
    NegativeShunt(usize, f64),
    #[error("graph is disconnected")]
    Disconnected,
    #[error("failed to parse network file: {0}")]
    Parse(String),
    #[error("failed to read network file: {0}")]
    Io(String),
}

/// A transmission line, stored with 0-based endpoints `i < j` and
/// susceptance weight `b = B_ij > 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub b: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkFile {
    nodes: Vec<NodeSpec>,
    edges: Vec<EdgeSpec>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeSpec {
    id: usize,
    #[serde(default)]
    shunt_b: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeSpec {
    from: usize,
    to: usize,
    b: f64,
}

/// Immutable graph data shared by all analyses. All matrices are dense; the
/// intended scale is desk-size networks (tens of nodes).
#[derive(Clone, Debug)]
pub struct NetworkTopology {
    n: usize,
    edges: Vec<Edge>,
    shunt: DVector<f64>,
    /// `B_ii = B^_ii + sum_{j in N_i} B_ij`, the diagonal of the loopy Laplacian.
    diag_term: DVector<f64>,
    incidence: DMatrix<f64>,
    abs_incidence: DMatrix<f64>,
    reduced_incidence: DMatrix<f64>,
    e_matrix: DMatrix<f64>,
    /// Edge indices incident to each node.
    incident: Vec<Vec<usize>>,
}

impl NetworkTopology {
    /// Builds a topology from 1-based `(from, to, b)` edges and per-node
    /// shunts. Edges are canonicalized as described in the module docs.
    pub fn new(
        n: usize,
        edges: &[(usize, usize, f64)],
        shunts: &[f64],
    ) -> Result<Self, TopologyError> {
        if n == 0 {
            return Err(TopologyError::Empty);
        }
        if shunts.len() != n {
            return Err(TopologyError::BadNodeIds(shunts.len()));
        }
        for (idx, &s) in shunts.iter().enumerate() {
            if !(s >= 0.0) {
                return Err(TopologyError::NegativeShunt(idx + 1, s));
            }
        }

        let mut canon: Vec<Edge> = Vec::with_capacity(edges.len());
        for &(from, to, b) in edges {
            if from == 0 || to == 0 || from > n || to > n {
                return Err(TopologyError::EdgeOutOfRange { from, to, n });
            }
            if from == to {
                return Err(TopologyError::SelfLoop(from));
            }
            if !(b > 0.0) {
                return Err(TopologyError::NonPositiveSusceptance { from, to, b });
            }
            let (i, j) = if from < to { (from - 1, to - 1) } else { (to - 1, from - 1) };
            canon.push(Edge { i, j, b });
        }
        canon.sort_by_key(|e| (e.i, e.j));
        for w in canon.windows(2) {
            if w[0].i == w[1].i && w[0].j == w[1].j {
                return Err(TopologyError::ParallelEdges(w[0].i + 1, w[0].j + 1));
            }
        }

        let m = canon.len();
        let mut incident = vec![Vec::new(); n];
        for (k, e) in canon.iter().enumerate() {
            incident[e.i].push(k);
            incident[e.j].push(k);
        }

        // Connectivity by breadth-first search over the adjacency implied by
        // the edge list; a single isolated node (n = 1, m = 0) is connected.
        let mut seen = vec![false; n];
        let mut queue = vec![0usize];
        seen[0] = true;
        while let Some(u) = queue.pop() {
            for &k in &incident[u] {
                let e = canon[k];
                let w = if e.i == u { e.j } else { e.i };
                if !seen[w] {
                    seen[w] = true;
                    queue.push(w);
                }
            }
        }
        if seen.iter().any(|&s| !s) {
            return Err(TopologyError::Disconnected);
        }

        let mut incidence = DMatrix::zeros(n, m);
        for (k, e) in canon.iter().enumerate() {
            incidence[(e.i, k)] = 1.0;
            incidence[(e.j, k)] = -1.0;
        }
        let abs_incidence = incidence.map(f64::abs);
        let reduced_incidence = if n > 1 {
            incidence.rows(0, n - 1).into_owned()
        } else {
            DMatrix::zeros(0, m)
        };
        let e_matrix = DMatrix::from_fn(n, n.saturating_sub(1), |r, c| {
            if r == c {
                1.0
            } else if r == n - 1 {
                -1.0
            } else {
                0.0
            }
        });

        let shunt = DVector::from_column_slice(shunts);
        let diag_term = DVector::from_fn(n, |i, _| {
            shunt[i] + incident[i].iter().map(|&k| canon[k].b).sum::<f64>()
        });

        Ok(Self {
            n,
            edges: canon,
            shunt,
            diag_term,
            incidence,
            abs_incidence,
            reduced_incidence,
            e_matrix,
            incident,
        })
    }

    /// Parses the JSON network format:
    /// `{"nodes": [{"id": 1, "shunt_b": 0.1}, ...], "edges": [{"from": 1, "to": 2, "b": 5.0}, ...]}`.
    pub fn from_json_str(text: &str) -> Result<Self, TopologyError> {
        let file: NetworkFile =
            serde_json::from_str(text).map_err(|e| TopologyError::Parse(e.to_string()))?;
        let n = file.nodes.len();
        if n == 0 {
            return Err(TopologyError::Empty);
        }
        let mut shunts = vec![f64::NAN; n];
        for node in &file.nodes {
            if node.id == 0 || node.id > n || !shunts[node.id - 1].is_nan() {
                return Err(TopologyError::BadNodeIds(node.id));
            }
            shunts[node.id - 1] = node.shunt_b;
        }
        let edges: Vec<(usize, usize, f64)> =
            file.edges.iter().map(|e| (e.from, e.to, e.b)).collect();
        Self::new(n, &edges, &shunts)
    }

    /// Reads and parses a network file from disk.
    pub fn from_path(path: &Path) -> Result<Self, TopologyError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TopologyError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Per-node shunt susceptances `B^_ii >= 0`.
    pub fn shunt(&self) -> &DVector<f64> {
        &self.shunt
    }

    /// Diagonal `B_ii = B^_ii + sum_{j in N_i} B_ij` of the loopy Laplacian.
    pub fn diag_term(&self) -> &DVector<f64> {
        &self.diag_term
    }

    /// Incidence matrix `D` (n x m), `+1` at the smaller endpoint.
    pub fn incidence(&self) -> &DMatrix<f64> {
        &self.incidence
    }

    /// Element-wise absolute value `|D|`.
    pub fn absolute_incidence(&self) -> &DMatrix<f64> {
        &self.abs_incidence
    }

    /// `D_1`, the first `n - 1` rows of `D`.
    pub fn reduced_incidence(&self) -> &DMatrix<f64> {
        &self.reduced_incidence
    }

    /// `E = [I_{n-1}; -1^T]`, satisfying `E D_1 = D` and `phi = E^T theta`.
    pub fn e_matrix(&self) -> &DMatrix<f64> {
        &self.e_matrix
    }

    /// Indices of the edges incident to node `i` (0-based).
    pub fn incident_edges(&self, i: usize) -> &[usize] {
        &self.incident[i]
    }

    /// True when at least one shunt is strictly positive; the loopy Laplacian
    /// is positive definite exactly in that case.
    pub fn has_positive_shunt(&self) -> bool {
        self.shunt.iter().any(|&s| s > 0.0)
    }

    pub fn is_tree(&self) -> bool {
        self.edges.len() + 1 == self.n
    }

    /// Per-edge weights `gamma_k(V) = V_i V_j B_ij` as a diagonal matrix.
    pub fn gamma(&self, v: &DVector<f64>) -> Result<DMatrix<f64>, DomainError> {
        Ok(DMatrix::from_diagonal(&self.gamma_diag(v)?))
    }

    /// Diagonal of [`NetworkTopology::gamma`] as a vector.
    pub fn gamma_diag(&self, v: &DVector<f64>) -> Result<DVector<f64>, DomainError> {
        assert_eq!(v.len(), self.n, "voltage vector length");
        check_positive(v)?;
        Ok(DVector::from_fn(self.edges.len(), |k, _| {
            let e = self.edges[k];
            v[e.i] * v[e.j] * e.b
        }))
    }

    /// Loopy Laplacian `A(c)`: diagonal `B_ii`, off-diagonal `-B_ij c_k` for
    /// edge `k ~ {i, j}`. Symmetric by construction. `c` is meant to hold
    /// per-edge cosines, `|c_k| <= 1`, but no range check is applied.
    pub fn loopy_laplacian(&self, c: &DVector<f64>) -> DMatrix<f64> {
        assert_eq!(c.len(), self.edges.len(), "per-edge vector length");
        let mut a = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            a[(i, i)] = self.diag_term[i];
        }
        for (k, e) in self.edges.iter().enumerate() {
            let w = -e.b * c[k];
            a[(e.i, e.j)] += w;
            a[(e.j, e.i)] += w;
        }
        a
    }
}

/// Reduced angle coordinates `phi_i = theta_i - theta_n`. Satisfies
/// `D_1^T phi = D^T theta` exactly in exact arithmetic.
pub fn to_phi(theta: &DVector<f64>) -> DVector<f64> {
    let n = theta.len();
    assert!(n >= 1, "empty angle vector");
    let reference = theta[n - 1];
    DVector::from_fn(n - 1, |i, _| theta[i] - reference)
}

/// The representative `theta = (phi, 0)` of the rotation class of `phi`.
pub fn from_phi(phi: &DVector<f64>) -> DVector<f64> {
    let n = phi.len() + 1;
    DVector::from_fn(n, |i, _| if i + 1 < n { phi[i] } else { 0.0 })
}
