#![allow(dead_code)]

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use bregmangrid::controllers::{ControllerConfig, ControllerKind};
use bregmangrid::topology::NetworkTopology;

pub fn line2(b: f64, shunts: [f64; 2]) -> NetworkTopology {
    NetworkTopology::new(2, &[(1, 2, b)], &shunts).unwrap()
}

pub fn ring3() -> NetworkTopology {
    NetworkTopology::new(
        3,
        &[(1, 2, 1.0), (2, 3, 1.2), (1, 3, 0.8)],
        &[0.05, 0.05, 0.05],
    )
    .unwrap()
}

pub fn net4() -> NetworkTopology {
    NetworkTopology::new(
        4,
        &[(1, 2, 1.0), (2, 3, 1.2), (3, 4, 0.9), (1, 4, 1.1)],
        &[0.1, 0.1, 0.1, 0.1],
    )
    .unwrap()
}

pub fn path3() -> NetworkTopology {
    NetworkTopology::new(3, &[(1, 2, 1.0), (2, 3, 1.0)], &[0.1, 0.0, 0.1]).unwrap()
}

pub fn k4() -> NetworkTopology {
    NetworkTopology::new(
        4,
        &[
            (1, 2, 1.0),
            (1, 3, 1.0),
            (1, 4, 1.0),
            (2, 3, 1.0),
            (2, 4, 1.0),
            (3, 4, 1.0),
        ],
        &[0.1; 4],
    )
    .unwrap()
}

pub fn cycle4() -> NetworkTopology {
    NetworkTopology::new(
        4,
        &[(1, 2, 1.0), (2, 3, 1.0), (3, 4, 1.0), (1, 4, 1.0)],
        &[0.1; 4],
    )
    .unwrap()
}

/// Random connected graph: a random spanning tree plus a few extra edges.
/// Susceptances in [0.5, 5], shunts in [0, 0.5] with at least one positive.
pub fn random_topology(rng: &mut ChaCha8Rng, n: usize) -> NetworkTopology {
    let mut edges: Vec<(usize, usize, f64)> = Vec::new();
    let mut present = std::collections::HashSet::new();
    for j in 2..=n {
        let i = rng.gen_range(1..j);
        edges.push((i, j, rng.gen_range(0.5..5.0)));
        present.insert((i, j));
    }
    if n >= 3 {
        let extras = rng.gen_range(0..n);
        for _ in 0..extras {
            let i = rng.gen_range(1..n);
            let j = rng.gen_range(i + 1..=n);
            if present.insert((i, j)) {
                edges.push((i, j, rng.gen_range(0.5..5.0)));
            }
        }
    }
    let mut shunts: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..0.5)).collect();
    let fixed = rng.gen_range(0..n);
    shunts[fixed] = rng.gen_range(0.1..0.5);
    NetworkTopology::new(n, &edges, &shunts).unwrap()
}

/// Lightly loaded configuration with balanced setpoints; solvable from flat
/// start for every kind.
pub fn light_config(rng: &mut ChaCha8Rng, kind: ControllerKind, top: &NetworkTopology) -> ControllerConfig {
    let n = top.n();
    let mut cfg = ControllerConfig::new(kind, top);
    let mut p = DVector::from_fn(n, |_, _| rng.gen_range(-0.3..0.3));
    let mean = p.sum() / n as f64;
    for i in 0..n {
        p[i] -= mean;
    }
    cfg.p_star = p;
    if kind == ControllerKind::ConventionalDroop || kind == ControllerKind::QuadraticDroop {
        cfg.u_q_bar = DVector::from_fn(n, |_, _| rng.gen_range(0.95..1.1));
    } else if kind == ControllerKind::ReactiveCurrent {
        cfg.u_q_bar = DVector::from_fn(n, |_, _| rng.gen_range(0.05..0.3));
    }
    cfg
}

pub fn max_abs(v: &DVector<f64>) -> f64 {
    v.amax()
}

pub fn fd_step(x: f64) -> f64 {
    1e-6 * x.abs().max(1.0)
}

/// Central difference of a scalar function of one coordinate of `x`.
pub fn central_diff<F: FnMut(&DVector<f64>) -> f64>(
    mut f: F,
    x: &DVector<f64>,
    i: usize,
) -> f64 {
    let h = fd_step(x[i]);
    let mut xp = x.clone();
    let mut xm = x.clone();
    xp[i] += h;
    xm[i] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

/// Central difference of a vector function of one coordinate of `x`.
pub fn central_diff_vec<F: FnMut(&DVector<f64>) -> DVector<f64>>(
    mut f: F,
    x: &DVector<f64>,
    i: usize,
) -> DVector<f64> {
    let h = fd_step(x[i]);
    let mut xp = x.clone();
    let mut xm = x.clone();
    xp[i] += h;
    xm[i] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}
