//! Grid topology and the matrices derived from it: reduced incidence,
//! reduced weighted Laplacian and injection shift factors (ISF).
//!
//! Edges are stored with `from < to`; a positive flow runs from `from` to
//! `to`. The reference node absorbs any injection imbalance and has an
//! all-zero ISF column.

use alloc::collections::{BTreeSet, VecDeque};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use sha2::{Digest, Sha256};

use crate::linalg::{Cholesky, Matrix};
use crate::{rng, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    /// Series reactance, strictly positive.
    pub reactance: f64,
    /// Symmetric thermal limit `f̄`, strictly positive.
    pub flow_limit: f64,
}

impl Edge {
    pub fn new(from: usize, to: usize, reactance: f64, flow_limit: f64) -> Self {
        Self {
            from,
            to,
            reactance,
            flow_limit,
        }
    }
}

/// A connected transmission network.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    n_nodes: usize,
    edges: Vec<Edge>,
    reference: usize,
}

impl Grid {
    /// Validates and builds a grid. Fails with [`Error::InvalidGrid`] on any
    /// broken invariant, including disconnection.
    pub fn new(n_nodes: usize, edges: Vec<Edge>, reference: usize) -> Result<Self> {
        if n_nodes == 0 {
            return Err(Error::InvalidGrid("grid needs at least one node".into()));
        }
        if reference >= n_nodes {
            return Err(Error::InvalidGrid(format!(
                "reference node {reference} out of range for {n_nodes} nodes"
            )));
        }
        let mut seen = BTreeSet::new();
        for (k, e) in edges.iter().enumerate() {
            check_edge(n_nodes, e).map_err(|m| Error::InvalidGrid(format!("edge {k}: {m}")))?;
            if !seen.insert((e.from, e.to)) {
                return Err(Error::InvalidGrid(format!(
                    "edge {k}: duplicate pair ({}, {})",
                    e.from, e.to
                )));
            }
        }
        if !is_connected(n_nodes, edges.iter().map(|e| (e.from, e.to))) {
            return Err(Error::InvalidGrid("graph is not connected".into()));
        }
        Ok(Self {
            n_nodes,
            edges,
            reference,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn reference(&self) -> usize {
        self.reference
    }

    pub fn flow_limits(&self) -> Vec<f64> {
        self.edges.iter().map(|e| e.flow_limit).collect()
    }

    pub fn edge_index(&self, from: usize, to: usize) -> Option<usize> {
        let (a, b) = if from < to { (from, to) } else { (to, from) };
        self.edges.iter().position(|e| e.from == a && e.to == b)
    }

    /// Hex SHA-256 over a canonical binary encoding of the grid (node count,
    /// reference, and each edge's endpoints and exact float bits).
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"lmplab-grid-v1");
        h.update((self.n_nodes as u64).to_le_bytes());
        h.update((self.reference as u64).to_le_bytes());
        for e in &self.edges {
            h.update((e.from as u64).to_le_bytes());
            h.update((e.to as u64).to_le_bytes());
            h.update(e.reactance.to_bits().to_le_bytes());
            h.update(e.flow_limit.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Unweighted hop distances from `source`.
    pub fn hop_distances(&self, source: usize) -> Vec<Option<usize>> {
        let adj = adjacency(self.n_nodes, self.edges.iter().map(|e| (e.from, e.to)));
        let mut dist = vec![None; self.n_nodes];
        dist[source] = Some(0);
        let mut queue = VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].unwrap_or(0);
            for &v in &adj[u] {
                if dist[v].is_none() {
                    dist[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// True when `self` has the same nodes and reference as `base` and every
    /// edge of `self` appears, bit-identical, in `base`.
    pub fn is_edge_subset_of(&self, base: &Grid) -> bool {
        self.n_nodes == base.n_nodes
            && self.reference == base.reference
            && self.edges.iter().all(|e| base.edges.contains(e))
    }
}

fn check_edge(n: usize, e: &Edge) -> core::result::Result<(), String> {
    if e.from >= n || e.to >= n {
        return Err(format!("node id out of range ({}, {})", e.from, e.to));
    }
    if e.from == e.to {
        return Err(format!("self-loop at node {}", e.from));
    }
    if e.from > e.to {
        return Err(format!(
            "endpoints must satisfy from < to, got ({}, {})",
            e.from, e.to
        ));
    }
    if !(e.reactance > 0.0 && e.reactance.is_finite()) {
        return Err(format!("reactance must be positive, got {}", e.reactance));
    }
    if !(e.flow_limit > 0.0 && e.flow_limit.is_finite()) {
        return Err(format!("flow limit must be positive, got {}", e.flow_limit));
    }
    Ok(())
}

fn adjacency(n: usize, pairs: impl Iterator<Item = (usize, usize)>) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for (a, b) in pairs {
        adj[a].push(b);
        adj[b].push(a);
    }
    adj
}

fn is_connected(n: usize, pairs: impl Iterator<Item = (usize, usize)>) -> bool {
    let adj = adjacency(n, pairs);
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    let mut count = 1;
    while let Some(u) = stack.pop() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                count += 1;
                stack.push(v);
            }
        }
    }
    count == n
}

/// Injection shift factors: `|E| × N`, flows are `S · p` for balanced `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct IsfMatrix {
    values: Matrix,
}

impl IsfMatrix {
    pub fn matrix(&self) -> &Matrix {
        &self.values
    }

    pub fn n_edges(&self) -> usize {
        self.values.rows()
    }

    pub fn n_nodes(&self) -> usize {
        self.values.cols()
    }

    pub fn flows(&self, injections: &[f64]) -> Vec<f64> {
        self.values.mul_vec(injections)
    }

    /// `Sᵀ y`.
    pub fn transpose_apply(&self, y: &[f64]) -> Vec<f64> {
        self.values.tr_mul_vec(y)
    }
}

fn column_map(grid: &Grid) -> Vec<Option<usize>> {
    let r = grid.reference;
    (0..grid.n_nodes)
        .map(|v| match v.cmp(&r) {
            core::cmp::Ordering::Less => Some(v),
            core::cmp::Ordering::Equal => None,
            core::cmp::Ordering::Greater => Some(v - 1),
        })
        .collect()
}

/// Full signed incidence matrix, `|E| × N`.
pub fn full_incidence(grid: &Grid) -> Matrix {
    let mut a = Matrix::zeros(grid.n_edges(), grid.n_nodes);
    for (k, e) in grid.edges.iter().enumerate() {
        a[(k, e.from)] = 1.0;
        a[(k, e.to)] = -1.0;
    }
    a
}

/// Reduced incidence `A_r`: the full incidence with the reference column
/// deleted, `|E| × (N−1)`.
pub fn build_incidence(grid: &Grid) -> Matrix {
    let cols = column_map(grid);
    let mut a = Matrix::zeros(grid.n_edges(), grid.n_nodes - 1);
    for (k, e) in grid.edges.iter().enumerate() {
        if let Some(c) = cols[e.from] {
            a[(k, c)] = 1.0;
        }
        if let Some(c) = cols[e.to] {
            a[(k, c)] = -1.0;
        }
    }
    a
}

/// `A_rᵀ X⁻¹`, `(N−1) × |E|`.
pub fn weighted_incidence_transpose(grid: &Grid) -> Matrix {
    let mut at = build_incidence(grid).transpose();
    for r in 0..at.rows() {
        for (k, e) in grid.edges.iter().enumerate() {
            at[(r, k)] /= e.reactance;
        }
    }
    at
}

/// Reduced weighted Laplacian `B_r = A_rᵀ X⁻¹ A_r`.
pub fn reduced_laplacian(grid: &Grid) -> Result<Matrix> {
    let cols = column_map(grid);
    let n = grid.n_nodes - 1;
    let mut b = Matrix::zeros(n, n);
    for e in &grid.edges {
        let y = 1.0 / e.reactance;
        let (ci, cj) = (cols[e.from], cols[e.to]);
        if let Some(i) = ci {
            b[(i, i)] += y;
        }
        if let Some(j) = cj {
            b[(j, j)] += y;
        }
        if let (Some(i), Some(j)) = (ci, cj) {
            b[(i, j)] -= y;
            b[(j, i)] -= y;
        }
    }
    if n > 0 && Cholesky::factor(&b).is_none() {
        return Err(Error::SingularLaplacian);
    }
    Ok(b)
}

/// Builds `S` from one Cholesky factorization of `B_r` and one solve per
/// edge, then inserts the zero reference column.
pub fn build_isf(grid: &Grid) -> Result<IsfMatrix> {
    let n = grid.n_nodes;
    let m = grid.n_edges();
    let mut values = Matrix::zeros(m, n);
    if n == 1 {
        return Ok(IsfMatrix { values });
    }
    let b = reduced_laplacian(grid)?;
    let chol = Cholesky::factor(&b).ok_or(Error::SingularLaplacian)?;
    let rhs = weighted_incidence_transpose(grid);
    let cols = column_map(grid);
    for k in 0..m {
        let z = chol.solve(&rhs.column(k));
        for (v, c) in cols.iter().enumerate() {
            if let Some(c) = c {
                values[(k, v)] = z[*c];
            }
        }
    }
    Ok(IsfMatrix { values })
}

/// Random connected grid: a random spanning tree plus random chords until
/// `⌈avg_degree·n/2⌉` edges (capped at the complete graph). Reactances are
/// uniform in `[0.5, 2.0]` and limits uniform in `[0.5, 1.5]·limit_scale`.
pub fn generate_synthetic_grid(
    n: usize,
    avg_degree: f64,
    limit_scale: f64,
    seed: u64,
) -> Result<Grid> {
    if n < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least 2 nodes, got {n}"
        )));
    }
    if !(avg_degree.is_finite() && avg_degree > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "avg_degree must be positive, got {avg_degree}"
        )));
    }
    if !(limit_scale.is_finite() && limit_scale > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "limit_scale must be positive, got {limit_scale}"
        )));
    }
    let half = avg_degree * n as f64 / 2.0;
    if half < (n - 1) as f64 {
        return Err(Error::InvalidConfig(format!(
            "avg_degree {avg_degree} gives {half} edges, fewer than the {} a spanning tree needs",
            n - 1
        )));
    }
    let target = (libm::ceil(half) as usize).min(n * (n - 1) / 2);

    let mut rng = rng::seeded(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut pairs = BTreeSet::new();
    for k in 1..n {
        let parent = order[rng.random_range(0..k)];
        let child = order[k];
        pairs.insert((parent.min(child), parent.max(child)));
    }
    while pairs.len() < target {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a != b {
            pairs.insert((a.min(b), a.max(b)));
        }
    }
    let edges = pairs
        .into_iter()
        .map(|(i, j)| {
            let x = rng.random_range(0.5..=2.0);
            let f = rng.random_range(0.5..=1.5) * limit_scale;
            Edge::new(i, j, x, f)
        })
        .collect();
    Grid::new(n, edges, 0)
}

/// Copy of `grid` without the listed edges. Fails with
/// [`Error::WouldDisconnect`] if the result is not connected.
pub fn remove_lines(grid: &Grid, edge_indices: &[usize]) -> Result<Grid> {
    let mut drop = vec![false; grid.n_edges()];
    for &k in edge_indices {
        if k >= grid.n_edges() {
            return Err(Error::InvalidConfig(format!(
                "edge index {k} out of range for {} edges",
                grid.n_edges()
            )));
        }
        if drop[k] {
            return Err(Error::InvalidConfig(format!("edge index {k} listed twice")));
        }
        drop[k] = true;
    }
    let edges: Vec<Edge> = grid
        .edges
        .iter()
        .zip(&drop)
        .filter(|(_, d)| !**d)
        .map(|(e, _)| *e)
        .collect();
    if !is_connected(grid.n_nodes, edges.iter().map(|e| (e.from, e.to))) {
        return Err(Error::WouldDisconnect(edge_indices.to_vec()));
    }
    Ok(Grid {
        n_nodes: grid.n_nodes,
        edges,
        reference: grid.reference,
    })
}
