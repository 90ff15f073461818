//! A small neural network engine specialised to nodal price prediction.
//!
//! Three model families share one flat parameter vector `θ`:
//!
//! * **GNN** – bilinear graph-filter layers
//!   `X_{t+1} = σ(Σ_{k=0..K} Wᵏ X_t H_{t,k} + 1·b_tᵀ)` with one trainable sparse
//!   filter `W` (self-loops plus both directions of every line) shared by all
//!   layers and orders.
//! * **FCNN** – dense affine layers over the flattened `N·d` input.
//! * **GiDNN** – the FCNN with weight blocks pruned to the grid's adjacency
//!   (block `(i, j)` survives iff `i == j` or `(i, j)` is a line).
//!
//! Gradients are written out by hand; there is no general autodiff.
//!
//! # Parameter layout
//!
//! GNN: filter values (the `N` diagonal entries, then for each line in edge
//! order the `(from, to)` and `(to, from)` entries), then for every layer the
//! `K+1` maps `H_{t,k}` (each `d_t × d_{t+1}`, row-major), then every layer's
//! bias.
//! FCNN: every layer's weight (`out × in`, row-major), then every layer's bias.
//! GiDNN: for every layer, for every output node `i`, one `d_t × d_{t+1}`
//! block per kept input node (self first, then neighbours in ascending order);
//! then every layer's bias (`N·d_{t+1}` each).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::grid::Grid;
use crate::linalg::Matrix;
use crate::{rng, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Gnn,
    Fcnn,
    Gidnn,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Gnn => "gnn",
            ModelKind::Fcnn => "fcnn",
            ModelKind::Gidnn => "gidnn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gnn" => Some(Self::Gnn),
            "fcnn" => Some(Self::Fcnn),
            "gidnn" => Some(Self::Gidnn),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Self::Relu),
            "identity" => Some(Self::Identity),
            _ => None,
        }
    }

    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Shape of a model.
///
/// For GNN and GiDNN `dims` are per-node feature widths `[d, h₁, …, 1]`; for
/// FCNN they are flat layer widths `[N·d, h₁, …, N]`. `order` is the filter
/// order `K` and only matters for GNN. Hidden layers use `hidden_activation`,
/// the output layer is linear.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub kind: ModelKind,
    pub dims: Vec<usize>,
    pub order: usize,
    pub hidden_activation: Activation,
}

impl Architecture {
    pub fn gnn(dims: Vec<usize>, order: usize) -> Self {
        Self {
            kind: ModelKind::Gnn,
            dims,
            order,
            hidden_activation: Activation::Relu,
        }
    }

    pub fn fcnn(dims: Vec<usize>) -> Self {
        Self {
            kind: ModelKind::Fcnn,
            dims,
            order: 0,
            hidden_activation: Activation::Relu,
        }
    }

    pub fn gidnn(dims: Vec<usize>) -> Self {
        Self {
            kind: ModelKind::Gidnn,
            dims,
            order: 0,
            hidden_activation: Activation::Relu,
        }
    }

    /// Default shapes: GNN `[d, 32, 32, 1]` with `K = 2`; FCNN two hidden
    /// layers of 256; GiDNN blocks of width 8.
    pub fn default_for(kind: ModelKind, n_nodes: usize, d: usize) -> Self {
        match kind {
            ModelKind::Gnn => Self::gnn(vec![d, 32, 32, 1], 2),
            ModelKind::Fcnn => Self::fcnn(vec![n_nodes * d, 256, 256, n_nodes]),
            ModelKind::Gidnn => Self::gidnn(vec![d, 8, 8, 1]),
        }
    }

    pub fn n_layers(&self) -> usize {
        self.dims.len().saturating_sub(1)
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.n_layers() {
            Activation::Identity
        } else {
            self.hidden_activation
        }
    }

    fn validate(&self, n_nodes: usize) -> Result<()> {
        if self.dims.len() < 2 || self.dims.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "invalid layer dims {:?}",
                self.dims
            )));
        }
        let last = *self.dims.last().unwrap_or(&0);
        match self.kind {
            ModelKind::Gnn | ModelKind::Gidnn if last != 1 => Err(Error::InvalidConfig(format!(
                "per-node output width must be 1, got {last}"
            ))),
            ModelKind::Fcnn if last != n_nodes => Err(Error::InvalidConfig(format!(
                "FCNN output width must equal node count {n_nodes}, got {last}"
            ))),
            ModelKind::Gnn if self.order == 0 => Err(Error::InvalidConfig(
                "filter order must be at least 1".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Node count and line endpoints; all a model needs to know about the grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    pub n_nodes: usize,
    pub edges: Vec<(usize, usize)>,
}

impl Topology {
    pub fn from_grid(grid: &Grid) -> Self {
        Self {
            n_nodes: grid.n_nodes(),
            edges: grid.edges().iter().map(|e| (e.from, e.to)).collect(),
        }
    }

    /// Number of filter entries: `N + 2|E|`.
    pub fn filter_nnz(&self) -> usize {
        self.n_nodes + 2 * self.edges.len()
    }

    /// Per node: itself, then its neighbours ascending.
    fn blocks(&self) -> Vec<Vec<usize>> {
        let mut nb: Vec<Vec<usize>> = vec![Vec::new(); self.n_nodes];
        for &(i, j) in &self.edges {
            nb[i].push(j);
            nb[j].push(i);
        }
        nb.iter_mut()
            .enumerate()
            .map(|(i, list)| {
                list.sort_unstable();
                let mut row = vec![i];
                row.extend(list.iter().copied());
                row
            })
            .collect()
    }
}

/// Sparsity pattern of the trainable filter `W`.
///
/// Row `r` holds `(column, slot)` pairs; `slot` indexes the filter values.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseFilter {
    rows: Vec<Vec<(usize, usize)>>,
    nnz: usize,
}

impl SparseFilter {
    pub fn new(topo: &Topology) -> Self {
        let n = topo.n_nodes;
        let mut rows: Vec<Vec<(usize, usize)>> = (0..n).map(|i| vec![(i, i)]).collect();
        for (e, &(i, j)) in topo.edges.iter().enumerate() {
            rows[i].push((j, n + 2 * e));
            rows[j].push((i, n + 2 * e + 1));
        }
        Self {
            rows,
            nnz: topo.filter_nnz(),
        }
    }

    pub fn nnz(&self) -> usize {
        self.nnz
    }

    /// Symmetrically normalized adjacency with self-loops,
    /// `D^{-1/2}(A + I)D^{-1/2}`, in slot order.
    pub fn normalized_adjacency(topo: &Topology) -> Vec<f64> {
        let n = topo.n_nodes;
        let mut deg = vec![1.0; n];
        for &(i, j) in &topo.edges {
            deg[i] += 1.0;
            deg[j] += 1.0;
        }
        let mut values: Vec<f64> = deg.iter().map(|d| 1.0 / d).collect();
        for &(i, j) in &topo.edges {
            let v = 1.0 / libm::sqrt(deg[i] * deg[j]);
            values.push(v);
            values.push(v);
        }
        values
    }

    /// `W X` for an `N × d` matrix.
    pub fn apply(&self, values: &[f64], x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for (r, row) in self.rows.iter().enumerate() {
            let dst = out.row_mut(r);
            for &(c, slot) in row {
                let w = values[slot];
                for (o, v) in dst.iter_mut().zip(x.row(c)) {
                    *o += w * v;
                }
            }
        }
        out
    }

    /// `Wᵀ G`.
    fn apply_transpose(&self, values: &[f64], g: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(g.rows(), g.cols());
        for (r, row) in self.rows.iter().enumerate() {
            let src = g.row(r);
            for &(c, slot) in row {
                let w = values[slot];
                for (o, v) in out.row_mut(c).iter_mut().zip(src) {
                    *o += w * v;
                }
            }
        }
        out
    }

    /// Accumulates `dW[slot] += Σ_f G[r, f] · Z[c, f]` over the pattern.
    fn accumulate_grad(&self, g: &Matrix, z: &Matrix, grad: &mut [f64]) {
        for (r, row) in self.rows.iter().enumerate() {
            let gr = g.row(r);
            for &(c, slot) in row {
                grad[slot] += crate::linalg::dot(gr, z.row(c));
            }
        }
    }
}

/// Per-layer block masks for the graph-pruned network.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMask {
    pub n_nodes: usize,
    pub block_in: usize,
    pub block_out: usize,
    /// Row-major `N × N`; entry `(i, j)` is true when output block `i` may
    /// read input block `j`.
    pub allowed: Vec<bool>,
}

impl BlockMask {
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.n_nodes + j]
    }

    pub fn trainable_weights(&self) -> usize {
        self.allowed.iter().filter(|b| **b).count() * self.block_in * self.block_out
    }
}

/// Masks for flat layer widths that split evenly into `N` node blocks.
pub fn gidnn_mask(grid: &Grid, layer_widths: &[usize]) -> Result<Vec<BlockMask>> {
    let n = grid.n_nodes();
    if let Some(w) = layer_widths.iter().find(|w| **w == 0 || **w % n != 0) {
        return Err(Error::InvalidBlocking(format!(
            "width {w} is not a positive multiple of {n} nodes"
        )));
    }
    let mut allowed = vec![false; n * n];
    for i in 0..n {
        allowed[i * n + i] = true;
    }
    for e in grid.edges() {
        allowed[e.from * n + e.to] = true;
        allowed[e.to * n + e.from] = true;
    }
    Ok(layer_widths
        .windows(2)
        .map(|w| BlockMask {
            n_nodes: n,
            block_in: w[0] / n,
            block_out: w[1] / n,
            allowed: allowed.clone(),
        })
        .collect())
}

/// Exact trainable parameter count.
///
/// GNN: `N + 2|E|` filter entries once per model plus, per layer,
/// `(K+1)·d_t·d_{t+1} + d_{t+1}`. FCNN: per layer `w_t·w_{t+1} + w_{t+1}` over
/// flat widths (with `w_t = N·d_t` this is `(N d_t)(N d_{t+1}) + N d_{t+1}`).
/// GiDNN: per layer `(N + 2|E|)·d_t·d_{t+1} + N·d_{t+1}`.
pub fn count_parameters(arch: &Architecture, topo: &Topology) -> usize {
    let n = topo.n_nodes;
    let nnz = topo.filter_nnz();
    let pairs = arch.dims.windows(2);
    match arch.kind {
        ModelKind::Gnn => {
            nnz + pairs
                .map(|w| (arch.order + 1) * w[0] * w[1] + w[1])
                .sum::<usize>()
        }
        ModelKind::Fcnn => pairs.map(|w| w[0] * w[1] + w[1]).sum(),
        ModelKind::Gidnn => pairs.map(|w| nnz * w[0] * w[1] + n * w[1]).sum(),
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Layout {
    Gnn {
        filter: SparseFilter,
        maps: Vec<usize>,
        biases: Vec<usize>,
    },
    Fcnn {
        weights: Vec<usize>,
        biases: Vec<usize>,
    },
    Gidnn {
        blocks: Vec<Vec<usize>>,
        weights: Vec<usize>,
        biases: Vec<usize>,
    },
}

impl Layout {
    fn build(arch: &Architecture, topo: &Topology) -> Self {
        let l = arch.n_layers();
        let d = &arch.dims;
        match arch.kind {
            ModelKind::Gnn => {
                let filter = SparseFilter::new(topo);
                let mut at = filter.nnz();
                let mut maps = Vec::with_capacity(l);
                for t in 0..l {
                    maps.push(at);
                    at += (arch.order + 1) * d[t] * d[t + 1];
                }
                let mut biases = Vec::with_capacity(l);
                for t in 0..l {
                    biases.push(at);
                    at += d[t + 1];
                }
                Layout::Gnn {
                    filter,
                    maps,
                    biases,
                }
            }
            ModelKind::Fcnn => {
                let mut at = 0;
                let mut weights = Vec::with_capacity(l);
                for t in 0..l {
                    weights.push(at);
                    at += d[t] * d[t + 1];
                }
                let mut biases = Vec::with_capacity(l);
                for t in 0..l {
                    biases.push(at);
                    at += d[t + 1];
                }
                Layout::Fcnn { weights, biases }
            }
            ModelKind::Gidnn => {
                let blocks = topo.blocks();
                let kept: usize = blocks.iter().map(Vec::len).sum();
                let mut at = 0;
                let mut weights = Vec::with_capacity(l);
                for t in 0..l {
                    weights.push(at);
                    at += kept * d[t] * d[t + 1];
                }
                let mut biases = Vec::with_capacity(l);
                for t in 0..l {
                    biases.push(at);
                    at += topo.n_nodes * d[t + 1];
                }
                Layout::Gidnn {
                    blocks,
                    weights,
                    biases,
                }
            }
        }
    }
}

/// A model bound to one topology.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    arch: Architecture,
    topology: Topology,
    grid_hash: String,
    layout: Layout,
    params: Vec<f64>,
}

impl Model {
    /// Fresh model: filter from the normalized adjacency, weights uniform in
    /// `±sqrt(6 / fan_in)`, biases zero.
    pub fn new(arch: Architecture, grid: &Grid, seed: u64) -> Result<Self> {
        let topo = Topology::from_grid(grid);
        arch.validate(topo.n_nodes)?;
        let mut model = Self::zeroed(arch, topo, grid.hash())?;
        let mut rng = rng::seeded(seed);
        let d = model.arch.dims.clone();
        let order = model.arch.order;
        let n = model.topology.n_nodes;
        match &model.layout {
            Layout::Gnn { filter, maps, .. } => {
                let init = SparseFilter::normalized_adjacency(&model.topology);
                model.params[..filter.nnz()].copy_from_slice(&init);
                for (t, &off) in maps.iter().enumerate() {
                    let len = (order + 1) * d[t] * d[t + 1];
                    let bound = libm::sqrt(6.0 / ((order + 1) * d[t]) as f64);
                    for v in &mut model.params[off..off + len] {
                        *v = rng.random_range(-bound..bound);
                    }
                }
            }
            Layout::Fcnn { weights, .. } => {
                for (t, &off) in weights.iter().enumerate() {
                    let bound = libm::sqrt(6.0 / d[t] as f64);
                    for v in &mut model.params[off..off + d[t] * d[t + 1]] {
                        *v = rng.random_range(-bound..bound);
                    }
                }
            }
            Layout::Gidnn {
                blocks, weights, ..
            } => {
                for (t, &off) in weights.iter().enumerate() {
                    let mut at = off;
                    for row in blocks.iter().take(n) {
                        let bound = libm::sqrt(6.0 / (row.len() * d[t]) as f64);
                        for v in &mut model.params[at..at + row.len() * d[t] * d[t + 1]] {
                            *v = rng.random_range(-bound..bound);
                        }
                        at += row.len() * d[t] * d[t + 1];
                    }
                }
            }
        }
        Ok(model)
    }

    fn zeroed(arch: Architecture, topology: Topology, grid_hash: String) -> Result<Self> {
        let layout = Layout::build(&arch, &topology);
        let params = vec![0.0; count_parameters(&arch, &topology)];
        Ok(Self {
            arch,
            topology,
            grid_hash,
            layout,
            params,
        })
    }

    /// Rebuilds a model from stored parameters (e.g. a checkpoint).
    pub fn from_parameters(arch: Architecture, grid: &Grid, params: Vec<f64>) -> Result<Self> {
        let topo = Topology::from_grid(grid);
        arch.validate(topo.n_nodes)?;
        let expected = count_parameters(&arch, &topo);
        if params.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "{} parameters supplied, architecture needs {expected}",
                params.len()
            )));
        }
        if let Some(k) = params.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter {k}")));
        }
        let mut model = Self::zeroed(arch, topo, grid.hash())?;
        model.params = params;
        Ok(model)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn kind(&self) -> ModelKind {
        self.arch.kind
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn grid_hash(&self) -> &str {
        &self.grid_hash
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Filter values `W` (GNN only; empty otherwise).
    pub fn filter_values(&self) -> &[f64] {
        match &self.layout {
            Layout::Gnn { filter, .. } => &self.params[..filter.nnz()],
            _ => &[],
        }
    }

    pub fn filter_values_mut(&mut self) -> &mut [f64] {
        match &self.layout {
            Layout::Gnn { filter, .. } => {
                let nnz = filter.nnz();
                &mut self.params[..nnz]
            }
            _ => &mut [],
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<ForwardCache> {
        match self.arch.kind {
            ModelKind::Gnn => gnn_forward(self, x),
            ModelKind::Fcnn => fcnn_forward(self, x),
            ModelKind::Gidnn => gidnn_forward(self, x),
        }
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.output)
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        let (n, d) = (self.topology.n_nodes, self.input_width());
        if x.rows() != n || x.cols() != d {
            return Err(Error::DimensionMismatch(format!(
                "input is {}×{}, model expects {n}×{d}",
                x.rows(),
                x.cols()
            )));
        }
        Ok(())
    }

    /// Per-node input feature count `d`.
    pub fn input_width(&self) -> usize {
        match self.arch.kind {
            ModelKind::Fcnn => self.arch.dims[0] / self.topology.n_nodes.max(1),
            _ => self.arch.dims[0],
        }
    }

    /// Copy of this model re-targeted to `grid`, a sub-topology of the one
    /// it was built on: filter entries of removed lines are dropped, every
    /// other parameter is copied as is.
    pub(crate) fn restrict_to(&self, grid: &Grid) -> Result<Self> {
        let Layout::Gnn { filter, .. } = &self.layout else {
            return Err(Error::IncompatibleTopology(
                "only GNN models can change topology".into(),
            ));
        };
        let new_topo = Topology::from_grid(grid);
        if new_topo.n_nodes != self.topology.n_nodes {
            return Err(Error::IncompatibleTopology(format!(
                "node count changed from {} to {}",
                self.topology.n_nodes, new_topo.n_nodes
            )));
        }
        let n = new_topo.n_nodes;
        let mut params = Vec::with_capacity(self.params.len());
        params.extend_from_slice(&self.params[..n]);
        for edge in &new_topo.edges {
            let old = self
                .topology
                .edges
                .iter()
                .position(|e| e == edge)
                .ok_or_else(|| {
                    Error::IncompatibleTopology(format!("line {edge:?} not in the base topology"))
                })?;
            params.push(self.params[n + 2 * old]);
            params.push(self.params[n + 2 * old + 1]);
        }
        params.extend_from_slice(&self.params[filter.nnz()..]);
        let mut model = Self::zeroed(self.arch.clone(), new_topo, grid.hash())?;
        model.params = params;
        Ok(model)
    }
}

#[derive(Debug, Clone)]
enum LayerCache {
    /// `Z_0 … Z_K` and the pre-activation.
    Graph { powers: Vec<Matrix>, pre: Matrix },
    /// Flat input and pre-activation.
    Dense { input: Vec<f64>, pre: Vec<f64> },
}

/// Activations kept by a forward pass for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    output: Vec<f64>,
}

impl ForwardCache {
    /// One prediction per node.
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} contains NaN or Inf")))
    }
}

/// Graph-filter forward pass.
pub fn gnn_forward(model: &Model, x: &Matrix) -> Result<ForwardCache> {
    let Layout::Gnn {
        filter,
        maps,
        biases,
    } = &model.layout
    else {
        return Err(Error::DimensionMismatch(format!(
            "gnn_forward on a {} model",
            model.kind().name()
        )));
    };
    model.check_input(x)?;
    let arch = &model.arch;
    let w = &model.params[..filter.nnz()];
    let n = x.rows();
    let mut layers = Vec::with_capacity(arch.n_layers());
    let mut current = x.clone();
    for t in 0..arch.n_layers() {
        let (d_in, d_out) = (arch.dims[t], arch.dims[t + 1]);
        let mut powers = Vec::with_capacity(arch.order + 1);
        powers.push(current);
        for k in 1..=arch.order {
            let next = filter.apply(w, &powers[k - 1]);
            powers.push(next);
        }
        let mut pre = Matrix::zeros(n, d_out);
        for (k, z) in powers.iter().enumerate() {
            let off = maps[t] + k * d_in * d_out;
            z.matmul_acc(&model.params[off..off + d_in * d_out], d_out, &mut pre);
        }
        let bias = &model.params[biases[t]..biases[t] + d_out];
        for r in 0..n {
            for (p, b) in pre.row_mut(r).iter_mut().zip(bias) {
                *p += b;
            }
        }
        check_finite(pre.as_slice(), "activation")?;
        let act = arch.activation(t);
        let out = Matrix::from_rows(
            n,
            d_out,
            pre.as_slice().iter().map(|&v| act.apply(v)).collect(),
        );
        layers.push(LayerCache::Graph { powers, pre });
        current = out;
    }
    let output = current.column(0);
    Ok(ForwardCache { layers, output })
}

fn add_assign(a: &mut Matrix, b: &Matrix) {
    let cols = a.cols();
    for r in 0..a.rows() {
        let src = b.row(r);
        for (x, y) in a.row_mut(r).iter_mut().zip(src).take(cols) {
            *x += y;
        }
    }
}

/// Fully connected forward pass over the row-major flattened input.
pub fn fcnn_forward(model: &Model, x: &Matrix) -> Result<ForwardCache> {
    let Layout::Fcnn { weights, biases } = &model.layout else {
        return Err(Error::DimensionMismatch(format!(
            "fcnn_forward on a {} model",
            model.kind().name()
        )));
    };
    model.check_input(x)?;
    let d = &model.arch.dims;
    let mut layers = Vec::with_capacity(model.arch.n_layers());
    let mut current = x.as_slice().to_vec();
    for t in 0..model.arch.n_layers() {
        let w = Matrix::from_rows(
            d[t + 1],
            d[t],
            model.params[weights[t]..weights[t] + d[t] * d[t + 1]].to_vec(),
        );
        let mut pre = w.mul_vec(&current);
        for (p, b) in pre
            .iter_mut()
            .zip(&model.params[biases[t]..biases[t] + d[t + 1]])
        {
            *p += b;
        }
        check_finite(&pre, "activation")?;
        let act = model.arch.activation(t);
        let out: Vec<f64> = pre.iter().map(|&v| act.apply(v)).collect();
        layers.push(LayerCache::Dense {
            input: current,
            pre,
        });
        current = out;
    }
    Ok(ForwardCache {
        layers,
        output: current,
    })
}

/// Graph-pruned forward pass: identical to [`fcnn_forward`] with every weight
/// block outside the adjacency pattern held at zero.
pub fn gidnn_forward(model: &Model, x: &Matrix) -> Result<ForwardCache> {
    let Layout::Gidnn {
        blocks,
        weights,
        biases,
    } = &model.layout
    else {
        return Err(Error::DimensionMismatch(format!(
            "gidnn_forward on a {} model",
            model.kind().name()
        )));
    };
    model.check_input(x)?;
    let d = &model.arch.dims;
    let n = model.topology.n_nodes;
    let mut layers = Vec::with_capacity(model.arch.n_layers());
    let mut current = x.as_slice().to_vec();
    for t in 0..model.arch.n_layers() {
        let (di, dout) = (d[t], d[t + 1]);
        let mut pre = model.params[biases[t]..biases[t] + n * dout].to_vec();
        let mut at = weights[t];
        for (i, row) in blocks.iter().enumerate() {
            let out = &mut pre[i * dout..(i + 1) * dout];
            for &j in row {
                let block = &model.params[at..at + di * dout];
                let input = &current[j * di..(j + 1) * di];
                for (c, &xv) in input.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    for (o, w) in out.iter_mut().zip(&block[c * dout..(c + 1) * dout]) {
                        *o += xv * w;
                    }
                }
                at += di * dout;
            }
        }
        check_finite(&pre, "activation")?;
        let act = model.arch.activation(t);
        let out: Vec<f64> = pre.iter().map(|&v| act.apply(v)).collect();
        layers.push(LayerCache::Dense {
            input: current,
            pre,
        });
        current = out;
    }
    Ok(ForwardCache {
        layers,
        output: current,
    })
}

/// Gradient of a scalar loss with respect to `θ`, given `∂L/∂π̂`.
pub fn backward(model: &Model, cache: &ForwardCache, grad_output: &[f64]) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; model.n_params()];
    backward_into(model, cache, grad_output, &mut grad)?;
    Ok(grad)
}

/// Like [`backward`] but accumulates into `grad`.
pub fn backward_into(
    model: &Model,
    cache: &ForwardCache,
    grad_output: &[f64],
    grad: &mut [f64],
) -> Result<()> {
    if grad_output.len() != cache.output.len() || grad.len() != model.n_params() {
        return Err(Error::DimensionMismatch(format!(
            "upstream gradient {} / buffer {} for output {} / {} parameters",
            grad_output.len(),
            grad.len(),
            cache.output.len(),
            model.n_params()
        )));
    }
    check_finite(grad_output, "upstream gradient")?;
    match &model.layout {
        Layout::Gnn {
            filter,
            maps,
            biases,
        } => gnn_backward(model, filter, maps, biases, cache, grad_output, grad),
        Layout::Fcnn { weights, biases } => {
            fcnn_backward(model, weights, biases, cache, grad_output, grad)
        }
        Layout::Gidnn {
            blocks,
            weights,
            biases,
        } => gidnn_backward(model, blocks, weights, biases, cache, grad_output, grad),
    }
    check_finite(grad, "gradient")
}

fn gnn_backward(
    model: &Model,
    filter: &SparseFilter,
    maps: &[usize],
    biases: &[usize],
    cache: &ForwardCache,
    grad_output: &[f64],
    grad: &mut [f64],
) {
    let arch = &model.arch;
    let w = &model.params[..filter.nnz()];
    let n = grad_output.len();
    let mut upstream = Matrix::from_rows(n, 1, grad_output.to_vec());
    for t in (0..arch.n_layers()).rev() {
        let LayerCache::Graph { powers, pre } = &cache.layers[t] else {
            unreachable!("graph cache")
        };
        let (d_in, d_out) = (arch.dims[t], arch.dims[t + 1]);
        let act = arch.activation(t);
        let mut gpre = upstream;
        for r in 0..n {
            for (g, &p) in gpre.row_mut(r).iter_mut().zip(pre.row(r)) {
                *g *= act.derivative(p);
            }
        }
        for r in 0..n {
            for (b, g) in grad[biases[t]..biases[t] + d_out]
                .iter_mut()
                .zip(gpre.row(r))
            {
                *b += g;
            }
        }
        let need_input_grad = t > 0;
        let mut grad_powers: Vec<Matrix> = Vec::with_capacity(powers.len());
        for (k, z) in powers.iter().enumerate() {
            let off = maps[t] + k * d_in * d_out;
            // dH_k += Z_kᵀ G
            z.tr_matmul_acc(&gpre, &mut grad[off..off + d_in * d_out]);
            // dZ_k = G H_kᵀ
            if need_input_grad || k > 0 {
                let h_t =
                    Matrix::from_rows(d_in, d_out, model.params[off..off + d_in * d_out].to_vec())
                        .transpose();
                grad_powers.push(gpre.matmul(&h_t));
            } else {
                grad_powers.push(Matrix::zeros(0, 0));
            }
        }
        // Z_k = W Z_{k−1}: walk back from the highest power
        let mut acc = grad_powers.pop().unwrap_or_else(|| Matrix::zeros(n, d_in));
        for k in (1..powers.len()).rev() {
            filter.accumulate_grad(&acc, &powers[k - 1], &mut grad[..filter.nnz()]);
            if k == 1 && !need_input_grad {
                break;
            }
            let back = filter.apply_transpose(w, &acc);
            acc = grad_powers.pop().unwrap_or_else(|| Matrix::zeros(n, d_in));
            if acc.rows() == 0 {
                acc = back;
            } else {
                add_assign(&mut acc, &back);
            }
        }
        upstream = acc;
    }
}

fn dense_activation_grad(act: Activation, upstream: &[f64], pre: &[f64]) -> Vec<f64> {
    upstream
        .iter()
        .zip(pre)
        .map(|(g, &p)| g * act.derivative(p))
        .collect()
}

fn fcnn_backward(
    model: &Model,
    weights: &[usize],
    biases: &[usize],
    cache: &ForwardCache,
    grad_output: &[f64],
    grad: &mut [f64],
) {
    let d = &model.arch.dims;
    let mut upstream = grad_output.to_vec();
    for t in (0..model.arch.n_layers()).rev() {
        let LayerCache::Dense { input, pre } = &cache.layers[t] else {
            unreachable!("dense cache")
        };
        let gpre = dense_activation_grad(model.arch.activation(t), &upstream, pre);
        for (b, g) in grad[biases[t]..biases[t] + d[t + 1]].iter_mut().zip(&gpre) {
            *b += g;
        }
        let woff = weights[t];
        for (o, &g) in gpre.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &mut grad[woff + o * d[t]..woff + (o + 1) * d[t]];
            for (dw, x) in row.iter_mut().zip(input) {
                *dw += g * x;
            }
        }
        if t > 0 {
            let mut down = vec![0.0; d[t]];
            for (o, &g) in gpre.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let row = &model.params[woff + o * d[t]..woff + (o + 1) * d[t]];
                for (dv, w) in down.iter_mut().zip(row) {
                    *dv += g * w;
                }
            }
            upstream = down;
        }
    }
}

fn gidnn_backward(
    model: &Model,
    blocks: &[Vec<usize>],
    weights: &[usize],
    biases: &[usize],
    cache: &ForwardCache,
    grad_output: &[f64],
    grad: &mut [f64],
) {
    let d = &model.arch.dims;
    let n = model.topology.n_nodes;
    let mut upstream = grad_output.to_vec();
    for t in (0..model.arch.n_layers()).rev() {
        let LayerCache::Dense { input, pre } = &cache.layers[t] else {
            unreachable!("dense cache")
        };
        let (di, dout) = (d[t], d[t + 1]);
        let gpre = dense_activation_grad(model.arch.activation(t), &upstream, pre);
        for (b, g) in grad[biases[t]..biases[t] + n * dout].iter_mut().zip(&gpre) {
            *b += g;
        }
        let mut down = vec![0.0; if t > 0 { n * di } else { 0 }];
        let mut at = weights[t];
        for (i, row) in blocks.iter().enumerate() {
            let g_out = &gpre[i * dout..(i + 1) * dout];
            for &j in row {
                let x_in = &input[j * di..(j + 1) * di];
                for c in 0..di {
                    let base = at + c * dout;
                    let xv = x_in[c];
                    if xv != 0.0 {
                        for (dw, g) in grad[base..base + dout].iter_mut().zip(g_out) {
                            *dw += xv * g;
                        }
                    }
                    if t > 0 {
                        down[j * di + c] +=
                            crate::linalg::dot(&model.params[base..base + dout], g_out);
                    }
                }
                at += di * dout;
            }
        }
        upstream = down;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{fixtures, generate_synthetic_grid, Edge};

    fn random_input(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = rng::seeded(seed);
        Matrix::from_rows(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
    }

    fn randomize(model: &mut Model, seed: u64, scale: f64) {
        let mut rng = rng::seeded(seed);
        for v in model.params_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }

    /// Loss `Σ c_i π̂_i` with fixed random weights `c`.
    fn weighted_loss(out: &[f64], c: &[f64]) -> f64 {
        out.iter().zip(c).map(|(a, b)| a * b).sum()
    }

    /// Central differences on every coordinate; returns the worst relative
    /// error `|g − fd| / max(1, |g|, |fd|)`.
    fn gradient_check(model: &Model, x: &Matrix, seed: u64) -> f64 {
        let mut rng = rng::seeded(seed ^ 0x55);
        let c: Vec<f64> = (0..model.topology.n_nodes)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let cache = model.forward(x).unwrap();
        let g = backward(model, &cache, &c).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let mut probe = model.clone();
        for k in 0..model.n_params() {
            let orig = probe.params[k];
            probe.params[k] = orig + h;
            let up = weighted_loss(&probe.predict(x).unwrap(), &c);
            probe.params[k] = orig - h;
            let down = weighted_loss(&probe.predict(x).unwrap(), &c);
            probe.params[k] = orig;
            let fd = (up - down) / (2.0 * h);
            let rel = (g[k] - fd).abs() / f64::max(1.0, g[k].abs().max(fd.abs()));
            worst = worst.max(rel);
        }
        worst
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let grid = fixtures::three_node_ring();
        for arch in [
            Architecture::gnn(vec![2, 4, 1], 2),
            Architecture::fcnn(vec![6, 5, 3]),
            Architecture::gidnn(vec![2, 3, 1]),
        ] {
            let mut model = Model::new(arch, &grid, 1).unwrap();
            model.params_mut().iter_mut().for_each(|v| *v = 0.0);
            let out = model.predict(&random_input(3, 2, 4)).unwrap();
            assert_eq!(out, vec![0.0; 3]);
        }
    }

    #[test]
    fn constructed_identity_gnn_reproduces_input() {
        let grid = fixtures::three_node_ring();
        let mut model = Model::new(
            Architecture {
                hidden_activation: Activation::Identity,
                ..Architecture::gnn(vec![1, 1], 1)
            },
            &grid,
            0,
        )
        .unwrap();
        // W = I, H_0 = H_1 = ½, b = 0
        let p = model.params_mut();
        p.iter_mut().for_each(|v| *v = 0.0);
        p[..3].iter_mut().for_each(|v| *v = 1.0);
        let nnz = 3 + 2 * 3;
        p[nnz] = 0.5;
        p[nnz + 1] = 0.5;
        let x = Matrix::from_rows(3, 1, vec![0.3, -1.2, 2.5]);
        assert_eq!(model.predict(&x).unwrap(), vec![0.3, -1.2, 2.5]);
    }

    #[test]
    fn two_node_gnn_hand_example() {
        // K = 1, dims 1 → 2 (ReLU) → 1 (linear)
        let grid = fixtures::two_node();
        let mut model = Model::new(Architecture::gnn(vec![1, 2, 1], 1), &grid, 0).unwrap();
        // filter slots: w00, w11, w01, w10
        let w = [0.5, 0.25, 1.0, -1.0];
        let h10 = [1.0, -1.0]; // layer 0, k = 0 (1×2)
        let h11 = [0.5, 2.0]; // layer 0, k = 1
        let h20 = [1.0, 0.5]; // layer 1, k = 0 (2×1)
        let h21 = [-1.0, 1.0]; // layer 1, k = 1
        let b1 = [0.1, -0.2];
        let b2 = [0.3];
        let params: Vec<f64> = w
            .iter()
            .chain(&h10)
            .chain(&h11)
            .chain(&h20)
            .chain(&h21)
            .chain(&b1)
            .chain(&b2)
            .copied()
            .collect();
        model.params_mut().copy_from_slice(&params);
        let x = Matrix::from_rows(2, 1, vec![1.0, 2.0]);
        // W = [[0.5, 1], [-1, 0.25]]; WX = [2.5, -0.5]
        // pre1 = X·h10 + WX·h11 + b1
        //   node0: [1, -1] + [1.25, 5] + [0.1, -0.2] = [2.35, 3.8]
        //   node1: [2, -2] + [-0.25, -1] + [0.1, -0.2] = [1.85, -3.2] → ReLU [1.85, 0]
        // X1 = [[2.35, 3.8], [1.85, 0]]; W X1 = [[3.025, 1.9], [-1.8875, -3.8]]
        // out = X1·h20 + WX1·h21 + b2
        //   node0: 4.25 + (-3.025 + 1.9) + 0.3 = 3.425
        //   node1: 1.85 + (1.8875 - 3.8) + 0.3 = 0.2375
        let out = model.predict(&x).unwrap();
        assert!((out[0] - 3.425).abs() < 1e-12, "{out:?}");
        assert!((out[1] - 0.2375).abs() < 1e-12, "{out:?}");
    }

    #[test]
    fn fcnn_hand_example_and_identity() {
        let grid = fixtures::two_node();
        // 2 nodes × 1 feature → 2 outputs, single linear layer
        let mut model = Model::new(Architecture::fcnn(vec![2, 2]), &grid, 0).unwrap();
        model
            .params_mut()
            .copy_from_slice(&[1.0, 2.0, 3.0, 4.0, 0.5, -0.5]);
        let out = model
            .predict(&Matrix::from_rows(2, 1, vec![1.0, -1.0]))
            .unwrap();
        assert_eq!(out, vec![-1.0 + 0.5, -1.0 - 0.5]);
        // identity weights pick out the input
        model
            .params_mut()
            .copy_from_slice(&[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(
            model
                .predict(&Matrix::from_rows(2, 1, vec![7.0, -3.0]))
                .unwrap(),
            vec![7.0, -3.0]
        );
        // hidden ReLU layer: [[1,-1],[0,2]]·[1,2] = [-1, 4] → [0, 4]; then [1, 1]·[0,4] + 0.5 on both rows
        let mut deep = Model::new(Architecture::fcnn(vec![2, 2, 2]), &grid, 0).unwrap();
        deep.params_mut()
            .copy_from_slice(&[1.0, -1.0, 0.0, 2.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.5, 0.5]);
        assert_eq!(
            deep.predict(&Matrix::from_rows(2, 1, vec![1.0, 2.0]))
                .unwrap(),
            vec![4.5, 4.5]
        );
    }

    #[test]
    fn gidnn_masks() {
        let two = fixtures::two_node();
        let masks = gidnn_mask(&two, &[4, 2]).unwrap();
        assert!(masks[0].allowed.iter().all(|b| *b));
        let path = Grid::new(
            3,
            vec![Edge::new(0, 1, 1.0, 1.0), Edge::new(1, 2, 1.0, 1.0)],
            0,
        )
        .unwrap();
        let masks = gidnn_mask(&path, &[6, 9, 3]).unwrap();
        assert!(!masks[0].get(0, 2) && !masks[0].get(2, 0));
        assert!(masks[0].get(0, 1) && masks[0].get(1, 1));
        assert!(matches!(
            gidnn_mask(&path, &[6, 8]),
            Err(Error::InvalidBlocking(_))
        ));

        // count from the mask agrees with the closed form
        let grid = generate_synthetic_grid(9, 2.5, 1.0, 2).unwrap();
        let n = grid.n_nodes();
        let widths = [n * 3, n * 5, n];
        let masks = gidnn_mask(&grid, &widths).unwrap();
        let popcount: usize = masks
            .iter()
            .map(|m| m.trainable_weights() + n * m.block_out)
            .sum();
        let arch = Architecture::gidnn(vec![3, 5, 1]);
        let topo = Topology::from_grid(&grid);
        assert_eq!(popcount, count_parameters(&arch, &topo));
        assert_eq!(Model::new(arch, &grid, 0).unwrap().n_params(), popcount);
    }

    #[test]
    fn gidnn_equals_fcnn_on_complete_graph() {
        let n = 4;
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                edges.push(Edge::new(i, j, 1.0, 1.0));
            }
        }
        let grid = Grid::new(n, edges, 0).unwrap();
        let dims = [2usize, 3, 1];
        let gid = Model::new(Architecture::gidnn(dims.to_vec()), &grid, 9).unwrap();
        let mut fc = Model::new(
            Architecture::fcnn(dims.iter().map(|d| d * n).collect()),
            &grid,
            0,
        )
        .unwrap();
        let Layout::Gidnn {
            blocks,
            weights,
            biases,
        } = &gid.layout
        else {
            unreachable!()
        };
        let Layout::Fcnn {
            weights: fw,
            biases: fb,
        } = fc.layout.clone()
        else {
            unreachable!()
        };
        for t in 0..2 {
            let (di, dout) = (dims[t], dims[t + 1]);
            let mut at = weights[t];
            for (i, row) in blocks.iter().enumerate() {
                for &j in row {
                    for c in 0..di {
                        for o in 0..dout {
                            let flat_in = j * di + c;
                            let flat_out = i * dout + o;
                            fc.params[fw[t] + flat_out * (n * di) + flat_in] =
                                gid.params[at + c * dout + o];
                        }
                    }
                    at += di * dout;
                }
            }
            let len = n * dout;
            fc.params[fb[t]..fb[t] + len].copy_from_slice(&gid.params[biases[t]..biases[t] + len]);
        }
        let x = random_input(n, 2, 3);
        let a = gid.predict(&x).unwrap();
        let b = fc.predict(&x).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn parameter_counts() {
        let single = Topology {
            n_nodes: 1,
            edges: vec![],
        };
        assert_eq!(
            count_parameters(&Architecture::gnn(vec![1, 1], 1), &single),
            4
        );

        let ieee = Topology {
            n_nodes: 118,
            edges: (0..186).map(|k| (k % 117, k % 117 + 1)).collect(),
        };
        let gnn = count_parameters(&Architecture::gnn(vec![32, 32], 1), &ieee);
        assert_eq!(gnn, 490 + 2048 + 32);
        let fc = count_parameters(&Architecture::fcnn(vec![118 * 32, 118 * 32]), &ieee);
        assert_eq!(fc, 3776 * 3776 + 3776);
        assert!((gnn as f64) / (fc as f64) < 2e-4);

        // doubling the edge count adds exactly |E| more filter pairs
        let small = Topology {
            n_nodes: 10,
            edges: (0..9).map(|k| (k, k + 1)).collect(),
        };
        let mut big = small.clone();
        big.edges.extend((0..9).map(|k| (k, (k + 2) % 10)));
        let arch = Architecture::gnn(vec![4, 8, 1], 2);
        assert_eq!(
            count_parameters(&arch, &big) - count_parameters(&arch, &small),
            2 * 9
        );
    }

    #[test]
    fn model_parameter_vector_matches_count() {
        let grid = generate_synthetic_grid(12, 2.5, 1.0, 5).unwrap();
        let topo = Topology::from_grid(&grid);
        for kind in [ModelKind::Gnn, ModelKind::Fcnn, ModelKind::Gidnn] {
            let arch = Architecture::default_for(kind, 12, 4);
            let model = Model::new(arch.clone(), &grid, 1).unwrap();
            assert_eq!(model.n_params(), count_parameters(&arch, &topo));
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let grid = generate_synthetic_grid(5, 2.5, 1.0, 1).unwrap();
        let model = Model::new(Architecture::gnn(vec![3, 4, 1], 2), &grid, 3).unwrap();
        let cache = model.forward(&random_input(5, 3, 1)).unwrap();
        assert!(backward(&model, &cache, &[0.0; 5])
            .unwrap()
            .iter()
            .all(|g| *g == 0.0));
    }

    #[test]
    fn gnn_gradient_matches_finite_differences() {
        for order in 1..=3 {
            for seed in 0..20 {
                let grid = generate_synthetic_grid(4, 2.5, 1.0, seed).unwrap();
                let mut model =
                    Model::new(Architecture::gnn(vec![3, 5, 1], order), &grid, seed).unwrap();
                randomize(&mut model, seed + 100, 0.8);
                let x = random_input(4, 3, seed + 7);
                let err = gradient_check(&model, &x, seed);
                assert!(err <= 1e-4, "K={order} seed={seed} rel err {err:e}");
            }
        }
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        for seed in 0..20 {
            let grid = generate_synthetic_grid(4, 2.5, 1.0, seed).unwrap();
            let mut fc = Model::new(Architecture::fcnn(vec![12, 7, 5, 4]), &grid, seed).unwrap();
            randomize(&mut fc, seed + 1, 0.8);
            let mut gid = Model::new(Architecture::gidnn(vec![3, 2, 2, 1]), &grid, seed).unwrap();
            randomize(&mut gid, seed + 2, 0.8);
            let x = random_input(4, 3, seed + 3);
            assert!(gradient_check(&fc, &x, seed) <= 1e-4);
            assert!(gradient_check(&gid, &x, seed) <= 1e-4);
        }
    }

    #[test]
    fn linear_gnn_gradient_is_linear_in_upstream() {
        let grid = generate_synthetic_grid(5, 2.5, 1.0, 3).unwrap();
        let arch = Architecture {
            hidden_activation: Activation::Identity,
            ..Architecture::gnn(vec![2, 3, 1], 2)
        };
        let model = Model::new(arch, &grid, 3).unwrap();
        let cache = model.forward(&random_input(5, 2, 2)).unwrap();
        let up = [0.3, -0.1, 0.5, 1.0, -2.0];
        let scaled: Vec<f64> = up.iter().map(|v| 2.5 * v).collect();
        let g1 = backward(&model, &cache, &up).unwrap();
        let g2 = backward(&model, &cache, &scaled).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((2.5 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn receptive_field_is_k_times_layers() {
        // path graph 0-1-…-9, K = 1, two layers: influence reaches 2 hops
        let edges = (0..9).map(|k| Edge::new(k, k + 1, 1.0, 1.0)).collect();
        let grid = Grid::new(10, edges, 0).unwrap();
        let model = Model::new(Architecture::gnn(vec![2, 6, 1], 1), &grid, 4).unwrap();
        let x = random_input(10, 2, 5);
        let base = model.predict(&x).unwrap();
        for j in 0..10 {
            let mut xp = x.clone();
            xp[(j, 0)] += 0.7;
            xp[(j, 1)] -= 0.4;
            let out = model.predict(&xp).unwrap();
            let dist = grid.hop_distances(j);
            for i in 0..10 {
                if dist[i].unwrap() > 2 {
                    assert_eq!(out[i], base[i], "node {i} changed by node {j}");
                }
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let grid = generate_synthetic_grid(8, 2.5, 1.0, 3).unwrap();
        let model = Model::new(Architecture::default_for(ModelKind::Gnn, 8, 4), &grid, 3).unwrap();
        let x = random_input(8, 4, 1);
        let a = model.predict(&x).unwrap();
        let b = model.predict(&x).unwrap();
        assert!(a.iter().zip(&b).all(|(u, v)| u.to_bits() == v.to_bits()));
    }

    #[test]
    fn bad_inputs_rejected() {
        let grid = fixtures::three_node_ring();
        let model = Model::new(Architecture::gnn(vec![2, 1], 1), &grid, 0).unwrap();
        assert!(matches!(
            model.predict(&random_input(3, 3, 0)),
            Err(Error::DimensionMismatch(_))
        ));
        let mut x = random_input(3, 2, 0);
        x[(0, 0)] = f64::NAN;
        assert!(matches!(model.predict(&x), Err(Error::NonFinite(_))));
        assert!(Model::new(Architecture::gnn(vec![2, 2], 1), &grid, 0).is_err());
        assert!(Model::new(Architecture::fcnn(vec![6, 2]), &grid, 0).is_err());
    }
}
