//! Labelled OPF scenarios.
//!
//! Each scenario perturbs a base problem multiplicatively (independent
//! uniform factors per bound and cost coefficient), solves it, and stores the
//! raw per-node features together with the resulting prices and solver audit
//! fields. Standardization is a separate view computed from the training
//! split; stored scenarios always hold raw values.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use sha2::{Digest, Sha256};

use crate::dcopf::{solve_dcopf, DcOpfProblem, Network, SolverOptions, CONGESTION_TOL};
use crate::grid::IsfMatrix;
use crate::linalg::{Lu, Matrix};
use crate::{rng, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureColumn {
    PMax,
    PMin,
    QMax,
    QMin,
    CostA,
    CostB,
}

impl FeatureColumn {
    pub fn name(self) -> &'static str {
        match self {
            FeatureColumn::PMax => "p_max",
            FeatureColumn::PMin => "p_min",
            FeatureColumn::QMax => "q_max",
            FeatureColumn::QMin => "q_min",
            FeatureColumn::CostA => "cost_a",
            FeatureColumn::CostB => "cost_b",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            Self::PMax,
            Self::PMin,
            Self::QMax,
            Self::QMin,
            Self::CostA,
            Self::CostB,
        ]
        .into_iter()
        .find(|c| c.name() == s)
    }
}

/// Ordered, duplicate-free feature columns. Reactive-power columns are
/// zero-filled placeholders in the dc pipeline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureSchema {
    columns: Vec<FeatureColumn>,
}

impl Default for FeatureSchema {
    fn default() -> Self {
        Self {
            columns: vec![
                FeatureColumn::PMax,
                FeatureColumn::PMin,
                FeatureColumn::CostA,
                FeatureColumn::CostB,
            ],
        }
    }
}

impl FeatureSchema {
    pub fn new(columns: Vec<FeatureColumn>) -> Result<Self> {
        for (k, c) in columns.iter().enumerate() {
            if columns[..k].contains(c) {
                return Err(Error::SchemaMismatch(format!(
                    "duplicate column {}",
                    c.name()
                )));
            }
        }
        if columns.is_empty() {
            return Err(Error::SchemaMismatch(
                "schema needs at least one column".into(),
            ));
        }
        Ok(Self { columns })
    }

    pub fn columns(&self) -> &[FeatureColumn] {
        &self.columns
    }

    pub fn d(&self) -> usize {
        self.columns.len()
    }

    pub fn position(&self, c: FeatureColumn) -> Option<usize> {
        self.columns.iter().position(|x| *x == c)
    }

    /// `N × d` feature matrix for one problem.
    pub fn features(&self, prob: &DcOpfProblem) -> Matrix {
        let n = prob.n_nodes();
        let mut x = Matrix::zeros(n, self.d());
        for i in 0..n {
            for (c, col) in self.columns.iter().enumerate() {
                x[(i, c)] = match col {
                    FeatureColumn::PMax => prob.p_max[i],
                    FeatureColumn::PMin => prob.p_min[i],
                    FeatureColumn::QMax | FeatureColumn::QMin => 0.0,
                    FeatureColumn::CostA => prob.cost_a[i],
                    FeatureColumn::CostB => prob.cost_b[i],
                };
            }
        }
        x
    }

    /// Inverse of [`features`](Self::features); needs all four active-power
    /// columns.
    pub fn problem(&self, x: &Matrix) -> Result<DcOpfProblem> {
        let col = |c: FeatureColumn| {
            self.position(c).map(|k| x.column(k)).ok_or_else(|| {
                Error::SchemaMismatch(format!("column {} needed to rebuild the problem", c.name()))
            })
        };
        Ok(DcOpfProblem {
            p_max: col(FeatureColumn::PMax)?,
            p_min: col(FeatureColumn::PMin)?,
            cost_a: col(FeatureColumn::CostA)?,
            cost_b: col(FeatureColumn::CostB)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    /// Raw `N × d` features.
    pub features: Matrix,
    /// Prices from the solver.
    pub pi: Vec<f64>,
    pub p_star: Vec<f64>,
    pub f_star: Vec<f64>,
    pub lambda: f64,
    pub congested_lines: Vec<usize>,
}

impl Scenario {
    pub fn is_congested(&self) -> bool {
        !self.congested_lines.is_empty()
    }

    /// Flow duals `(μ̄, μ̲)` reconstructed from the stored prices: the net
    /// multiplier on the congested lines is the least-squares solution of
    /// `S_Cᵀ ν = λ·1 − π`; every other line gets zero.
    pub fn flow_duals(&self, isf: &IsfMatrix) -> Result<(Vec<f64>, Vec<f64>)> {
        let m = isf.n_edges();
        let n = isf.n_nodes();
        if self.pi.len() != n || self.congested_lines.iter().any(|&k| k >= m) {
            return Err(Error::DimensionMismatch(
                "scenario does not match the ISF".into(),
            ));
        }
        let (mut upper, mut lower) = (vec![0.0; m], vec![0.0; m]);
        let c = &self.congested_lines;
        if c.is_empty() {
            return Ok((upper, lower));
        }
        let s = isf.matrix();
        let rhs: Vec<f64> = self.pi.iter().map(|p| self.lambda - p).collect();
        let mut gram = Matrix::zeros(c.len(), c.len());
        let mut b = vec![0.0; c.len()];
        for (r, &k) in c.iter().enumerate() {
            b[r] = (0..n).map(|i| s[(k, i)] * rhs[i]).sum();
            for (q, &l) in c.iter().enumerate() {
                gram[(r, q)] = (0..n).map(|i| s[(k, i)] * s[(l, i)]).sum();
            }
        }
        let nu = Lu::factor(&gram)
            .ok_or_else(|| {
                Error::InvalidProblem("congested lines have dependent shift factors".into())
            })?
            .solve(&b);
        for (&k, v) in c.iter().zip(nu) {
            if v >= 0.0 {
                upper[k] = v;
            } else {
                lower[k] = -v;
            }
        }
        Ok((upper, lower))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub grid_hash: String,
    pub schema: FeatureSchema,
    pub scenarios: Vec<Scenario>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }

    pub fn n_nodes(&self) -> usize {
        self.scenarios.first().map_or(0, |s| s.features.rows())
    }

    /// Share of scenarios with at least one binding flow limit.
    pub fn congested_fraction(&self) -> f64 {
        if self.scenarios.is_empty() {
            return 0.0;
        }
        self.scenarios.iter().filter(|s| s.is_congested()).count() as f64
            / self.scenarios.len() as f64
    }

    pub fn problems(&self) -> Result<Vec<DcOpfProblem>> {
        self.scenarios
            .iter()
            .map(|s| self.schema.problem(&s.features))
            .collect()
    }

    /// Hex SHA-256 over grid hash, schema, and every scenario's features and
    /// labels (exact bits).
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.grid_hash.as_bytes());
        for c in self.schema.columns() {
            h.update(c.name().as_bytes());
        }
        for s in &self.scenarios {
            for v in s.features.as_slice().iter().chain(&s.pi) {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            grid_hash: self.grid_hash.clone(),
            schema: self.schema.clone(),
            scenarios: idx.iter().map(|&i| self.scenarios[i].clone()).collect(),
        }
    }
}

/// Relative half-widths of the uniform perturbation factors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perturbation {
    pub bound_jitter: f64,
    pub cost_jitter: f64,
}

impl Default for Perturbation {
    fn default() -> Self {
        Self {
            bound_jitter: 0.2,
            cost_jitter: 0.2,
        }
    }
}

pub const MAX_REDRAWS: usize = 20;

/// Draws one perturbed copy of `base`. Fixed nodes scale both equal bounds by
/// the same factor.
pub fn perturb_problem(
    base: &DcOpfProblem,
    perturb: &Perturbation,
    rng: &mut rng::Rng,
) -> DcOpfProblem {
    let mut factor = |jitter: f64| {
        if jitter == 0.0 {
            1.0
        } else {
            rng.random_range(1.0 - jitter..=1.0 + jitter)
        }
    };
    let mut out = base.clone();
    for i in 0..base.n_nodes() {
        if base.is_fixed(i) {
            let f = factor(perturb.bound_jitter);
            out.p_min[i] = base.p_min[i] * f;
            out.p_max[i] = out.p_min[i];
        } else {
            out.p_max[i] = base.p_max[i] * factor(perturb.bound_jitter);
            out.p_min[i] = base.p_min[i] * factor(perturb.bound_jitter);
            if out.p_min[i] > out.p_max[i] {
                core::mem::swap(&mut out.p_min[i], &mut out.p_max[i]);
            }
        }
        out.cost_a[i] = base.cost_a[i] * factor(perturb.cost_jitter);
        out.cost_b[i] = base.cost_b[i] * factor(perturb.cost_jitter);
    }
    out
}

/// Scenario `index` of the family `seed`: independent of every other index.
pub fn sample_scenario(
    net: &Network,
    base: &DcOpfProblem,
    perturb: &Perturbation,
    schema: &FeatureSchema,
    seed: u64,
    index: usize,
) -> Result<Scenario> {
    let sub_seed = rng::mix(seed, index as u64);
    for attempt in 0..MAX_REDRAWS {
        let mut rng = rng::substream(sub_seed, attempt as u64);
        let prob = perturb_problem(base, perturb, &mut rng);
        match solve_dcopf(net, &prob, &SolverOptions::default()) {
            Ok(sol) => {
                return Ok(Scenario {
                    features: schema.features(&prob),
                    congested_lines: sol.congested_lines(CONGESTION_TOL),
                    pi: sol.pi,
                    p_star: sol.p_star,
                    f_star: sol.f_star,
                    lambda: sol.lambda,
                })
            }
            Err(Error::Infeasible(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::TooManyInfeasible { index })
}

fn check_jitter(perturb: &Perturbation) -> Result<()> {
    for (name, v) in [
        ("bound_jitter", perturb.bound_jitter),
        ("cost_jitter", perturb.cost_jitter),
    ] {
        if !(0.0..1.0).contains(&v) {
            return Err(Error::InvalidConfig(format!(
                "{name} must lie in [0, 1), got {v}"
            )));
        }
    }
    Ok(())
}

/// Sequentially samples `count` scenarios. Parallel drivers can call
/// [`sample_scenario`] per index instead and get identical results.
pub fn sample_scenarios(
    net: &Network,
    base: &DcOpfProblem,
    perturb: &Perturbation,
    schema: &FeatureSchema,
    count: usize,
    seed: u64,
) -> Result<Dataset> {
    check_sampling(net, base, perturb, count)?;
    let scenarios = (0..count)
        .map(|i| sample_scenario(net, base, perturb, schema, seed, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        grid_hash: net.grid().hash(),
        schema: schema.clone(),
        scenarios,
    })
}

/// Strategy for producing a labelled dataset; lets callers swap in a
/// parallel driver without changing results.
pub trait Sampler {
    fn sample(
        &self,
        net: &Network,
        base: &DcOpfProblem,
        perturb: &Perturbation,
        schema: &FeatureSchema,
        count: usize,
        seed: u64,
    ) -> Result<Dataset>;
}

/// Index-by-index generation on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl Sampler for Sequential {
    fn sample(
        &self,
        net: &Network,
        base: &DcOpfProblem,
        perturb: &Perturbation,
        schema: &FeatureSchema,
        count: usize,
        seed: u64,
    ) -> Result<Dataset> {
        sample_scenarios(net, base, perturb, schema, count, seed)
    }
}

pub fn check_sampling(
    net: &Network,
    base: &DcOpfProblem,
    perturb: &Perturbation,
    count: usize,
) -> Result<()> {
    check_jitter(perturb)?;
    if count == 0 {
        return Err(Error::InvalidConfig(
            "scenario count must be at least 1".into(),
        ));
    }
    if base.n_nodes() != net.n_nodes() {
        return Err(Error::DimensionMismatch(format!(
            "base problem has {} nodes, grid has {}",
            base.n_nodes(),
            net.n_nodes()
        )));
    }
    Ok(())
}

/// Base offers for a synthetic grid: roughly 40% of nodes are generators
/// with convex quadratic costs, the rest fixed loads; total capacity is
/// 1.6× total load.
pub fn synthetic_base_problem(n_nodes: usize, seed: u64) -> DcOpfProblem {
    let mut rng = rng::seeded(rng::mix(seed, 0x6261_7365));
    let mut order: Vec<usize> = (0..n_nodes).collect();
    order.shuffle(&mut rng);
    let n_gen =
        (libm::round(n_nodes as f64 * 0.4) as usize).clamp(1, n_nodes.saturating_sub(1).max(1));
    let mut prob = DcOpfProblem {
        cost_a: vec![0.0; n_nodes],
        cost_b: vec![0.0; n_nodes],
        p_min: vec![0.0; n_nodes],
        p_max: vec![0.0; n_nodes],
    };
    let mut total_load = 0.0;
    for &i in &order[n_gen..] {
        let load = rng.random_range(0.5..1.5);
        prob.p_min[i] = -load;
        prob.p_max[i] = -load;
        total_load += load;
    }
    let shares: Vec<f64> = order[..n_gen]
        .iter()
        .map(|_| rng.random_range(0.5..1.5))
        .collect();
    let total_share: f64 = shares.iter().sum();
    for (&i, share) in order[..n_gen].iter().zip(&shares) {
        prob.p_max[i] = 1.6 * total_load * share / total_share;
        prob.cost_a[i] = rng.random_range(0.05..0.5);
        prob.cost_b[i] = rng.random_range(1.0..5.0);
    }
    prob
}

/// Default position of the calibrated load level between the congestion
/// onset and the infeasibility edge, on a log scale.
pub const DEFAULT_LOAD_LEVEL: f64 = 0.3;

const CALIBRATION_RANGE: (f64, f64) = (1e-4, 1e3);
const CALIBRATION_STEPS: usize = 40;

fn scale_bounds(prob: &DcOpfProblem, t: f64) -> DcOpfProblem {
    let mut out = prob.clone();
    for v in out.p_min.iter_mut().chain(out.p_max.iter_mut()) {
        *v *= t;
    }
    out
}

/// Smallest `t` in the calibration range for which `pred(t)` holds,
/// assuming `pred` is monotone. Geometric bisection.
fn bisect_scale(pred: impl Fn(f64) -> bool) -> f64 {
    let (mut lo, mut hi) = CALIBRATION_RANGE;
    for _ in 0..CALIBRATION_STEPS {
        let mid = libm::sqrt(lo * hi);
        if pred(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// Bound scale factors `(t_c, t_f)`: `t_c` is where the scaled base case
/// first congests a line, `t_f` where it stops being solvable.
pub fn load_scale_bracket(net: &Network, base: &DcOpfProblem) -> Result<(f64, f64)> {
    base.validate(net.n_nodes())?;
    let opts = SolverOptions::default();
    let congested_or_failed = |t: f64| match solve_dcopf(net, &scale_bounds(base, t), &opts) {
        Ok(sol) => !sol.congested_lines(CONGESTION_TOL).is_empty(),
        Err(_) => true,
    };
    let failed = |t: f64| solve_dcopf(net, &scale_bounds(base, t), &opts).is_err();
    let t_c = bisect_scale(congested_or_failed);
    let t_f = bisect_scale(failed);
    if !(t_c < CALIBRATION_RANGE.1) {
        return Err(Error::InvalidConfig(
            "base case never congests within the calibration range".into(),
        ));
    }
    if !(t_f > CALIBRATION_RANGE.0) || t_f < t_c {
        return Err(Error::InvalidConfig(
            "base case is infeasible at every load level".into(),
        ));
    }
    Ok((t_c, t_f))
}

/// Scales the bounds of `base` to `t_c·(t_f/t_c)^level`. `level` 0 sits at
/// congestion onset and 1 at the infeasibility edge.
pub fn calibrate_load_level(
    net: &Network,
    base: &DcOpfProblem,
    level: f64,
) -> Result<DcOpfProblem> {
    if !(0.0..=1.0).contains(&level) {
        return Err(Error::InvalidConfig(format!(
            "load level {level} outside [0,1]"
        )));
    }
    let (t_c, t_f) = load_scale_bracket(net, base)?;
    Ok(scale_bounds(base, t_c * libm::pow(t_f / t_c, level)))
}

/// [`synthetic_base_problem`] scaled to a congested but feasible level
/// on `net`.
pub fn calibrated_base_problem(net: &Network, seed: u64, level: f64) -> Result<DcOpfProblem> {
    calibrate_load_level(net, &synthetic_base_problem(net.n_nodes(), seed), level)
}

/// Disjoint shuffled partition. Train and validation sizes are rounded
/// `count·fraction`; the test split takes the rest.
pub fn split(ds: &Dataset, fractions: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    if fractions.iter().any(|f| !(*f > 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidFractions(format!(
            "{fractions:?} must be positive and sum to 1"
        )));
    }
    let n = ds.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::seeded(seed));
    let n_train = libm::round(n as f64 * fractions[0]) as usize;
    let n_val = (libm::round(n as f64 * fractions[1]) as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let (train, rest) = idx.split_at(n_train);
    let (val, test) = rest.split_at(n_val);
    Ok((ds.subset(train), ds.subset(val), ds.subset(test)))
}

/// Per-column feature statistics plus scalar label statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationStats {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub label_mean: f64,
    pub label_std: f64,
}

pub const STD_FLOOR: f64 = 1e-8;

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (mut lo, mut hi, mut sum, mut count) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
    for v in values.clone() {
        lo = lo.min(v);
        hi = hi.max(v);
        sum += v;
        count += 1;
    }
    if count == 0 {
        return (0.0, 1.0);
    }
    if lo == hi {
        // exact for constant columns so they map to zero
        return (lo, STD_FLOOR);
    }
    let mean = sum / count as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64;
    (mean, libm::sqrt(var).max(STD_FLOOR))
}

impl NormalizationStats {
    pub fn fit(ds: &Dataset) -> Self {
        let d = ds.schema.d();
        let (mut feature_mean, mut feature_std) = (Vec::with_capacity(d), Vec::with_capacity(d));
        for c in 0..d {
            let it = ds
                .scenarios
                .iter()
                .flat_map(move |s| (0..s.features.rows()).map(move |r| s.features[(r, c)]));
            let (m, s) = mean_std(it);
            feature_mean.push(m);
            feature_std.push(s);
        }
        let (label_mean, label_std) =
            mean_std(ds.scenarios.iter().flat_map(|s| s.pi.iter().copied()));
        Self {
            feature_mean,
            feature_std,
            label_mean,
            label_std,
        }
    }

    pub fn d(&self) -> usize {
        self.feature_mean.len()
    }

    pub fn normalize_features(&self, x: &Matrix) -> Matrix {
        let mut out = x.clone();
        for r in 0..x.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = (*v - self.feature_mean[c]) / self.feature_std[c];
            }
        }
        out
    }

    pub fn denormalize_features(&self, x: &Matrix) -> Matrix {
        let mut out = x.clone();
        for r in 0..x.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = *v * self.feature_std[c] + self.feature_mean[c];
            }
        }
        out
    }

    pub fn normalize_labels(&self, pi: &[f64]) -> Vec<f64> {
        pi.iter()
            .map(|v| (v - self.label_mean) / self.label_std)
            .collect()
    }

    pub fn denormalize_labels(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .map(|v| v * self.label_std + self.label_mean)
            .collect()
    }
}

/// Standardized view of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedDataset {
    pub features: Vec<Matrix>,
    pub labels: Vec<Vec<f64>>,
}

/// Standardizes `ds`. Without `stats` they are fitted on `ds` itself (use this
/// for the training split); pass the training stats for validation and test.
pub fn normalize(
    ds: &Dataset,
    stats: Option<&NormalizationStats>,
) -> Result<(NormalizedDataset, NormalizationStats)> {
    let stats = match stats {
        Some(s) if s.d() != ds.schema.d() => {
            return Err(Error::DimensionMismatch(format!(
                "stats cover {} columns, dataset has {}",
                s.d(),
                ds.schema.d()
            )))
        }
        Some(s) => s.clone(),
        None => NormalizationStats::fit(ds),
    };
    let features = ds
        .scenarios
        .iter()
        .map(|s| stats.normalize_features(&s.features))
        .collect();
    let labels = ds
        .scenarios
        .iter()
        .map(|s| stats.normalize_labels(&s.pi))
        .collect();
    Ok((NormalizedDataset { features, labels }, stats))
}
