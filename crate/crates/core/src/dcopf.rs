//! dc optimal power flow with quadratic costs.
//!
//! ```text
//! min  Σ a_i p_i² + b_i p_i
//! s.t. 1ᵀp = 0,  p_min ≤ p ≤ p_max,  −f̄ ≤ S p ≤ f̄
//! ```
//!
//! [`solve_dcopf`] runs a dense Mehrotra predictor-corrector interior-point
//! method and reads the balance dual `λ` and the flow duals `μ̄`, `μ̲` off the
//! converged multipliers. Prices follow as `π = λ·1 − Sᵀ(μ̄ − μ̲)`.
//! [`solve_dcopf_oracle`] enumerates active sets on tiny instances and is only
//! meant as ground truth for tests.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::grid::{build_isf, Grid, IsfMatrix};
use crate::linalg::{dot, norm_inf, Cholesky, Lu, Matrix};
use crate::{Error, Result};

/// A grid together with its shift factors, shared by every problem solved on
/// that topology.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    grid: Grid,
    isf: IsfMatrix,
}

impl Network {
    pub fn new(grid: Grid) -> Result<Self> {
        let isf = build_isf(&grid)?;
        Ok(Self { grid, isf })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn isf(&self) -> &IsfMatrix {
        &self.isf
    }

    pub fn n_nodes(&self) -> usize {
        self.grid.n_nodes()
    }

    pub fn n_edges(&self) -> usize {
        self.grid.n_edges()
    }
}

/// Per-node offers and injection bounds. Costs are `c_i(p) = a_i p² + b_i p`.
/// A fixed load is encoded as `p_min = p_max < 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct DcOpfProblem {
    pub cost_a: Vec<f64>,
    pub cost_b: Vec<f64>,
    pub p_min: Vec<f64>,
    pub p_max: Vec<f64>,
}

impl DcOpfProblem {
    pub fn n_nodes(&self) -> usize {
        self.cost_a.len()
    }

    pub fn is_fixed(&self, i: usize) -> bool {
        self.p_min[i] == self.p_max[i]
    }

    pub fn marginal_cost(&self, i: usize, p: f64) -> f64 {
        2.0 * self.cost_a[i] * p + self.cost_b[i]
    }

    pub fn cost(&self, p: &[f64]) -> f64 {
        p.iter()
            .enumerate()
            .map(|(i, &pi)| self.cost_a[i] * pi * pi + self.cost_b[i] * pi)
            .sum()
    }

    /// Checks shapes, signs, and the necessary balance condition
    /// `Σp_min ≤ 0 ≤ Σp_max`.
    pub fn validate(&self, n_nodes: usize) -> Result<()> {
        for (name, len) in [
            ("cost_a", self.cost_a.len()),
            ("cost_b", self.cost_b.len()),
            ("p_min", self.p_min.len()),
            ("p_max", self.p_max.len()),
        ] {
            if len != n_nodes {
                return Err(Error::DimensionMismatch(format!(
                    "{name} has {len} entries, grid has {n_nodes} nodes"
                )));
            }
        }
        for i in 0..n_nodes {
            let vals = [self.cost_a[i], self.cost_b[i], self.p_min[i], self.p_max[i]];
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidProblem(format!(
                    "non-finite data at node {i}"
                )));
            }
            if self.cost_a[i] < 0.0 {
                return Err(Error::InvalidProblem(format!(
                    "negative quadratic cost at node {i}"
                )));
            }
            if self.p_min[i] > self.p_max[i] {
                return Err(Error::InvalidProblem(format!("p_min > p_max at node {i}")));
            }
        }
        let lo: f64 = self.p_min.iter().sum();
        let hi: f64 = self.p_max.iter().sum();
        if lo > 0.0 || hi < 0.0 {
            return Err(Error::Infeasible(format!(
                "power balance impossible: injections range over [{lo}, {hi}]"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DcOpfSolution {
    pub p_star: Vec<f64>,
    pub f_star: Vec<f64>,
    pub lambda: f64,
    pub mu_upper: Vec<f64>,
    pub mu_lower: Vec<f64>,
    pub pi: Vec<f64>,
    pub kkt_residual: f64,
    pub iterations: usize,
}

impl DcOpfSolution {
    /// Lines whose flow dual is positive beyond `tol`.
    pub fn congested_lines(&self, tol: f64) -> Vec<usize> {
        self.mu_upper
            .iter()
            .zip(&self.mu_lower)
            .enumerate()
            .filter(|(_, (u, l))| **u > tol || **l > tol)
            .map(|(k, _)| k)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 100,
        }
    }
}

/// Threshold on flow duals above which a line counts as congested.
pub const CONGESTION_TOL: f64 = 1e-6;

/// `π = λ·1 − Sᵀ(μ̄ − μ̲)`.
pub fn lmp_from_duals(
    lambda: f64,
    mu_upper: &[f64],
    mu_lower: &[f64],
    isf: &IsfMatrix,
) -> Result<Vec<f64>> {
    let m = isf.n_edges();
    if mu_upper.len() != m || mu_lower.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "flow duals have {} / {} entries, ISF has {m} lines",
            mu_upper.len(),
            mu_lower.len()
        )));
    }
    let net: Vec<f64> = mu_upper.iter().zip(mu_lower).map(|(u, l)| u - l).collect();
    Ok(isf
        .transpose_apply(&net)
        .into_iter()
        .map(|v| lambda - v)
        .collect())
}

/// Inequality-form data over the free (non-fixed) nodes:
/// `min ½xᵀQx + cᵀx  s.t. 1ᵀx = b_eq,  Gx ≤ h`.
///
/// Rows of `G`: upper bounds, lower bounds, flow upper limits, flow lower
/// limits, in that order.
struct Reduced {
    free: Vec<usize>,
    fixed_injection: Vec<f64>,
    q: Vec<f64>,
    c: Vec<f64>,
    b_eq: f64,
    g: Matrix,
    h: Vec<f64>,
}

impl Reduced {
    fn build(net: &Network, prob: &DcOpfProblem) -> Self {
        let n = net.n_nodes();
        let m = net.n_edges();
        let free: Vec<usize> = (0..n).filter(|&i| !prob.is_fixed(i)).collect();
        let fixed_injection: Vec<f64> = (0..n)
            .map(|i| if prob.is_fixed(i) { prob.p_min[i] } else { 0.0 })
            .collect();
        let nf = free.len();
        let s = net.isf().matrix();
        let base_flow = net.isf().flows(&fixed_injection);
        let mut g = Matrix::zeros(2 * nf + 2 * m, nf);
        let mut h = vec![0.0; 2 * nf + 2 * m];
        for (col, &i) in free.iter().enumerate() {
            g[(col, col)] = 1.0;
            h[col] = prob.p_max[i];
            g[(nf + col, col)] = -1.0;
            h[nf + col] = -prob.p_min[i];
        }
        let limits = net.grid().flow_limits();
        for k in 0..m {
            for (col, &i) in free.iter().enumerate() {
                g[(2 * nf + k, col)] = s[(k, i)];
                g[(2 * nf + m + k, col)] = -s[(k, i)];
            }
            h[2 * nf + k] = limits[k] - base_flow[k];
            h[2 * nf + m + k] = limits[k] + base_flow[k];
        }
        Self {
            q: free.iter().map(|&i| 2.0 * prob.cost_a[i]).collect(),
            c: free.iter().map(|&i| prob.cost_b[i]).collect(),
            b_eq: -fixed_injection.iter().sum::<f64>(),
            free,
            fixed_injection,
            g,
            h,
        }
    }

    fn n_free(&self) -> usize {
        self.free.len()
    }

    fn expand(&self, x: &[f64]) -> Vec<f64> {
        let mut p = self.fixed_injection.clone();
        for (col, &i) in self.free.iter().enumerate() {
            p[i] = x[col];
        }
        p
    }
}

/// Residual below which the active-set polish is attempted.
const POLISH_FROM: f64 = 1e-3;

fn step_to_boundary(v: &[f64], dv: &[f64]) -> f64 {
    v.iter()
        .zip(dv)
        .filter(|(_, d)| **d < 0.0)
        .fold(1.0, |a, (x, d)| f64::min(a, -x / d))
}

/// Solves the dc-OPF by a primal-dual interior-point method.
///
/// Fails with [`Error::Infeasible`] when the balance is impossible or the
/// iterates show a diverging dual with a stalled primal residual, and with
/// [`Error::NoConvergence`] otherwise.
pub fn solve_dcopf(
    net: &Network,
    prob: &DcOpfProblem,
    opts: &SolverOptions,
) -> Result<DcOpfSolution> {
    prob.validate(net.n_nodes())?;
    if !(opts.tolerance > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "tolerance must be positive, got {}",
            opts.tolerance
        )));
    }
    let red = Reduced::build(net, prob);
    if red.n_free() == 0 {
        return solve_all_fixed(net, prob, &red, opts);
    }
    match interior_point(net, prob, &red, opts, Centering::Mehrotra) {
        Err(Error::NoConvergence { .. }) => interior_point(net, prob, &red, opts, Centering::Fixed),
        other => other,
    }
}

/// How the centering target is chosen each iteration.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Centering {
    /// Predictor-corrector with adaptive `σ = (μ_aff/μ)³`.
    Mehrotra,
    /// Plain path following with `σ = 0.1`; slower but does not cycle on
    /// weakly active constraints.
    Fixed,
}

fn interior_point(
    net: &Network,
    prob: &DcOpfProblem,
    red: &Reduced,
    opts: &SolverOptions,
    centering: Centering,
) -> Result<DcOpfSolution> {
    let nf = red.n_free();
    let m_ineq = red.h.len();

    // analytic center of the box, slacks floored at one
    let mut x: Vec<f64> = red
        .free
        .iter()
        .map(|&i| 0.5 * (prob.p_min[i] + prob.p_max[i]))
        .collect();
    let gx = red.g.mul_vec(&x);
    let mut s: Vec<f64> = red
        .h
        .iter()
        .zip(&gx)
        .map(|(h, g)| f64::max(h - g, 1.0))
        .collect();
    let mut z = vec![1.0; m_ineq];
    let mut y = 0.0;

    let tol = opts.tolerance;
    let mut worst = f64::INFINITY;
    for iter in 0..opts.max_iterations {
        // residuals
        let gx = red.g.mul_vec(&x);
        let gtz = red.g.tr_mul_vec(&z);
        let r_d: Vec<f64> = (0..nf)
            .map(|j| red.q[j] * x[j] + red.c[j] + y + gtz[j])
            .collect();
        let r_p = x.iter().sum::<f64>() - red.b_eq;
        let r_i: Vec<f64> = (0..m_ineq).map(|k| gx[k] + s[k] - red.h[k]).collect();
        let comp = s.iter().zip(&z).fold(0.0, |m, (a, b)| f64::max(m, a * b));
        let mu = dot(&s, &z) / m_ineq as f64;
        worst = norm_inf(&r_d).max(r_p.abs()).max(norm_inf(&r_i)).max(comp);
        // once the active set has settled, an exact solve on it beats further
        // barrier steps, which lose accuracy as s → 0
        if worst <= POLISH_FROM {
            if let Some((px, py, pz, res)) = polish(red, &s, &z, worst) {
                if res <= tol {
                    return Ok(finish(net, prob, red, &px, py, &pz, res, iter));
                }
            }
        }
        if worst <= tol {
            return Ok(finish(net, prob, red, &x, y, &z, worst, iter));
        }
        if norm_inf(&z) > 1e12 {
            return Err(Error::Infeasible(format!(
                "flow duals diverged (|z| = {:e}) with primal residual {:e}",
                norm_inf(&z),
                norm_inf(&r_i).max(r_p.abs())
            )));
        }

        // H = Q + Gᵀ W G, factored once per iteration
        let w: Vec<f64> = z.iter().zip(&s).map(|(z, s)| z / s).collect();
        let mut hmat = Matrix::zeros(nf, nf);
        for k in 0..m_ineq {
            let row = red.g.row(k);
            for a in 0..nf {
                let ga = row[a] * w[k];
                if ga == 0.0 {
                    continue;
                }
                for b in 0..nf {
                    hmat[(a, b)] += ga * row[b];
                }
            }
        }
        for j in 0..nf {
            hmat[(j, j)] += red.q[j];
        }
        let chol = factor_regularized(&hmat).ok_or(Error::NoConvergence {
            iterations: iter,
            residual: worst,
        })?;
        let ones = vec![1.0; nf];
        let h_inv_ones = chol.solve(&ones);
        let schur: f64 = h_inv_ones.iter().sum();

        // Newton direction for a complementarity right-hand side r_c
        let direction = |r_c: &[f64]| {
            let t: Vec<f64> = (0..m_ineq).map(|k| w[k] * r_i[k] - r_c[k] / s[k]).collect();
            let gtt = red.g.tr_mul_vec(&t);
            let rhs: Vec<f64> = (0..nf).map(|j| -r_d[j] - gtt[j]).collect();
            let h_inv_rhs = chol.solve(&rhs);
            let dy = (h_inv_rhs.iter().sum::<f64>() + r_p) / schur;
            let dx: Vec<f64> = (0..nf).map(|j| h_inv_rhs[j] - dy * h_inv_ones[j]).collect();
            let gdx = red.g.mul_vec(&dx);
            let dz: Vec<f64> = (0..m_ineq)
                .map(|k| w[k] * (gdx[k] + r_i[k]) - r_c[k] / s[k])
                .collect();
            let ds: Vec<f64> = (0..m_ineq)
                .map(|k| -(r_c[k] + s[k] * dz[k]) / z[k])
                .collect();
            (dx, dy, ds, dz)
        };

        let r_c: Vec<f64> = match centering {
            Centering::Mehrotra => {
                let r_aff: Vec<f64> = s.iter().zip(&z).map(|(s, z)| s * z).collect();
                let (_, _, ds_a, dz_a) = direction(&r_aff);
                let alpha_aff = f64::min(step_to_boundary(&s, &ds_a), step_to_boundary(&z, &dz_a));
                let mu_aff = (0..m_ineq)
                    .map(|k| (s[k] + alpha_aff * ds_a[k]) * (z[k] + alpha_aff * dz_a[k]))
                    .sum::<f64>()
                    / m_ineq as f64;
                let ratio = mu_aff / mu;
                let sigma = ratio * ratio * ratio;
                (0..m_ineq)
                    .map(|k| s[k] * z[k] + ds_a[k] * dz_a[k] - sigma * mu)
                    .collect()
            }
            Centering::Fixed => (0..m_ineq).map(|k| s[k] * z[k] - 0.1 * mu).collect(),
        };
        let (dx, dy, ds, dz) = direction(&r_c);
        let alpha = f64::min(
            1.0,
            0.995 * f64::min(step_to_boundary(&s, &ds), step_to_boundary(&z, &dz)),
        );
        for j in 0..nf {
            x[j] += alpha * dx[j];
        }
        y += alpha * dy;
        for k in 0..m_ineq {
            s[k] += alpha * ds[k];
            z[k] += alpha * dz[k];
        }
    }
    Err(Error::NoConvergence {
        iterations: opts.max_iterations,
        residual: worst,
    })
}

/// Cholesky of `h`, retried with a growing diagonal shift when extreme
/// barrier weights make it numerically indefinite.
fn factor_regularized(h: &Matrix) -> Option<Cholesky> {
    if let Some(c) = Cholesky::factor(h) {
        return Some(c);
    }
    let scale = (0..h.rows()).fold(0.0, |m: f64, j| m.max(h[(j, j)].abs()));
    let mut delta = 1e-12 * scale.max(1.0);
    for _ in 0..6 {
        let mut shifted = h.clone();
        for j in 0..h.rows() {
            shifted[(j, j)] += delta;
        }
        if let Some(c) = Cholesky::factor(&shifted) {
            return Some(c);
        }
        delta *= 100.0;
    }
    None
}

/// KKT residual of a candidate point of the reduced problem.
fn residual(red: &Reduced, x: &[f64], y: f64, z: &[f64]) -> f64 {
    let gx = red.g.mul_vec(x);
    let gtz = red.g.tr_mul_vec(z);
    let nf = red.n_free();
    let stat = (0..nf).fold(0.0, |m: f64, j| {
        m.max((red.q[j] * x[j] + red.c[j] + y + gtz[j]).abs())
    });
    let bal = (x.iter().sum::<f64>() - red.b_eq).abs();
    let (mut prim, mut comp, mut dual) = (0.0_f64, 0.0_f64, 0.0_f64);
    for k in 0..red.h.len() {
        let slack = red.h[k] - gx[k];
        prim = prim.max(-slack);
        comp = comp.max((slack * z[k]).abs());
        dual = dual.max(-z[k]);
    }
    stat.max(bal).max(prim).max(comp).max(dual)
}

/// Re-solves the equality system of the constraints the interior iterate
/// marks as active (`z > s`). The result replaces the iterate when it is at
/// least as accurate, which removes the barrier bias left at the stopping
/// tolerance.
fn polish(
    red: &Reduced,
    s: &[f64],
    z: &[f64],
    current: f64,
) -> Option<(Vec<f64>, f64, Vec<f64>, f64)> {
    let nf = red.n_free();
    let active: Vec<usize> = (0..red.h.len()).filter(|&k| z[k] > s[k]).collect();
    let dim = nf + 1 + active.len();
    let mut kkt = Matrix::zeros(dim, dim);
    let mut rhs = vec![0.0; dim];
    for j in 0..nf {
        kkt[(j, j)] = red.q[j];
        kkt[(j, nf)] = 1.0;
        kkt[(nf, j)] = 1.0;
        rhs[j] = -red.c[j];
    }
    rhs[nf] = red.b_eq;
    for (r, &k) in active.iter().enumerate() {
        for (j, &g) in red.g.row(k).iter().enumerate() {
            kkt[(j, nf + 1 + r)] = g;
            kkt[(nf + 1 + r, j)] = g;
        }
        rhs[nf + 1 + r] = red.h[k];
    }
    let sol = Lu::factor(&kkt)?.solve(&rhs);
    let x = sol[..nf].to_vec();
    let mut zp = vec![0.0; red.h.len()];
    for (r, &k) in active.iter().enumerate() {
        zp[k] = sol[nf + 1 + r];
    }
    let res = residual(red, &x, sol[nf], &zp);
    (res.is_finite() && res <= current).then(|| (x, sol[nf], zp, res))
}

fn finish(
    net: &Network,
    prob: &DcOpfProblem,
    red: &Reduced,
    x: &[f64],
    y: f64,
    z: &[f64],
    residual: f64,
    iterations: usize,
) -> DcOpfSolution {
    let nf = red.n_free();
    let m = net.n_edges();
    let p_star = red.expand(x);
    let f_star = net.isf().flows(&p_star);
    let lambda = -y;
    let mu_upper = z[2 * nf..2 * nf + m].to_vec();
    let mu_lower = z[2 * nf + m..].to_vec();
    let pi = lmp_from_duals(lambda, &mu_upper, &mu_lower, net.isf())
        .expect("dimensions fixed by construction");
    let _ = prob;
    DcOpfSolution {
        p_star,
        f_star,
        lambda,
        mu_upper,
        mu_lower,
        pi,
        kkt_residual: residual,
        iterations,
    }
}

/// Every node fixed: no decisions remain, prices are flat at zero.
fn solve_all_fixed(
    net: &Network,
    prob: &DcOpfProblem,
    red: &Reduced,
    opts: &SolverOptions,
) -> Result<DcOpfSolution> {
    let p_star = red.fixed_injection.clone();
    let imbalance = p_star.iter().sum::<f64>().abs();
    if imbalance > opts.tolerance {
        return Err(Error::Infeasible(format!(
            "all injections fixed with imbalance {imbalance:e}"
        )));
    }
    let f_star = net.isf().flows(&p_star);
    let limits = net.grid().flow_limits();
    if let Some(k) = (0..f_star.len()).find(|&k| f_star[k].abs() > limits[k] + opts.tolerance) {
        return Err(Error::Infeasible(format!(
            "fixed injections overload line {k}"
        )));
    }
    let m = net.n_edges();
    let _ = prob;
    Ok(DcOpfSolution {
        p_star,
        f_star,
        lambda: 0.0,
        mu_upper: vec![0.0; m],
        mu_lower: vec![0.0; m],
        pi: vec![0.0; net.n_nodes()],
        kkt_residual: imbalance,
        iterations: 0,
    })
}

/// Maximum residual per block of the optimality conditions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktReport {
    /// Balance, box, flow limits, and `f = S p` consistency.
    pub primal: f64,
    /// Negative parts of the flow duals.
    pub dual: f64,
    /// `|c_i'(p_i) − π_i|` at interior nodes; wrong-signed price gaps at bounds.
    pub stationarity: f64,
    /// `μ̄(f̄ − f)`, `μ̲(f + f̄)`, and the implied box multipliers times slack.
    pub complementarity: f64,
    pub tolerance: f64,
}

impl KktReport {
    pub fn primal_ok(&self) -> bool {
        self.primal <= self.tolerance
    }
    pub fn dual_ok(&self) -> bool {
        self.dual <= self.tolerance
    }
    pub fn stationarity_ok(&self) -> bool {
        self.stationarity <= self.tolerance
    }
    pub fn complementarity_ok(&self) -> bool {
        self.complementarity <= self.tolerance
    }
    pub fn passed(&self) -> bool {
        self.primal_ok() && self.dual_ok() && self.stationarity_ok() && self.complementarity_ok()
    }
    pub fn max_residual(&self) -> f64 {
        self.primal
            .max(self.dual)
            .max(self.stationarity)
            .max(self.complementarity)
    }
}

/// Checks a claimed solution against the optimality conditions directly from
/// the problem data. A node is treated as sitting on a bound when it is within
/// `tolerance` of it.
pub fn verify_kkt(
    net: &Network,
    prob: &DcOpfProblem,
    sol: &DcOpfSolution,
    tolerance: f64,
) -> KktReport {
    let n = net.n_nodes();
    let limits = net.grid().flow_limits();
    let flows = net.isf().flows(&sol.p_star);

    let mut primal = sol.p_star.iter().sum::<f64>().abs();
    for i in 0..n {
        primal = primal
            .max(prob.p_min[i] - sol.p_star[i])
            .max(sol.p_star[i] - prob.p_max[i]);
    }
    for k in 0..limits.len() {
        primal = primal
            .max(flows[k].abs() - limits[k])
            .max((flows[k] - sol.f_star[k]).abs());
    }

    let dual = sol
        .mu_upper
        .iter()
        .chain(&sol.mu_lower)
        .fold(0.0, |m, &v| f64::max(m, -v));

    let mut stationarity: f64 = 0.0;
    let mut complementarity: f64 = 0.0;
    for i in 0..n {
        if prob.is_fixed(i) {
            continue;
        }
        let p = sol.p_star[i];
        let gap = sol.pi[i] - prob.marginal_cost(i, p);
        let up_slack = prob.p_max[i] - p;
        let lo_slack = p - prob.p_min[i];
        let at_upper = up_slack <= tolerance;
        let at_lower = lo_slack <= tolerance;
        let r = match (at_lower, at_upper) {
            (false, false) => gap.abs(),
            (false, true) => (-gap).max(0.0),
            (true, false) => gap.max(0.0),
            (true, true) => 0.0,
        };
        stationarity = stationarity.max(r);
        let box_comp = if gap > 0.0 {
            gap * up_slack.max(0.0)
        } else {
            -gap * lo_slack.max(0.0)
        };
        complementarity = complementarity.max(box_comp);
    }
    for k in 0..limits.len() {
        complementarity = complementarity
            .max((sol.mu_upper[k] * (limits[k] - flows[k])).abs())
            .max((sol.mu_lower[k] * (flows[k] + limits[k])).abs());
    }
    KktReport {
        primal,
        dual,
        stationarity,
        complementarity,
        tolerance,
    }
}

pub const ORACLE_MAX_NODES: usize = 6;
pub const ORACLE_MAX_EDGES: usize = 8;

/// Exact solve by enumerating active sets.
///
/// Every combination of active box and flow constraints (each quantity at its
/// upper side, lower side, or inactive) with at most as many active rows as
/// free variables is solved as an equality-constrained QP through its KKT
/// system. Candidates that are primal feasible with nonnegative multipliers
/// are kept and the cheapest one wins.
pub fn solve_dcopf_oracle(net: &Network, prob: &DcOpfProblem) -> Result<DcOpfSolution> {
    let n = net.n_nodes();
    let m = net.n_edges();
    if n > ORACLE_MAX_NODES || m > ORACLE_MAX_EDGES {
        return Err(Error::TooLarge(format!(
            "{n} nodes / {m} lines exceeds {ORACLE_MAX_NODES} / {ORACLE_MAX_EDGES}"
        )));
    }
    prob.validate(n)?;

    let free: Vec<usize> = (0..n).filter(|&i| !prob.is_fixed(i)).collect();
    let nf = free.len();
    let mut p_fixed = vec![0.0; n];
    for i in 0..n {
        if prob.is_fixed(i) {
            p_fixed[i] = prob.p_min[i];
        }
    }
    let s = net.isf().matrix();
    let limits = net.grid().flow_limits();
    let fixed_flow: Vec<f64> = (0..m)
        .map(|k| (0..n).map(|i| s[(k, i)] * p_fixed[i]).sum())
        .collect();

    // A quantity is a linear function rᵀx + r0 with bounds [lo, hi].
    struct Quantity {
        coeffs: Vec<f64>,
        offset: f64,
        lo: f64,
        hi: f64,
    }
    let mut quantities = Vec::with_capacity(nf + m);
    for (col, &i) in free.iter().enumerate() {
        let mut coeffs = vec![0.0; nf];
        coeffs[col] = 1.0;
        quantities.push(Quantity {
            coeffs,
            offset: 0.0,
            lo: prob.p_min[i],
            hi: prob.p_max[i],
        });
    }
    for k in 0..m {
        quantities.push(Quantity {
            coeffs: free.iter().map(|&i| s[(k, i)]).collect(),
            offset: fixed_flow[k],
            lo: -limits[k],
            hi: limits[k],
        });
    }
    let demand: f64 = -p_fixed.iter().sum::<f64>();
    let feas_tol = 1e-9;
    let mult_tol = 1e-9;

    // (x, y, multipliers keyed by quantity: positive = upper active, negative = lower active)
    let mut best: Option<(f64, Vec<f64>, f64, Vec<f64>)> = None;
    // state per quantity: 0 inactive, 1 upper, 2 lower
    let mut state = vec![0u8; quantities.len()];
    loop {
        let active: Vec<usize> = (0..state.len()).filter(|&q| state[q] != 0).collect();
        if active.len() <= nf {
            let dim = nf + 1 + active.len();
            let mut kkt = Matrix::zeros(dim, dim);
            let mut rhs = vec![0.0; dim];
            for j in 0..nf {
                kkt[(j, j)] = 2.0 * prob.cost_a[free[j]];
                rhs[j] = -prob.cost_b[free[j]];
                kkt[(j, nf)] = 1.0;
                kkt[(nf, j)] = 1.0;
            }
            rhs[nf] = demand;
            for (r, &q) in active.iter().enumerate() {
                let quantity = &quantities[q];
                // upper: rᵀx ≤ hi − r0 ; lower: −rᵀx ≤ −(lo − r0)
                let sign = if state[q] == 1 { 1.0 } else { -1.0 };
                for j in 0..nf {
                    kkt[(j, nf + 1 + r)] = sign * quantity.coeffs[j];
                    kkt[(nf + 1 + r, j)] = sign * quantity.coeffs[j];
                }
                rhs[nf + 1 + r] = if state[q] == 1 {
                    quantity.hi - quantity.offset
                } else {
                    -(quantity.lo - quantity.offset)
                };
            }
            if let Some(lu) = Lu::factor(&kkt) {
                let sol = lu.solve(&rhs);
                let x = &sol[..nf];
                let mults = &sol[nf + 1..];
                let feasible = quantities.iter().all(|q| {
                    let v = dot(&q.coeffs, x) + q.offset;
                    v <= q.hi + feas_tol && v >= q.lo - feas_tol
                });
                let signs_ok = mults.iter().all(|&v| v >= -mult_tol);
                if feasible && signs_ok {
                    let mut p = p_fixed.clone();
                    for (j, &i) in free.iter().enumerate() {
                        p[i] = x[j];
                    }
                    let cost = prob.cost(&p);
                    if best.as_ref().is_none_or(|b| cost < b.0) {
                        let mut signed = vec![0.0; quantities.len()];
                        for (r, &q) in active.iter().enumerate() {
                            signed[q] = if state[q] == 1 { mults[r] } else { -mults[r] };
                        }
                        best = Some((cost, p, sol[nf], signed));
                    }
                }
            }
        }
        // next state (odometer)
        let mut pos = 0;
        loop {
            if pos == state.len() {
                return finish_oracle(net, best);
            }
            state[pos] += 1;
            if state[pos] == 3 {
                state[pos] = 0;
                pos += 1;
            } else {
                break;
            }
        }
    }
}

fn finish_oracle(
    net: &Network,
    best: Option<(f64, Vec<f64>, f64, Vec<f64>)>,
) -> Result<DcOpfSolution> {
    let (_, p_star, y, signed) =
        best.ok_or_else(|| Error::Infeasible("no feasible active set".into()))?;
    let m = net.n_edges();
    let nq = signed.len();
    let flow_mults = &signed[nq - m..];
    let mu_upper: Vec<f64> = flow_mults.iter().map(|&v| v.max(0.0)).collect();
    let mu_lower: Vec<f64> = flow_mults.iter().map(|&v| (-v).max(0.0)).collect();
    let lambda = -y;
    let pi = lmp_from_duals(lambda, &mu_upper, &mu_lower, net.isf())?;
    let f_star = net.isf().flows(&p_star);
    Ok(DcOpfSolution {
        p_star,
        f_star,
        lambda,
        mu_upper,
        mu_lower,
        pi,
        kkt_residual: 0.0,
        iterations: 0,
    })
}
