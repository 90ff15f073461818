//! Acceptance suite. Prints one PASS/FAIL line per criterion; the learning
//! criteria drive the release pipeline through the `lmplab` binary with a
//! single thread so that a second run can be compared byte for byte.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use lmplab::format::read_dataset;
use lmplab_core::dcopf::{solve_dcopf, solve_dcopf_oracle, DcOpfProblem, Network, SolverOptions};
use lmplab_core::grid::{generate_synthetic_grid, Edge, Grid};
use lmplab_core::linalg::Matrix;
use lmplab_core::nn::{backward, count_parameters, Architecture, Model, Topology};
use lmplab_core::rng;
use lmplab_core::training::{fr_loss, recover_injections, DEFAULT_TIE_EPS};
use lmplab_core::transfer::median;
use lmplab_core::Error;
use rand::Rng as _;
use serde_json::Value;

// criterion 1
const ORACLE_INSTANCES: usize = 200;
const ORACLE_P_TOL: f64 = 1e-6;
const ORACLE_PI_TOL: f64 = 1e-5;
const ORACLE_SECS: f64 = 30.0;
// criterion 2
const PINNED_TOL: f64 = 1e-6;
const PINNED_LOSS: f64 = 59.26667;
const PINNED_LOSS_TOL: f64 = 1e-4;
// criterion 3
const GRAD_SEEDS: u64 = 20;
const GRAD_STEP: f64 = 1e-5;
const FR_GRAD_STEP: f64 = 1e-7;
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_SECS: f64 = 60.0;
// criterion 5
const LEARN_SEEDS: [u64; 3] = [1, 2, 3];
const LEARN_MAX_L2: f64 = 0.15;
const LEARN_MAX_BASELINE_RATIO: f64 = 0.5;
const LEARN_SECS: f64 = 600.0;
// criterion 6
const FR_MIN_CONGESTED: f64 = 0.5;
const FR_MAX_L2_DEGRADATION: f64 = 0.25;
// criterion 7
const TRANSFER_SEEDS: &str = "1,2,3,4,5";
const TRANSFER_FINETUNE_EPOCHS: &str = "5";
const TRANSFER_MAX_SCRATCH_GAP: f64 = 0.20;
const TRANSFER_SECS: f64 = 900.0;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: String) -> Self {
        Verdict { pass, detail }
    }

    fn error(msg: String) -> Self {
        Verdict {
            pass: false,
            detail: format!("error: {msg}"),
        }
    }
}

fn main() {
    let mut verdicts: Vec<(u32, bool)> = Vec::new();
    let mut record = |id: u32, name: &str, v: Verdict| {
        println!(
            "criterion {id} {} {name}: {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        verdicts.push((id, v.pass));
    };
    record(1, "solver exactness", solver_exactness());
    record(2, "pinned analytic case", pinned_case());
    record(3, "gradient correctness", gradient_correctness());
    record(4, "parameter-count law", parameter_counts());

    let scratch = tempfile::tempdir().expect("temporary directory");
    let first = scratch.path().join("first");
    let second = scratch.path().join("second");
    match Pipeline::run(&first) {
        Ok(p) => {
            record(5, "learning quality", p.learning_quality());
            record(6, "feasibility regularization", p.fr_effect());
            record(7, "topology adaptivity", p.topology_adaptivity());
            record(8, "determinism", determinism(&first, &second));
        }
        Err(e) => {
            for (id, name) in [
                (5, "learning quality"),
                (6, "feasibility regularization"),
                (7, "topology adaptivity"),
                (8, "determinism"),
            ] {
                record(id, name, Verdict::error(e.clone()));
            }
        }
    }

    let failed: Vec<u32> = verdicts.iter().filter(|v| !v.1).map(|v| v.0).collect();
    println!(
        "acceptance: {}/{} criteria met",
        verdicts.len() - failed.len(),
        verdicts.len()
    );
    if !failed.is_empty() {
        println!("unmet: {failed:?}");
        std::process::exit(1);
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Random instance on 3 to 5 nodes: fixed loads at the last one or two
/// nodes, quadratic generators elsewhere, limits often tight enough to bind.
fn random_instance(seed: u64) -> (Network, DcOpfProblem) {
    let mut r = rng::seeded(seed);
    let n = r.random_range(3..=5usize);
    let avg_degree = if n == 3 {
        2.0
    } else {
        r.random_range(2.0..3.0)
    };
    let grid =
        generate_synthetic_grid(n, avg_degree, r.random_range(0.2..0.8), r.random()).unwrap();
    let n_loads = r.random_range(1..=2);
    let mut prob = DcOpfProblem {
        cost_a: vec![0.0; n],
        cost_b: vec![0.0; n],
        p_min: vec![0.0; n],
        p_max: vec![0.0; n],
    };
    for i in 0..n {
        if i >= n - n_loads {
            let load = -r.random_range(0.5..2.0);
            prob.p_min[i] = load;
            prob.p_max[i] = load;
        } else {
            prob.cost_a[i] = r.random_range(0.1..2.0);
            prob.cost_b[i] = r.random_range(0.0..5.0);
            prob.p_min[i] = r.random_range(0.0..0.3);
            prob.p_max[i] = prob.p_min[i] + r.random_range(0.5..3.0);
        }
    }
    (Network::new(grid).unwrap(), prob)
}

fn solver_exactness() -> Verdict {
    let start = Instant::now();
    let (mut checked, mut congested, mut seed) = (0, 0, 0u64);
    let (mut worst_p, mut worst_pi): (f64, f64) = (0.0, 0.0);
    while checked < ORACLE_INSTANCES {
        seed += 1;
        let (net, prob) = random_instance(seed);
        let oracle = match solve_dcopf_oracle(&net, &prob) {
            Ok(o) => o,
            Err(Error::Infeasible(_)) => continue,
            Err(e) => return Verdict::error(format!("oracle on instance {seed}: {e}")),
        };
        let ipm = match solve_dcopf(&net, &prob, &SolverOptions::default()) {
            Ok(s) => s,
            Err(e) => return Verdict::error(format!("solver on instance {seed}: {e}")),
        };
        worst_p = worst_p.max(max_abs_diff(&ipm.p_star, &oracle.p_star));
        worst_pi = worst_pi.max(max_abs_diff(&ipm.pi, &oracle.pi));
        congested += usize::from(
            oracle
                .mu_upper
                .iter()
                .chain(&oracle.mu_lower)
                .any(|m| *m > 1e-9),
        );
        checked += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    Verdict::new(
        worst_p <= ORACLE_P_TOL && worst_pi <= ORACLE_PI_TOL && secs < ORACLE_SECS,
        format!(
            "{checked} instances ({congested} congested), max |dp| {worst_p:.1e} (tol {ORACLE_P_TOL:.0e}), \
             max |dpi| {worst_pi:.1e} (tol {ORACLE_PI_TOL:.0e}), {secs:.1} s (limit {ORACLE_SECS} s)"
        ),
    )
}

fn triangle() -> (Network, DcOpfProblem) {
    let edges = vec![
        Edge::new(0, 1, 1.0, 10.0),
        Edge::new(0, 2, 1.0, 1.2),
        Edge::new(1, 2, 1.0, 10.0),
    ];
    let net = Network::new(Grid::new(3, edges, 0).unwrap()).unwrap();
    let prob = DcOpfProblem {
        cost_a: vec![0.5, 1.0, 0.0],
        cost_b: vec![0.0; 3],
        p_min: vec![0.0, 0.0, -3.0],
        p_max: vec![10.0, 10.0, -3.0],
    };
    (net, prob)
}

fn pinned_case() -> Verdict {
    let (net, prob) = triangle();
    let sol = match solve_dcopf(&net, &prob, &SolverOptions::default()) {
        Ok(s) => s,
        Err(e) => return Verdict::error(e.to_string()),
    };
    let dp = max_abs_diff(&sol.p_star, &[0.6, 2.4, -3.0]);
    let dpi = max_abs_diff(&sol.pi, &[0.6, 4.8, 9.0]);
    let loss = fr_loss(&[2.0; 3], &[0.6, 4.8, 9.0], &prob, &net, 1.0)
        .map(|l| l.0)
        .unwrap_or(f64::NAN);
    Verdict::new(
        dp <= PINNED_TOL && dpi <= PINNED_TOL && (loss - PINNED_LOSS).abs() <= PINNED_LOSS_TOL,
        format!("|dp| {dp:.1e}, |dpi| {dpi:.1e} (tol {PINNED_TOL:.0e}); FR loss {loss:.6} (want {PINNED_LOSS} ± {PINNED_LOSS_TOL:.0e})"),
    )
}

/// Worst relative central-difference error of `Σ c_i π̂_i` over all
/// parameters, with random weights `c`.
fn model_gradient_error(model: &Model, x: &Matrix, seed: u64) -> f64 {
    let n = x.rows();
    let mut r = rng::seeded(seed);
    let c: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let objective = |m: &Model| {
        m.predict(x)
            .unwrap()
            .iter()
            .zip(&c)
            .map(|(a, b)| a * b)
            .sum::<f64>()
    };
    let g = backward(model, &model.forward(x).unwrap(), &c).unwrap();
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for k in 0..model.n_params() {
        let orig = probe.params()[k];
        probe.params_mut()[k] = orig + GRAD_STEP;
        let up = objective(&probe);
        probe.params_mut()[k] = orig - GRAD_STEP;
        let down = objective(&probe);
        probe.params_mut()[k] = orig;
        let fd = (up - down) / (2.0 * GRAD_STEP);
        worst = worst.max((g[k] - fd).abs() / g[k].abs().max(fd.abs()).max(1.0));
    }
    worst
}

fn random_model(arch: Architecture, grid: &Grid, seed: u64) -> Model {
    let mut m = Model::new(arch, grid, seed).unwrap();
    let mut r = rng::seeded(seed ^ 0xA5A5);
    m.params_mut()
        .iter_mut()
        .for_each(|v| *v = r.random_range(-0.8..0.8));
    m
}

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut r = rng::seeded(seed);
    Matrix::from_rows(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| r.random_range(-1.0..1.0))
            .collect(),
    )
}

/// Central differences of the FR loss at a random price guess near the
/// optimum, redrawn until no dispatch or flow sits within 1e-6 of a kink.
fn fr_gradient_error(seed: u64) -> f64 {
    let mut s = seed;
    let (net, prob, pi) = loop {
        let (net, prob) = random_instance(10_000 + s);
        if let Ok(sol) = solve_dcopf(&net, &prob, &SolverOptions::default()) {
            break (net, prob, sol.pi);
        }
        s += 1000;
    };
    let limits = net.grid().flow_limits();
    let mut r = rng::seeded(seed);
    let pi_hat = loop {
        let guess: Vec<f64> = pi.iter().map(|p| p + r.random_range(-2.0..2.0)).collect();
        let smooth_dispatch = (0..prob.n_nodes()).all(|i| {
            prob.is_fixed(i) || {
                let u = (guess[i] - prob.cost_b[i]) / (2.0 * prob.cost_a[i]);
                (u - prob.p_min[i]).abs() > 1e-6 && (u - prob.p_max[i]).abs() > 1e-6
            }
        });
        let flows = net
            .isf()
            .flows(&recover_injections(&guess, &prob, DEFAULT_TIE_EPS).injections);
        if smooth_dispatch
            && flows
                .iter()
                .zip(&limits)
                .all(|(f, l)| (f.abs() - l).abs() > 1e-6)
        {
            break guess;
        }
    };
    let loss = |p: &[f64]| fr_loss(p, &pi, &prob, &net, 1.0).unwrap();
    let g = loss(&pi_hat).1;
    let mut worst: f64 = 0.0;
    for i in 0..pi_hat.len() {
        let (mut up, mut down) = (pi_hat.clone(), pi_hat.clone());
        up[i] += FR_GRAD_STEP;
        down[i] -= FR_GRAD_STEP;
        let fd = (loss(&up).0 - loss(&down).0) / (2.0 * FR_GRAD_STEP);
        worst = worst.max((g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1.0));
    }
    worst
}

fn gradient_correctness() -> Verdict {
    let start = Instant::now();
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |key: &'static str, err: f64| {
        let w = worst.entry(key).or_insert(0.0);
        *w = w.max(err);
    };
    for seed in 0..GRAD_SEEDS {
        let grid = generate_synthetic_grid(4, 2.5, 1.0, seed).unwrap();
        let x = random_matrix(4, 3, seed + 50);
        for (key, order) in [("gnn K=1", 1), ("gnn K=2", 2), ("gnn K=3", 3)] {
            note(
                key,
                model_gradient_error(
                    &random_model(Architecture::gnn(vec![3, 5, 1], order), &grid, seed),
                    &x,
                    seed,
                ),
            );
        }
        note(
            "fcnn",
            model_gradient_error(
                &random_model(Architecture::fcnn(vec![12, 7, 5, 4]), &grid, seed),
                &x,
                seed,
            ),
        );
        note(
            "gidnn",
            model_gradient_error(
                &random_model(Architecture::gidnn(vec![3, 2, 2, 1]), &grid, seed),
                &x,
                seed,
            ),
        );
        note("fr_loss", fr_gradient_error(seed));
    }
    let secs = start.elapsed().as_secs_f64();
    let max = worst.values().cloned().fold(0.0, f64::max);
    let parts: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    Verdict::new(
        max <= GRAD_REL_TOL && secs < GRAD_SECS,
        format!("{GRAD_SEEDS} seeds each, worst rel err: {} (tol {GRAD_REL_TOL:.0e}), {secs:.1} s (limit {GRAD_SECS} s)", parts.join(", ")),
    )
}

/// 118 buses and 186 lines: a ring plus 68 second-neighbour chords.
fn grid_118() -> Grid {
    let n = 118;
    let mut edges: Vec<Edge> = (0..n)
        .map(|i| {
            let j = (i + 1) % n;
            Edge::new(i.min(j), i.max(j), 1.0, 1.0)
        })
        .collect();
    edges.extend((0..68).map(|i| Edge::new(i, i + 2, 1.0, 1.0)));
    Grid::new(n, edges, 0).unwrap()
}

fn parameter_counts() -> Verdict {
    let dims = vec![4, 32, 32, 1];
    let arch = Architecture::gnn(dims.clone(), 2);
    // (N + 2|E|, total) at four sizes; the law says total = α·(N + 2|E|) + c
    let points: Vec<(i64, i64)> = [10, 20, 40, 80]
        .iter()
        .map(|&n| {
            let topo =
                Topology::from_grid(&generate_synthetic_grid(n, 2.5, 1.0, n as u64).unwrap());
            (
                topo.filter_nnz() as i64,
                count_parameters(&arch, &topo) as i64,
            )
        })
        .collect();
    let (x0, y0) = points[0];
    let (x1, y1) = points[3];
    let alpha = (y1 - y0) / (x1 - x0);
    let c = y0 - alpha * x0;
    let maps: i64 = dims
        .windows(2)
        .map(|w| (3 * w[0] * w[1] + w[1]) as i64)
        .sum();
    let law_holds = (y1 - y0) % (x1 - x0) == 0
        && alpha == 1
        && c == maps
        && points.iter().all(|&(x, y)| y == alpha * x + c);

    let g = grid_118();
    let topo = Topology::from_grid(&g);
    let gnn_one = count_parameters(&Architecture::gnn(vec![32, 32], 1), &topo);
    let fcnn_one = count_parameters(&Architecture::fcnn(vec![118 * 32, 118 * 32]), &topo);
    // independent arithmetic: (118·32)² + 118·32 = 14,258,176 + 3,776
    let ratio_ok = g.n_edges() == 186 && gnn_one == 2570 && fcnn_one == 14_261_952;

    let gnn = count_parameters(&Architecture::gnn(vec![4, 32, 32, 1], 2), &topo);
    let gidnn = count_parameters(&Architecture::gidnn(vec![4, 32, 32, 1]), &topo);
    let fcnn = count_parameters(
        &Architecture::fcnn(vec![118 * 4, 118 * 32, 118 * 32, 118]),
        &topo,
    );
    let ordered = gnn < gidnn && gidnn < fcnn;
    Verdict::new(
        law_holds && ratio_ok && ordered,
        format!(
            "totals {points:?} fit {alpha}·(N+2|E|) + {c} exactly: {law_holds}; single layer 118 buses d=32: \
             {gnn_one} / {fcnn_one} = {:.3e}; full models gnn {gnn} < gidnn {gidnn} < fcnn {fcnn}: {ordered}",
            gnn_one as f64 / fcnn_one as f64
        ),
    )
}

fn lmplab(dir: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_lmplab"))
        .args(args)
        .args(["--threads", "1"])
        .current_dir(dir)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "`lmplab {}` exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn json(path: PathBuf) -> Result<Value, String> {
    let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn num(v: &Value, path: &[&str]) -> f64 {
    path.iter()
        .fold(v, |v, k| &v[k])
        .as_f64()
        .unwrap_or(f64::NAN)
}

struct SeedRun {
    seed: u64,
    fr: Value,
    mse: Value,
    test_congested: f64,
    secs: f64,
}

struct Pipeline {
    runs: Vec<SeedRun>,
    transfer: Value,
    transfer_secs: f64,
}

impl Pipeline {
    /// One directory per seed under `root`: 30-node grid, 5000 scenarios,
    /// default GNN with and without the flow penalty, and the transfer study
    /// on the first seed's grid.
    fn run(root: &Path) -> Result<Self, String> {
        let mut runs = Vec::new();
        for seed in LEARN_SEEDS {
            let dir = root.join(format!("seed-{seed}"));
            std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
            let config = format!(
                "[grid]\nn = 30\navg_degree = 2.5\nlimit_scale = 1.0\nseed = {seed}\n\n\
                 [data]\ncount = 5000\nsplits = [0.8, 0.1, 0.1]\nseed = {seed}\n\n\
                 [train]\nseed = {seed}\n"
            );
            std::fs::write(dir.join("run.toml"), config).map_err(|e| e.to_string())?;
            let start = Instant::now();
            lmplab(
                &dir,
                &["grid-gen", "--config", "run.toml", "-o", "grid.case"],
            )?;
            lmplab(
                &dir,
                &[
                    "data-gen",
                    "--config",
                    "run.toml",
                    "--grid",
                    "grid.case",
                    "--out",
                    "data",
                ],
            )?;
            let train = [
                "train",
                "--config",
                "run.toml",
                "--grid",
                "grid.case",
                "--data",
                "data",
                "--out",
                "models",
            ];
            lmplab(&dir, &train)?;
            let secs = start.elapsed().as_secs_f64();
            lmplab(&dir, &[&train[..], &["--lambda-reg", "0"]].concat())?;

            let test =
                std::fs::read_to_string(dir.join("data/test.jsonl")).map_err(|e| e.to_string())?;
            let test = read_dataset(&test).map_err(|e| e.to_string())?;
            runs.push(SeedRun {
                seed,
                fr: json(dir.join("models/metrics-gnn-fr.json"))?,
                mse: json(dir.join("models/metrics-gnn-mse.json"))?,
                test_congested: test.congested_fraction(),
                secs,
            });
        }
        let dir = root.join(format!("seed-{}", LEARN_SEEDS[0]));
        let start = Instant::now();
        lmplab(
            &dir,
            &[
                "transfer",
                "--config",
                "run.toml",
                "--grid",
                "grid.case",
                "--checkpoint",
                "models/checkpoint-gnn-fr.json",
                "--seeds",
                TRANSFER_SEEDS,
                "--max-lines",
                "2",
                "--finetune-epochs",
                TRANSFER_FINETUNE_EPOCHS,
                "--out",
                "transfer",
            ],
        )?;
        let transfer_secs = start.elapsed().as_secs_f64();
        Ok(Pipeline {
            runs,
            transfer: json(dir.join("transfer/transfer.json"))?,
            transfer_secs,
        })
    }

    fn learning_quality(&self) -> Verdict {
        let mut pass = true;
        let mut parts = Vec::new();
        for r in &self.runs {
            let l2 = num(&r.fr, &["test", "normalized_l2"]);
            let base = num(&r.fr, &["baseline", "normalized_l2"]);
            let ratio = l2 / base;
            pass &= l2 <= LEARN_MAX_L2 && ratio <= LEARN_MAX_BASELINE_RATIO;
            parts.push(format!(
                "seed {} L2 {l2:.4} baseline {base:.4} ratio {ratio:.3} ({:.0} s)",
                r.seed, r.secs
            ));
        }
        let total: f64 = self.runs.iter().map(|r| r.secs).sum();
        pass &= total < LEARN_SECS;
        Verdict::new(
            pass,
            format!(
                "{}; want L2 <= {LEARN_MAX_L2}, ratio <= {LEARN_MAX_BASELINE_RATIO}, total {total:.0} s < {LEARN_SECS} s",
                parts.join("; ")
            ),
        )
    }

    fn fr_effect(&self) -> Verdict {
        let pick = |f: fn(&SeedRun) -> &Value, key: &str| -> Vec<f64> {
            self.runs
                .iter()
                .map(|r| num(f(r), &["test", key]))
                .collect()
        };
        let congested: Vec<f64> = self.runs.iter().map(|r| r.test_congested).collect();
        let fr_viol = median(&pick(|r| &r.fr, "violation_rate"));
        let mse_viol = median(&pick(|r| &r.mse, "violation_rate"));
        let fr_l2 = median(&pick(|r| &r.fr, "normalized_l2"));
        let mse_l2 = median(&pick(|r| &r.mse, "normalized_l2"));
        let degradation = fr_l2 / mse_l2 - 1.0;
        let pass = congested.iter().all(|c| *c >= FR_MIN_CONGESTED)
            && fr_viol <= mse_viol
            && degradation <= FR_MAX_L2_DEGRADATION;
        Verdict::new(
            pass,
            format!(
                "test congested fractions {congested:?} (want >= {FR_MIN_CONGESTED}); median violation FR {fr_viol:.3e} vs MSE \
                 {mse_viol:.3e}; median L2 FR {fr_l2:.4} vs MSE {mse_l2:.4} ({:+.1}%, limit +{:.0}%)",
                100.0 * degradation,
                100.0 * FR_MAX_L2_DEGRADATION
            ),
        )
    }

    fn topology_adaptivity(&self) -> Verdict {
        let Some(exps) = self.transfer["experiments"].as_array() else {
            return Verdict::error("transfer report has no experiments".into());
        };
        let l2 = |key: &str| {
            median(
                &exps
                    .iter()
                    .map(|e| num(e, &[key, "normalized_l2"]))
                    .collect::<Vec<_>>(),
            )
        };
        let (pre, fine, scratch) = (l2("pretrained"), l2("finetuned"), l2("scratch"));
        let removed: Vec<usize> = exps
            .iter()
            .map(|e| e["removed_edges"].as_array().map_or(0, Vec::len))
            .collect();
        let gap = fine / scratch - 1.0;
        let pass = exps.len() == 5
            && removed.iter().all(|r| (1..=2).contains(r))
            && fine < pre
            && gap <= TRANSFER_MAX_SCRATCH_GAP
            && self.transfer_secs < TRANSFER_SECS;
        Verdict::new(
            pass,
            format!(
                "{} seeds, lines removed {removed:?}; median L2 pretrained {pre:.4}, finetuned {fine:.4}, scratch {scratch:.4} \
                 (gap {:+.1}%, limit +{:.0}%); {:.0} s (limit {TRANSFER_SECS} s)",
                exps.len(),
                100.0 * gap,
                100.0 * TRANSFER_MAX_SCRATCH_GAP,
                self.transfer_secs
            ),
        )
    }
}

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).into_iter().flatten().flatten() {
            let path = entry.path();
            if path.is_dir() {
                walk(root, &path, out);
            } else if let Ok(bytes) = std::fs::read(&path) {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), bytes);
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn determinism(first: &Path, second: &Path) -> Verdict {
    if let Err(e) = Pipeline::run(second) {
        return Verdict::error(e);
    }
    let (a, b) = (files_under(first), files_under(second));
    let differing: Vec<String> = a
        .keys()
        .chain(b.keys())
        .filter(|k| a.get(*k) != b.get(*k))
        .map(|k| k.display().to_string())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    Verdict::new(
        differing.is_empty() && !a.is_empty(),
        if differing.is_empty() {
            format!("rerun reproduced all {} artifacts byte for byte", a.len())
        } else {
            format!(
                "{} of {} artifacts differ: {differing:?}",
                differing.len(),
                a.len()
            )
        },
    )
}
