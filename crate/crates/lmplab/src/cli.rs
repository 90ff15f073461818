//! Command-line surface. Flags override config file values.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use lmplab_core::dcopf::Network;
use lmplab_core::nn::ModelKind;
use lmplab_core::training::ScaledModel;

use crate::config::RunConfig;
use crate::format::{self, Checkpoint};
use crate::parallel::{self, Pool};
use crate::run::{self, ExitKind, MetricsRecord, RunError, Splits};

#[derive(Debug, Parser)]
#[command(
    name = "lmplab",
    version,
    about = "Learn locational marginal prices from dc optimal power flow"
)]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for data generation and evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic grid case file.
    GridGen(GridGenArgs),
    /// Sample labelled scenarios and write train/val/test JSONL files.
    DataGen(DataGenArgs),
    /// Train a model; writes checkpoint, history CSV and metrics JSON.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset file.
    Eval(EvalArgs),
    /// Line-outage experiments starting from a trained GNN.
    Transfer(TransferArgs),
    /// Summarize metrics and transfer reports as a table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GridArgs {
    /// Grid case file; overrides the config's grid section.
    #[arg(long)]
    pub grid: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GridGenArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub avg_degree: Option<f64>,
    #[arg(long)]
    pub limit_scale: Option<f64>,
    /// Case file to write (default: <out>/grid.case).
    #[arg(short = 'o', long = "output")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DataGenArgs {
    #[command(flatten)]
    pub grid: GridArgs,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub bound_jitter: Option<f64>,
    #[arg(long)]
    pub cost_jitter: Option<f64>,
    #[arg(long)]
    pub load_level: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub grid: GridArgs,
    /// Directory holding train.jsonl, val.jsonl and test.jsonl.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub kind: Option<String>,
    /// 0 trains the plain MSE baseline.
    #[arg(long)]
    pub lambda_reg: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Include wall-clock time in the metrics JSON.
    #[arg(long)]
    pub timing: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub grid: GridArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset JSONL file.
    #[arg(long)]
    pub data: PathBuf,
    /// Metrics file to write (default: <out>/eval.json).
    #[arg(short = 'o', long = "output")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    #[command(flatten)]
    pub grid: GridArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
    #[arg(long)]
    pub max_lines: Option<usize>,
    /// Comma-separated perturbation seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Also write per-sample test L2 errors as TSV.
    #[arg(long)]
    pub dump_samples: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Metrics or transfer JSON files written by other commands.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

struct Context {
    cfg: RunConfig,
    pool: Pool,
    out: PathBuf,
}

impl Context {
    fn digest(&self) -> String {
        self.cfg.digest()
    }

    fn grid(&self, args: &GridArgs) -> run::Result<lmplab_core::Grid> {
        match &args.grid {
            Some(path) => run::load_grid(path),
            None => run::build_grid(&self.cfg),
        }
    }
}

/// Runs the parsed command line, printing human-readable results to stdout.
pub fn execute(cli: Cli) -> run::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.override_seeds(seed);
    }
    let pool = Pool::new(cli.threads)
        .map_err(|e| RunError::new(ExitKind::Config, format!("thread pool: {e}")))?;
    let mut ctx = Context {
        cfg,
        pool,
        out: cli.out,
    };
    match cli.command {
        Command::GridGen(a) => grid_gen(&mut ctx, a),
        Command::DataGen(a) => data_gen(&mut ctx, a),
        Command::Train(a) => train(&mut ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Transfer(a) => transfer(&mut ctx, a),
        Command::Report(a) => report(&a),
    }
}

fn grid_gen(ctx: &mut Context, a: GridGenArgs) -> run::Result<()> {
    let g = &mut ctx.cfg.grid;
    if let Some(n) = a.n {
        g.n = n;
    }
    if let Some(d) = a.avg_degree {
        g.avg_degree = d;
    }
    if let Some(s) = a.limit_scale {
        g.limit_scale = s;
    }
    g.case_path = None;
    let grid = run::build_grid(&ctx.cfg)?;
    let path = a.output.unwrap_or_else(|| ctx.out.join("grid.case"));
    run::write_file(&path, &format::write_case(&grid))?;
    let connected = grid
        .hop_distances(grid.reference())
        .iter()
        .all(Option::is_some);
    println!(
        "nodes {}  lines {}  connected {}  -> {}",
        grid.n_nodes(),
        grid.n_edges(),
        connected,
        path.display()
    );
    Ok(())
}

pub const SPLIT_FILES: [&str; 3] = ["train.jsonl", "val.jsonl", "test.jsonl"];

fn data_gen(ctx: &mut Context, a: DataGenArgs) -> run::Result<()> {
    let d = &mut ctx.cfg.data;
    if let Some(c) = a.count {
        d.count = c;
    }
    if let Some(j) = a.bound_jitter {
        d.bound_jitter = j;
    }
    if let Some(j) = a.cost_jitter {
        d.cost_jitter = j;
    }
    if let Some(l) = a.load_level {
        d.load_level = l;
    }
    let grid = ctx.grid(&a.grid)?;
    let net = Network::new(grid)?;
    let base = run::base_problem(&net, &ctx.cfg)?;
    let splits = run::generate_data(&ctx.pool, &net, &base, &ctx.cfg)?;
    for (name, ds) in SPLIT_FILES
        .iter()
        .zip([&splits.train, &splits.val, &splits.test])
    {
        run::save_dataset(&ctx.out.join(name), ds)?;
    }
    println!(
        "scenarios {}  congested fraction {}  train/val/test {}/{}/{}",
        ctx.cfg.data.count,
        splits.congested_fraction,
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );
    Ok(())
}

fn load_splits(dir: &Path) -> run::Result<Splits> {
    let [train, val, test] = SPLIT_FILES.map(|f| run::load_dataset(&dir.join(f)));
    let (train, val, test) = (train?, val?, test?);
    let all = train
        .scenarios
        .iter()
        .chain(&val.scenarios)
        .chain(&test.scenarios);
    let total = train.len() + val.len() + test.len();
    let congested = all.filter(|s| s.is_congested()).count();
    Ok(Splits {
        congested_fraction: congested as f64 / total.max(1) as f64,
        train,
        val,
        test,
    })
}

/// File stem for a trained model: kind plus `fr` or `mse`.
pub fn model_tag(kind: &str, lambda_reg: f64) -> String {
    format!("{kind}-{}", if lambda_reg > 0.0 { "fr" } else { "mse" })
}

fn train(ctx: &mut Context, a: TrainArgs) -> run::Result<()> {
    if let Some(k) = &a.kind {
        ctx.cfg.model.kind = k.clone();
    }
    if let Some(l) = a.lambda_reg {
        ctx.cfg.train.lambda_reg = l;
    }
    if let Some(e) = a.max_epochs {
        ctx.cfg.train.max_epochs = e;
    }
    let grid = ctx.grid(&a.grid)?;
    let net = Network::new(grid)?;
    let data = load_splits(&a.data)?;
    let arch = ctx
        .cfg
        .model
        .architecture(net.n_nodes(), data.train.schema.d())?;
    let tcfg = ctx.cfg.train.train_config()?;
    let outcome = run::train_model(&ctx.pool, &net, &data, arch, &tcfg)?;
    let digest = ctx.digest();
    let tag = model_tag(&ctx.cfg.model.kind, tcfg.lambda_reg);
    let ck = Checkpoint::new(&outcome.model, &data.train.schema, &outcome.stats, &digest);
    run::write_file(&ctx.out.join(format!("checkpoint-{tag}.json")), &json(&ck)?)?;
    run::write_file(
        &ctx.out.join(format!("history-{tag}.csv")),
        &format::write_history(&outcome.history),
    )?;
    let doc = run::TrainMetricsDoc {
        tool_version: crate::TOOL_VERSION.into(),
        config_digest: digest,
        kind: ctx.cfg.model.kind.clone(),
        fr: tcfg.lambda_reg > 0.0,
        lambda_reg: tcfg.lambda_reg,
        n_params: outcome.n_params,
        grid_hash: net.grid().hash(),
        test_digest: data.test.digest(),
        best_epoch: outcome.history.best_epoch,
        test: MetricsRecord::new(&outcome.test, a.timing),
        baseline: MetricsRecord::new(&outcome.baseline, false),
    };
    run::write_file(&ctx.out.join(format!("metrics-{tag}.json")), &json(&doc)?)?;
    log::info!("training took {:.1} s", outcome.test.wall_time);
    println!(
        "{tag}: {} parameters, {} epochs (best {}), test L2 {:.6} violation {:.6}; mean-label baseline L2 {:.6}",
        outcome.n_params,
        outcome.history.epochs_run(),
        outcome.history.best_epoch,
        outcome.test.normalized_l2,
        outcome.test.violation_rate,
        outcome.baseline.normalized_l2
    );
    Ok(())
}

fn eval(ctx: &Context, a: EvalArgs) -> run::Result<()> {
    let ck = run::load_checkpoint(&a.checkpoint)?;
    let grid = ctx.grid(&a.grid)?;
    let ds = run::load_dataset(&a.data)?;
    if ds.grid_hash != grid.hash() {
        return Err(RunError::new(
            ExitKind::Integrity,
            format!(
                "dataset grid hash {} does not match the grid ({})",
                ds.grid_hash,
                grid.hash()
            ),
        ));
    }
    let model = ck.model(&grid).map_err(|e| match e {
        format::FormatError::Core(c) => RunError::from(c),
        other => RunError::new(ExitKind::Integrity, other.to_string()),
    })?;
    let schema = ck
        .schema()
        .map_err(|e| RunError::new(ExitKind::Integrity, e.to_string()))?;
    if schema != ds.schema {
        return Err(RunError::new(
            ExitKind::Integrity,
            "dataset columns differ from the checkpoint's",
        ));
    }
    let net = Network::new(grid)?;
    let stats = ck.stats();
    let metrics = parallel::evaluate(
        &ctx.pool,
        &ScaledModel {
            model: &model,
            stats: &stats,
        },
        &net,
        &ds,
    )?;
    let doc = run::EvalDoc {
        tool_version: crate::TOOL_VERSION.into(),
        config_digest: ctx.digest(),
        kind: ck.kind.clone(),
        grid_hash: net.grid().hash(),
        dataset_digest: ds.digest(),
        metrics: MetricsRecord::new(&metrics, false),
    };
    let path = a.output.unwrap_or_else(|| ctx.out.join("eval.json"));
    run::write_file(&path, &json(&doc)?)?;
    println!(
        "L2 {:.6}  violation {:.6}  feasible samples {:.4}  ({} samples) -> {}",
        metrics.normalized_l2,
        metrics.violation_rate,
        metrics.sample_feasible_fraction,
        metrics.n_samples,
        path.display()
    );
    Ok(())
}

fn transfer(ctx: &mut Context, a: TransferArgs) -> run::Result<()> {
    if let Some(e) = a.finetune_epochs {
        ctx.cfg.transfer.finetune_epochs = e;
    }
    if let Some(m) = a.max_lines {
        ctx.cfg.transfer.max_lines = m;
    }
    if let Some(s) = a.seeds {
        ctx.cfg.transfer.seeds = s;
    }
    let ck = run::load_checkpoint(&a.checkpoint)?;
    let grid = ctx.grid(&a.grid)?;
    if ck.kind != ModelKind::Gnn.name() {
        return Err(RunError::new(
            ExitKind::Transfer,
            format!("{} models cannot change topology", ck.kind),
        ));
    }
    let model = ck.model(&grid).map_err(|e| match e {
        format::FormatError::Core(c) => RunError::from(c),
        other => RunError::new(ExitKind::Integrity, other.to_string()),
    })?;
    let stats = ck.stats();
    let net = Network::new(grid.clone())?;
    let base = run::base_problem(&net, &ctx.cfg)?;
    let exp = run::experiment_config(&ctx.cfg, base, ctx.cfg.transfer.finetune_epochs)?;
    let results = run::run_transfer(
        &ctx.pool,
        &model,
        &stats,
        &grid,
        &ctx.cfg.transfer.seeds,
        &exp,
    )?;
    let doc = run::TransferDoc {
        tool_version: crate::TOOL_VERSION.into(),
        config_digest: ctx.digest(),
        experiments: results.iter().map(Into::into).collect(),
        medians: run::TransferMedians::of(&results),
    };
    run::write_file(&ctx.out.join("transfer.json"), &json(&doc)?)?;
    if a.dump_samples {
        run::write_file(
            &ctx.out.join("transfer-samples.tsv"),
            &transfer_samples(ctx, &model, &stats, &grid, &exp, &results)?,
        )?;
    }
    for r in &doc.experiments {
        println!(
            "seed {:>4} removed {:?}: L2 pretrained {:.6} finetuned {:.6} scratch {:.6}",
            r.perturb_seed,
            r.removed_edges,
            r.pretrained.normalized_l2,
            r.finetuned.normalized_l2,
            r.scratch.normalized_l2
        );
    }
    let m = doc.medians;
    println!(
        "median L2: pretrained {:.6} finetuned {:.6} scratch {:.6}",
        m.pretrained_l2, m.finetuned_l2, m.scratch_l2
    );
    Ok(())
}

/// Per-sample test L2 of the adapted (pre-trained) model on each perturbed
/// grid. Fine-tuned and scratch models are not kept by the experiment, so
/// only the warm-start column is dumped.
fn transfer_samples(
    ctx: &Context,
    model: &lmplab_core::nn::Model,
    stats: &lmplab_core::dataset::NormalizationStats,
    grid: &lmplab_core::Grid,
    exp: &lmplab_core::transfer::ExperimentConfig,
    results: &[lmplab_core::transfer::TopologyExperiment],
) -> run::Result<String> {
    let mut out = String::from("perturb_seed\tsample\tpretrained_l2\n");
    for r in results {
        let new_grid = lmplab_core::grid::remove_lines(grid, &r.removed_edges)?;
        let net = Network::new(new_grid.clone())?;
        let d = &exp.data;
        let ds = lmplab_core::dataset::Sampler::sample(
            &ctx.pool,
            &net,
            &d.base_problem,
            &d.perturb,
            &d.schema,
            d.count,
            d.seed,
        )?;
        let (_, _, test) = lmplab_core::dataset::split(&ds, d.fractions, d.seed)?;
        let adapted = lmplab_core::transfer::adapt_model(model, &new_grid)?;
        let samples = parallel::evaluate_samples(
            &ctx.pool,
            &ScaledModel {
                model: &adapted,
                stats,
            },
            &net,
            &test,
        )?;
        for (i, s) in samples.iter().enumerate() {
            out.push_str(&format!(
                "{}\t{i}\t{}\n",
                r.perturb_seed,
                format::real(s.normalized_l2)
            ));
        }
    }
    Ok(out)
}

fn report(a: &ReportArgs) -> run::Result<()> {
    println!(
        "{:<40} {:>12} {:>12} {:>12} {:>12}",
        "file", "L2", "violation", "feasible", "baseline L2"
    );
    for path in &a.inputs {
        let text = run::read_file(path)?;
        let name = path.display().to_string();
        if let Ok(doc) = serde_json::from_str::<run::TrainMetricsDoc>(&text) {
            println!(
                "{name:<40} {:>12.6} {:>12.6} {:>12.6} {:>12.6}",
                doc.test.normalized_l2,
                doc.test.violation_rate,
                doc.test.feasibility_ratio,
                doc.baseline.normalized_l2
            );
        } else if let Ok(doc) = serde_json::from_str::<run::EvalDoc>(&text) {
            let m = &doc.metrics;
            println!(
                "{name:<40} {:>12.6} {:>12.6} {:>12.6} {:>12}",
                m.normalized_l2, m.violation_rate, m.feasibility_ratio, "-"
            );
        } else if let Ok(doc) = serde_json::from_str::<run::TransferDoc>(&text) {
            let m = doc.medians;
            for (label, l2, v) in [
                ("pretrained", m.pretrained_l2, m.pretrained_violation),
                ("finetuned", m.finetuned_l2, m.finetuned_violation),
                ("scratch", m.scratch_l2, m.scratch_violation),
            ] {
                let row = format!("{name} [{label}, median]");
                println!(
                    "{row:<40} {l2:>12.6} {v:>12.6} {:>12.6} {:>12}",
                    1.0 - v,
                    "-"
                );
            }
        } else {
            return Err(RunError::new(
                ExitKind::Config,
                format!("{name}: not a metrics or transfer report"),
            ));
        }
    }
    Ok(())
}

/// Pretty JSON with 17-digit reals.
fn json<T: serde::Serialize>(v: &T) -> run::Result<String> {
    format::to_json(v, true).map_err(|e| RunError::new(ExitKind::Io, format!("serialization: {e}")))
}
