//! Pipeline steps shared by the CLI and the acceptance tests, plus the
//! report documents they write.

use std::fmt;
use std::path::Path;
use std::time::Instant;

use lmplab_core::dataset::{
    calibrated_base_problem, normalize, split, Dataset, FeatureSchema, NormalizationStats,
};
use lmplab_core::dcopf::{DcOpfProblem, Network};
use lmplab_core::grid::{generate_synthetic_grid, Grid};
use lmplab_core::nn::{count_parameters, Architecture, Model};
use lmplab_core::training::{
    train, ConstantPredictor, History, MetricsReport, ScaledModel, TrainConfig,
};
use lmplab_core::transfer::{
    median, run_transfer_experiment, DataConfig, ExperimentConfig, TopologyExperiment,
};
use lmplab_core::Error;
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, RunConfig};
use crate::format::{self, FormatError};
use crate::parallel::{self, Pool};

/// Process exit categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Io = 1,
    Config = 2,
    Data = 3,
    Training = 4,
    Integrity = 5,
    Transfer = 6,
}

#[derive(Debug)]
pub struct RunError {
    pub kind: ExitKind,
    pub message: String,
}

impl RunError {
    pub fn new(kind: ExitKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        self.kind as u8
    }
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for RunError {}

pub fn core_exit_kind(e: &Error) -> ExitKind {
    match e {
        Error::InvalidGrid(_)
        | Error::InvalidConfig(_)
        | Error::SingularLaplacian
        | Error::DimensionMismatch(_)
        | Error::InvalidProblem(_)
        | Error::InvalidFractions(_)
        | Error::InvalidBlocking(_) => ExitKind::Config,
        Error::Infeasible(_)
        | Error::NoConvergence { .. }
        | Error::TooLarge(_)
        | Error::TooManyInfeasible { .. } => ExitKind::Data,
        Error::NonFinite(_) => ExitKind::Training,
        Error::SchemaMismatch(_) => ExitKind::Integrity,
        Error::WouldDisconnect(_)
        | Error::NoValidPerturbation(_)
        | Error::IncompatibleTopology(_) => ExitKind::Transfer,
    }
}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        Self::new(core_exit_kind(&e), e.to_string())
    }
}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        Self::new(ExitKind::Config, e.to_string())
    }
}

/// Format errors count as `kind` unless they wrap a core error.
fn format_error(kind: ExitKind, path: &Path, e: FormatError) -> RunError {
    match e {
        FormatError::Core(c) => {
            RunError::new(core_exit_kind(&c), format!("{}: {c}", path.display()))
        }
        other => RunError::new(kind, format!("{}: {other}", path.display())),
    }
}

pub type Result<T> = std::result::Result<T, RunError>;

pub fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| {
        RunError::new(
            ExitKind::Config,
            format!("cannot read {}: {e}", path.display()),
        )
    })
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| {
            RunError::new(
                ExitKind::Io,
                format!("cannot create {}: {e}", dir.display()),
            )
        })?;
    }
    std::fs::write(path, contents).map_err(|e| {
        RunError::new(
            ExitKind::Io,
            format!("cannot write {}: {e}", path.display()),
        )
    })
}

pub fn load_grid(path: &Path) -> Result<Grid> {
    format::read_case(&read_file(path)?).map_err(|e| format_error(ExitKind::Config, path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    format::read_dataset(&read_file(path)?).map_err(|e| format_error(ExitKind::Data, path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<format::Checkpoint> {
    format::Checkpoint::parse(&read_file(path)?)
        .map_err(|e| format_error(ExitKind::Integrity, path, e))
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let text = format::write_dataset(ds).map_err(|e| format_error(ExitKind::Io, path, e))?;
    write_file(path, &text)
}

/// Grid from `grid.case_path` when set, otherwise generated from the
/// `grid` section.
pub fn build_grid(cfg: &RunConfig) -> Result<Grid> {
    if let Some(path) = &cfg.grid.case_path {
        return load_grid(path);
    }
    let g = &cfg.grid;
    Ok(generate_synthetic_grid(
        g.n,
        g.avg_degree,
        g.limit_scale,
        cfg.grid_seed()?,
    )?)
}

/// The calibrated synthetic base problem for `net` under the data section.
pub fn base_problem(net: &Network, cfg: &RunConfig) -> Result<DcOpfProblem> {
    Ok(calibrated_base_problem(
        net,
        cfg.data_seed()?,
        cfg.data.load_level,
    )?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    /// Over the full sample, before splitting.
    pub congested_fraction: f64,
}

pub fn generate_data(
    pool: &Pool,
    net: &Network,
    base: &DcOpfProblem,
    cfg: &RunConfig,
) -> Result<Splits> {
    let seed = cfg.data_seed()?;
    let ds = lmplab_core::dataset::Sampler::sample(
        pool,
        net,
        base,
        &cfg.data.perturbation(),
        &FeatureSchema::default(),
        cfg.data.count,
        seed,
    )?;
    let congested_fraction = ds.congested_fraction();
    let (train, val, test) = split(&ds, cfg.data.splits, seed)?;
    Ok(Splits {
        train,
        val,
        test,
        congested_fraction,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub stats: NormalizationStats,
    pub history: History,
    pub test: MetricsReport,
    pub baseline: MetricsReport,
    pub n_params: usize,
}

/// Fits normalization on the train split, trains a fresh model seeded by
/// `cfg.seed`, and scores it and the mean-label baseline on the test split.
pub fn train_model(
    pool: &Pool,
    net: &Network,
    data: &Splits,
    arch: Architecture,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let started = Instant::now();
    let (_, stats) = normalize(&data.train, None)?;
    let mut model = Model::new(arch, net.grid(), cfg.seed)?;
    let history = train(&mut model, net, &data.train, &data.val, &stats, cfg)?;
    let mut test = parallel::evaluate(
        pool,
        &ScaledModel {
            model: &model,
            stats: &stats,
        },
        net,
        &data.test,
    )?;
    test.epochs_run = history.epochs_run();
    test.wall_time = started.elapsed().as_secs_f64();
    let baseline = parallel::evaluate(
        pool,
        &ConstantPredictor::mean_label(&data.train),
        net,
        &data.test,
    )?;
    let n_params = count_parameters(model.architecture(), model.topology());
    Ok(TrainOutcome {
        model,
        stats,
        history,
        test,
        baseline,
        n_params,
    })
}

// ---------------------------------------------------------------- documents

/// JSON mirror of [`MetricsReport`]. Wall time is only present when the
/// caller asks for it, since it breaks byte-identical reruns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub normalized_l2: f64,
    pub violation_rate: f64,
    pub violation_clipped: bool,
    pub feasibility_ratio: f64,
    pub sample_feasible_fraction: f64,
    pub n_samples: usize,
    pub epochs_run: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time: Option<f64>,
}

impl MetricsRecord {
    pub fn new(m: &MetricsReport, with_time: bool) -> Self {
        Self {
            normalized_l2: m.normalized_l2,
            violation_rate: m.violation_rate,
            violation_clipped: m.violation_clipped,
            feasibility_ratio: m.feasibility_ratio,
            sample_feasible_fraction: m.sample_feasible_fraction,
            n_samples: m.n_samples,
            epochs_run: m.epochs_run,
            wall_time: with_time.then_some(m.wall_time),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetricsDoc {
    pub tool_version: String,
    pub config_digest: String,
    pub kind: String,
    pub fr: bool,
    pub lambda_reg: f64,
    pub n_params: usize,
    pub grid_hash: String,
    pub test_digest: String,
    pub best_epoch: usize,
    pub test: MetricsRecord,
    pub baseline: MetricsRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalDoc {
    pub tool_version: String,
    pub config_digest: String,
    pub kind: String,
    pub grid_hash: String,
    pub dataset_digest: String,
    pub metrics: MetricsRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub final_val_loss: Option<f64>,
}

impl From<&History> for HistoryRecord {
    fn from(h: &History) -> Self {
        Self {
            best_epoch: h.best_epoch,
            epochs_run: h.epochs_run(),
            final_val_loss: h.records.last().map(|r| r.val_loss),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub perturb_seed: u64,
    pub base_grid_hash: String,
    pub grid_hash: String,
    pub removed_edges: Vec<usize>,
    pub finetune_epochs: usize,
    pub test_digest: String,
    pub pretrained: MetricsRecord,
    pub finetuned: MetricsRecord,
    pub scratch: MetricsRecord,
    pub finetune_history: HistoryRecord,
    pub scratch_history: HistoryRecord,
}

impl From<&TopologyExperiment> for ExperimentRecord {
    fn from(e: &TopologyExperiment) -> Self {
        Self {
            perturb_seed: e.perturb_seed,
            base_grid_hash: e.base_grid_hash.clone(),
            grid_hash: e.grid_hash.clone(),
            removed_edges: e.removed_edges.clone(),
            finetune_epochs: e.finetune_epochs,
            test_digest: e.test_digest.clone(),
            pretrained: MetricsRecord::new(&e.pretrained_metrics, false),
            finetuned: MetricsRecord::new(&e.finetuned_metrics, false),
            scratch: MetricsRecord::new(&e.scratch_metrics, false),
            finetune_history: (&e.finetune_history).into(),
            scratch_history: (&e.scratch_history).into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferMedians {
    pub pretrained_l2: f64,
    pub finetuned_l2: f64,
    pub scratch_l2: f64,
    pub pretrained_violation: f64,
    pub finetuned_violation: f64,
    pub scratch_violation: f64,
}

impl TransferMedians {
    pub fn of(exps: &[TopologyExperiment]) -> Self {
        let m = |f: fn(&TopologyExperiment) -> f64| median(&exps.iter().map(f).collect::<Vec<_>>());
        Self {
            pretrained_l2: m(|e| e.pretrained_metrics.normalized_l2),
            finetuned_l2: m(|e| e.finetuned_metrics.normalized_l2),
            scratch_l2: m(|e| e.scratch_metrics.normalized_l2),
            pretrained_violation: m(|e| e.pretrained_metrics.violation_rate),
            finetuned_violation: m(|e| e.finetuned_metrics.violation_rate),
            scratch_violation: m(|e| e.scratch_metrics.violation_rate),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferDoc {
    pub tool_version: String,
    pub config_digest: String,
    pub experiments: Vec<ExperimentRecord>,
    pub medians: TransferMedians,
}

/// Experiment settings for transfer runs under `cfg`.
pub fn experiment_config(
    cfg: &RunConfig,
    base: DcOpfProblem,
    finetune_epochs: usize,
) -> Result<ExperimentConfig> {
    let train = cfg.train.train_config()?;
    Ok(ExperimentConfig {
        data: DataConfig {
            base_problem: base,
            perturb: cfg.data.perturbation(),
            schema: FeatureSchema::default(),
            count: cfg.data.count,
            fractions: cfg.data.splits,
            seed: cfg.data_seed()?,
        },
        max_lines: cfg.transfer.max_lines,
        finetune_epochs,
        model_seed: train.seed,
        train,
    })
}

/// One experiment per perturbation seed, in seed order.
pub fn run_transfer(
    pool: &Pool,
    model: &Model,
    stats: &NormalizationStats,
    base_grid: &Grid,
    seeds: &[u64],
    exp: &ExperimentConfig,
) -> Result<Vec<TopologyExperiment>> {
    if seeds.is_empty() {
        return Err(RunError::new(ExitKind::Config, "transfer.seeds is empty"));
    }
    seeds
        .iter()
        .map(|&s| {
            log::info!("transfer: perturbation seed {s}");
            run_transfer_experiment(model, stats, base_grid, s, exp, pool).map_err(RunError::from)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn core_errors_map_to_documented_exit_codes() {
        let cases = [
            (Error::InvalidConfig("x".into()), 2),
            (Error::TooManyInfeasible { index: 3 }, 3),
            (
                Error::NoConvergence {
                    iterations: 1,
                    residual: 1.0,
                },
                3,
            ),
            (Error::NonFinite("x".into()), 4),
            (Error::SchemaMismatch("x".into()), 5),
            (Error::NoValidPerturbation("x".into()), 6),
        ];
        for (e, code) in cases {
            assert_eq!(RunError::from(e).exit_code(), code);
        }
    }
}
