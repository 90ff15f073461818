//! Line-outage experiments: reuse a trained GNN on a grid with one or two
//! lines removed, before and after a short warm-started fine-tune.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::Rng as _;

use crate::dataset::{normalize, split, FeatureSchema, NormalizationStats, Perturbation, Sampler};
use crate::dcopf::{DcOpfProblem, Network};
use crate::grid::{remove_lines, Grid};
use crate::nn::{Model, ModelKind};
use crate::training::{evaluate, train, History, MetricsReport, ScaledModel, TrainConfig};
use crate::{rng, Error, Result};

pub const MAX_PERTURB_TRIES: usize = 100;

/// Removes between 1 and `max_lines` distinct lines chosen uniformly, keeping
/// the grid connected. Returns the new grid and the removed indices (sorted,
/// base-grid numbering).
pub fn perturb_topology(grid: &Grid, max_lines: usize, seed: u64) -> Result<(Grid, Vec<usize>)> {
    if !(1..=2).contains(&max_lines) {
        return Err(Error::InvalidConfig(format!(
            "max_lines must be 1 or 2, got {max_lines}"
        )));
    }
    let m = grid.n_edges();
    let mut rng = rng::seeded(seed);
    for _ in 0..MAX_PERTURB_TRIES {
        let k = rng.random_range(1..=max_lines.min(m));
        let mut removed = sample(&mut rng, m, k).into_vec();
        removed.sort_unstable();
        match remove_lines(grid, &removed) {
            Ok(g) => return Ok((g, removed)),
            Err(Error::WouldDisconnect(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::NoValidPerturbation(format!(
        "no connected removal of up to {max_lines} of {m} lines found in {MAX_PERTURB_TRIES} tries"
    )))
}

/// Moves a GNN onto `new_grid`, which must be its base grid minus some lines.
/// Filter entries of the removed lines are dropped; all other parameters are
/// copied unchanged.
pub fn adapt_model(model: &Model, new_grid: &Grid) -> Result<Model> {
    if model.kind() != ModelKind::Gnn {
        return Err(Error::IncompatibleTopology(format!(
            "{} models are tied to one topology",
            model.kind().name()
        )));
    }
    model.restrict_to(new_grid)
}

/// How the perturbed-grid dataset is generated.
#[derive(Debug, Clone)]
pub struct DataConfig {
    pub base_problem: DcOpfProblem,
    pub perturb: Perturbation,
    pub schema: FeatureSchema,
    pub count: usize,
    pub fractions: [f64; 3],
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    pub max_lines: usize,
    pub finetune_epochs: usize,
    /// Initialization seed of the from-scratch reference.
    pub model_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopologyExperiment {
    pub perturb_seed: u64,
    pub base_grid_hash: String,
    pub grid_hash: String,
    pub removed_edges: Vec<usize>,
    pub finetune_epochs: usize,
    /// Digest of the shared perturbed-grid test split.
    pub test_digest: String,
    pub pretrained_metrics: MetricsReport,
    pub finetuned_metrics: MetricsReport,
    pub scratch_metrics: MetricsReport,
    pub finetune_history: History,
    pub scratch_history: History,
}

/// Samples a removal set from `perturb_seed` and runs
/// [`run_with_removal`].
pub fn run_transfer_experiment<S: Sampler + ?Sized>(
    model: &Model,
    stats: &NormalizationStats,
    base_grid: &Grid,
    perturb_seed: u64,
    cfg: &ExperimentConfig,
    sampler: &S,
) -> Result<TopologyExperiment> {
    let (_, removed) = perturb_topology(base_grid, cfg.max_lines, perturb_seed)?;
    let mut exp = run_with_removal(model, stats, base_grid, &removed, cfg, sampler)?;
    exp.perturb_seed = perturb_seed;
    Ok(exp)
}

/// The experiment for an explicit removal set (possibly empty): relabel data
/// on the new grid, evaluate the adapted model as is, fine-tune it for
/// `finetune_epochs` without early stopping, and train a fresh model of the
/// same architecture as reference. All three are scored on one test split.
pub fn run_with_removal<S: Sampler + ?Sized>(
    model: &Model,
    stats: &NormalizationStats,
    base_grid: &Grid,
    removed: &[usize],
    cfg: &ExperimentConfig,
    sampler: &S,
) -> Result<TopologyExperiment> {
    if !(1..=10).contains(&cfg.finetune_epochs) {
        return Err(Error::InvalidConfig(format!(
            "finetune_epochs must lie in [1, 10], got {}",
            cfg.finetune_epochs
        )));
    }
    if model.grid_hash() != base_grid.hash() {
        return Err(Error::IncompatibleTopology(
            "model was not trained on the base grid".into(),
        ));
    }
    let grid = remove_lines(base_grid, removed)?;
    let net = Network::new(grid.clone())?;
    let d = &cfg.data;
    let ds = sampler.sample(
        &net,
        &d.base_problem,
        &d.perturb,
        &d.schema,
        d.count,
        d.seed,
    )?;
    let (train_ds, val_ds, test_ds) = split(&ds, d.fractions, d.seed)?;

    let adapted = adapt_model(model, &grid)?;
    let pretrained_metrics = evaluate(
        &ScaledModel {
            model: &adapted,
            stats,
        },
        &net,
        &test_ds,
    )?;

    let mut tuned = adapted;
    let ft_cfg = TrainConfig {
        max_epochs: cfg.finetune_epochs,
        early_stopping: false,
        ..cfg.train.clone()
    };
    let finetune_history = train(&mut tuned, &net, &train_ds, &val_ds, stats, &ft_cfg)?;
    let mut finetuned_metrics = evaluate(
        &ScaledModel {
            model: &tuned,
            stats,
        },
        &net,
        &test_ds,
    )?;
    finetuned_metrics.epochs_run = finetune_history.epochs_run();

    let (_, scratch_stats) = normalize(&train_ds, None)?;
    let mut scratch = Model::new(model.architecture().clone(), &grid, cfg.model_seed)?;
    let scratch_history = train(
        &mut scratch,
        &net,
        &train_ds,
        &val_ds,
        &scratch_stats,
        &cfg.train,
    )?;
    let mut scratch_metrics = evaluate(
        &ScaledModel {
            model: &scratch,
            stats: &scratch_stats,
        },
        &net,
        &test_ds,
    )?;
    scratch_metrics.epochs_run = scratch_history.epochs_run();

    Ok(TopologyExperiment {
        perturb_seed: 0,
        base_grid_hash: base_grid.hash(),
        grid_hash: grid.hash(),
        removed_edges: removed.to_vec(),
        finetune_epochs: cfg.finetune_epochs,
        test_digest: test_ds.digest(),
        pretrained_metrics,
        finetuned_metrics,
        scratch_metrics,
        finetune_history,
        scratch_history,
    })
}

/// Median of a non-empty list (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_unstable_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
