//! Thread-pool drivers for scenario sampling and evaluation. Work is split
//! per index and reassembled in index order, so results do not depend on
//! the number of threads.

use std::sync::Arc;

use lmplab_core::dataset::{
    check_sampling, sample_scenario, Dataset, FeatureSchema, Perturbation, Sampler,
};
use lmplab_core::dcopf::{DcOpfProblem, Network};
use lmplab_core::training::{
    aggregate, sample_metrics, MetricsReport, PricePredictor, SampleMetrics,
};
use lmplab_core::{Error, Result};
use rayon::prelude::*;

#[derive(Clone)]
pub struct Pool(Arc<rayon::ThreadPool>);

impl Pool {
    pub fn new(threads: usize) -> std::result::Result<Self, rayon::ThreadPoolBuildError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()?;
        Ok(Self(Arc::new(pool)))
    }

    pub fn threads(&self) -> usize {
        self.0.current_num_threads()
    }
}

impl std::fmt::Debug for Pool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Pool({})", self.threads())
    }
}

/// First error in index order, else all values.
fn in_order<T>(results: Vec<Result<T>>) -> Result<Vec<T>> {
    results.into_iter().collect()
}

impl Sampler for Pool {
    fn sample(
        &self,
        net: &Network,
        base: &DcOpfProblem,
        perturb: &Perturbation,
        schema: &FeatureSchema,
        count: usize,
        seed: u64,
    ) -> Result<Dataset> {
        check_sampling(net, base, perturb, count)?;
        let results: Vec<_> = self.0.install(|| {
            (0..count)
                .into_par_iter()
                .map(|i| sample_scenario(net, base, perturb, schema, seed, i))
                .collect()
        });
        Ok(Dataset {
            grid_hash: net.grid().hash(),
            schema: schema.clone(),
            scenarios: in_order(results)?,
        })
    }
}

/// Per-sample metrics on the pool, in dataset order.
pub fn evaluate_samples<P: PricePredictor + Sync + ?Sized>(
    pool: &Pool,
    predictor: &P,
    net: &Network,
    ds: &Dataset,
) -> Result<Vec<SampleMetrics>> {
    if ds.grid_hash != net.grid().hash() {
        return Err(Error::SchemaMismatch(
            "dataset was generated on a different grid".into(),
        ));
    }
    let limits = net.grid().flow_limits();
    let results: Vec<Result<SampleMetrics>> = pool.0.install(|| {
        ds.scenarios
            .par_iter()
            .map(|s| {
                let prob = ds.schema.problem(&s.features)?;
                let pi_hat = predictor.predict_prices(&s.features)?;
                Ok(sample_metrics(&pi_hat, &s.pi, &prob, net.isf(), &limits))
            })
            .collect()
    });
    in_order(results)
}

pub fn evaluate<P: PricePredictor + Sync + ?Sized>(
    pool: &Pool,
    predictor: &P,
    net: &Network,
    ds: &Dataset,
) -> Result<MetricsReport> {
    Ok(aggregate(evaluate_samples(pool, predictor, net, ds)?))
}
