//! The online adaptation loop and everything around it: configuration,
//! scenario generation, metrics, the lemma verifier and gradient checks.

mod config;
mod engine;
mod gradcheck;
mod metrics;
mod scenario;
mod verify;

pub use config::{Hyperparams, RunConfig, WorldConfig};
pub use engine::{CttaEngine, StepReport};
pub use gradcheck::{gradcheck, relative_error, GradcheckCase, GradcheckConfig, GradcheckReport};
pub use metrics::{
    drive, error_rate, run_ctta, visit_rounds, BatchMetrics, RunMetrics, RunOutcome, RunSummary,
    METRICS_HEADER,
};
pub use scenario::{compute_source_stats, Scenario, World, RECOMMENDED_SOURCE_SAMPLES};
pub use verify::{verify_lemmas, ClusterLedger, VerifyReport, Violation};

use crate::error::Result;
use crate::model::ToyModel;
use crate::objective::SourceStats;
use crate::stream::LabeledBatch;

/// One run per value of a single hyperparameter, named as in the config.
pub fn sweep(
    model: &ToyModel,
    stream: &[LabeledBatch],
    base: &Hyperparams,
    source: &SourceStats,
    seed: u64,
    param: &str,
    values: &[serde_json::Value],
) -> Result<Vec<(serde_json::Value, RunOutcome)>> {
    values
        .iter()
        .map(|v| {
            let hp = base.with_field(param, v)?;
            Ok((v.clone(), run_ctta(model, stream, &hp, source, seed)?))
        })
        .collect()
}
