use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{KffError, Result};
use crate::model::ToyModel;
use crate::numerics::argmax;
use crate::objective::SourceStats;
use crate::pools::PoolSnapshot;
use crate::stream::{format_value, DomainId, LabeledBatch};

use super::config::Hyperparams;
use super::engine::{CttaEngine, StepReport};

pub const METRICS_HEADER: &str = "batch_idx,domain_id_true,error_rate,mean_entropy,loss_d,loss_c,\
pool_d_size,pool_c_size,fissioned_d,fissioned_c,param_count";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchMetrics {
    pub batch_idx: usize,
    pub domain_id_true: DomainId,
    /// Which visit of this domain the batch belongs to, from 0.
    pub round: usize,
    pub error_rate: f64,
    pub mean_entropy: f64,
    pub loss_d: f64,
    pub loss_c: f64,
    pub pool_d_size: usize,
    pub pool_c_size: usize,
    pub fissioned_d: bool,
    pub fissioned_c: usize,
    pub fused_d: bool,
    pub compacted_c: bool,
    pub param_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub batches: Vec<BatchMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub batches: usize,
    pub overall_error: f64,
    pub per_domain_error: BTreeMap<DomainId, f64>,
    /// Mean error over the batches of each visit index.
    pub per_round_error: Vec<f64>,
    pub final_pool_d_size: usize,
    pub final_pool_c_size: usize,
    pub final_param_count: usize,
    pub domain_fissions: usize,
    pub class_fissions: usize,
    pub domain_fusions: usize,
    pub class_compactions: usize,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = xs
        .into_iter()
        .fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

impl RunMetrics {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for m in &self.batches {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                m.batch_idx,
                m.domain_id_true,
                format_value(m.error_rate),
                format_value(m.mean_entropy),
                format_value(m.loss_d),
                format_value(m.loss_c),
                m.pool_d_size,
                m.pool_c_size,
                u8::from(m.fissioned_d),
                m.fissioned_c,
                m.param_count
            )
            .expect("string write");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| KffError::io(path, e))
    }

    pub fn summary(&self) -> RunSummary {
        let mut per_domain: BTreeMap<DomainId, Vec<f64>> = BTreeMap::new();
        let mut per_round: Vec<Vec<f64>> = Vec::new();
        for m in &self.batches {
            per_domain
                .entry(m.domain_id_true)
                .or_default()
                .push(m.error_rate);
            if per_round.len() <= m.round {
                per_round.resize(m.round + 1, Vec::new());
            }
            per_round[m.round].push(m.error_rate);
        }
        let last = self.batches.last();
        RunSummary {
            batches: self.batches.len(),
            overall_error: mean(self.batches.iter().map(|m| m.error_rate)),
            per_domain_error: per_domain.into_iter().map(|(d, v)| (d, mean(v))).collect(),
            per_round_error: per_round.into_iter().map(mean).collect(),
            final_pool_d_size: last.map_or(0, |m| m.pool_d_size),
            final_pool_c_size: last.map_or(0, |m| m.pool_c_size),
            final_param_count: last.map_or(0, |m| m.param_count),
            domain_fissions: self.batches.iter().filter(|m| m.fissioned_d).count(),
            class_fissions: self.batches.iter().map(|m| m.fissioned_c).sum(),
            domain_fusions: self.batches.iter().filter(|m| m.fused_d).count(),
            class_compactions: self.batches.iter().filter(|m| m.compacted_c).count(),
        }
    }
}

impl RunSummary {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| KffError::io(path, e))
    }
}

pub fn error_rate(predictions: &[Vec<f64>], labels: &[usize]) -> f64 {
    let wrong = predictions
        .iter()
        .zip(labels)
        .filter(|(p, y)| argmax(p) != **y)
        .count();
    wrong as f64 / labels.len() as f64
}

/// Visit index of every batch: how many earlier, separate visits its domain
/// had. Consecutive batches of one domain form one visit.
pub fn visit_rounds(batches: &[LabeledBatch]) -> Vec<usize> {
    let mut visits: BTreeMap<DomainId, usize> = BTreeMap::new();
    let mut prev = None;
    batches
        .iter()
        .map(|b| {
            let count = visits.entry(b.domain_id).or_insert(0);
            if prev != Some(b.domain_id) {
                *count += 1;
            }
            prev = Some(b.domain_id);
            *count - 1
        })
        .collect()
}

fn batch_metrics(
    batch: &LabeledBatch,
    round: usize,
    report: &StepReport,
    engine: &CttaEngine,
) -> BatchMetrics {
    BatchMetrics {
        batch_idx: batch.index,
        domain_id_true: batch.domain_id,
        round,
        error_rate: error_rate(&report.predictions, &batch.labels),
        mean_entropy: report.mean_entropy(),
        loss_d: report.loss.domain,
        loss_c: report.loss.class,
        pool_d_size: engine.domain_pool().len(),
        pool_c_size: engine.class_pool().len(),
        fissioned_d: report.domain_fissioned,
        fissioned_c: report.class_fissions,
        fused_d: report.domain_update.fused.is_some(),
        compacted_c: report.class_update.compaction.is_some(),
        param_count: engine.param_count(),
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub metrics: RunMetrics,
    /// Pools after the last batch of every domain visit; the last one is the
    /// end-of-run state.
    pub snapshots: Vec<PoolSnapshot>,
    pub engine: CttaEngine,
}

/// Drives `engine` over `stream`, calling `observe` after every batch.
/// Labels are only read here, never by the engine.
pub fn drive<F>(
    mut engine: CttaEngine,
    stream: &[LabeledBatch],
    mut observe: F,
) -> Result<RunOutcome>
where
    F: FnMut(&LabeledBatch, &StepReport, &CttaEngine) -> Result<()>,
{
    if stream.is_empty() {
        return Err(KffError::Empty("stream"));
    }
    let rounds = visit_rounds(stream);
    let mut metrics = RunMetrics::default();
    let mut snapshots = Vec::new();
    for (k, batch) in stream.iter().enumerate() {
        let report = engine.step(&batch.samples)?;
        observe(batch, &report, &engine)?;
        metrics
            .batches
            .push(batch_metrics(batch, rounds[k], &report, &engine));
        let boundary = stream
            .get(k + 1)
            .is_none_or(|next| next.domain_id != batch.domain_id);
        if boundary {
            snapshots.push(engine.snapshot());
        }
    }
    Ok(RunOutcome {
        metrics,
        snapshots,
        engine,
    })
}

/// Full online run from empty pools.
pub fn run_ctta(
    model: &ToyModel,
    stream: &[LabeledBatch],
    hp: &Hyperparams,
    source: &SourceStats,
    seed: u64,
) -> Result<RunOutcome> {
    let engine = CttaEngine::new(model.clone(), source.clone(), hp.clone(), seed)?;
    drive(engine, stream, |_, _, _| Ok(()))
}
