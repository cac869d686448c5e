use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::ToyModel;
use crate::objective::SourceStats;
use crate::stream::{certify, DomainId, LabeledBatch, SeparationCertificate};

use super::config::Hyperparams;
use super::engine::{CttaEngine, StepReport};
use super::metrics::drive;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    /// A domain-pool entry from another cluster received composition weight.
    MatchOutsideCluster {
        batch_idx: usize,
        domain: DomainId,
        entry: usize,
        entry_cluster: DomainId,
    },
    /// A batch from a cluster with no entry yet did not fission.
    MissedFission { batch_idx: usize, domain: DomainId },
    CrossClusterFusion {
        batch_idx: usize,
        kept: usize,
        removed: usize,
        clusters: (DomainId, DomainId),
    },
    PoolOverflow {
        batch_idx: usize,
        pool: String,
        size: usize,
        capacity: usize,
    },
    /// The ledger lost track of the pool; later checks are meaningless.
    LedgerDesync {
        batch_idx: usize,
        ledger: usize,
        pool: usize,
    },
}

/// Ground-truth cluster of every domain-pool entry, maintained alongside a
/// run by replaying the engine's reported pool mutations. The engine never
/// reads it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClusterLedger {
    pub entry_clusters: Vec<DomainId>,
    pub batch_domains: Vec<DomainId>,
    pub violations: Vec<Violation>,
}

impl ClusterLedger {
    pub fn observe(&mut self, batch: &LabeledBatch, report: &StepReport, engine: &CttaEngine) {
        let domain = batch.domain_id;
        let idx = batch.index;
        self.batch_domains.push(domain);

        for &entry in &report.domain_matches {
            let entry_cluster = self.entry_clusters[entry];
            if entry_cluster != domain {
                self.violations.push(Violation::MatchOutsideCluster {
                    batch_idx: idx,
                    domain,
                    entry,
                    entry_cluster,
                });
            }
        }
        if !self.entry_clusters.contains(&domain) && !report.domain_fissioned {
            self.violations.push(Violation::MissedFission {
                batch_idx: idx,
                domain,
            });
        }

        if report.domain_update.appended {
            self.entry_clusters.push(domain);
        }
        if let Some((kept, removed)) = report.domain_update.fused {
            let clusters = (self.entry_clusters[kept], self.entry_clusters[removed]);
            if clusters.0 != clusters.1 {
                self.violations.push(Violation::CrossClusterFusion {
                    batch_idx: idx,
                    kept,
                    removed,
                    clusters,
                });
            }
            self.entry_clusters.remove(removed);
        }

        let hp = engine.hyperparams();
        let pools = [
            ("domain", engine.domain_pool().len(), hp.domain_capacity),
            ("class", engine.class_pool().len(), hp.class_capacity),
        ];
        for (pool, size, capacity) in pools {
            if size > capacity {
                self.violations.push(Violation::PoolOverflow {
                    batch_idx: idx,
                    pool: pool.into(),
                    size,
                    capacity,
                });
            }
        }
        if self.entry_clusters.len() != engine.domain_pool().len() {
            self.violations.push(Violation::LedgerDesync {
                batch_idx: idx,
                ledger: self.entry_clusters.len(),
                pool: engine.domain_pool().len(),
            });
            self.entry_clusters = vec![DomainId::MAX; engine.domain_pool().len()];
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub passed: bool,
    /// Broken preconditions; when nonempty the lemma checks were not run.
    pub hypothesis_violations: Vec<String>,
    pub violations: Vec<Violation>,
    /// Separation measured on the stream itself at the certificate's θ.
    pub measured: SeparationCertificate,
    pub num_domains: usize,
    pub batches: usize,
    pub domain_fissions: usize,
    pub domain_fusions: usize,
    pub max_pool_d_size: usize,
    pub max_pool_c_size: usize,
    pub final_pool_d_size: usize,
}

/// Checks the preconditions of the assignment and fusion guarantees, then
/// runs the stream with a [`ClusterLedger`] attached.
pub fn verify_lemmas(
    stream: &[LabeledBatch],
    certificate: &SeparationCertificate,
    hp: &Hyperparams,
    model: &ToyModel,
    source: &SourceStats,
    seed: u64,
) -> Result<VerifyReport> {
    let theta = certificate.theta;
    let measured = certify(stream, model, theta, certificate.seed)?;
    let mut domains: Vec<DomainId> = stream.iter().map(|b| b.domain_id).collect();
    domains.sort_unstable();
    domains.dedup();
    let n = domains.len();

    let mut hypotheses = Vec::new();
    if !measured.is_valid() {
        hypotheses.push(format!(
            "stream is not separated at theta {theta}: max intra {}, min inter {}",
            measured.max_intra, measured.min_inter
        ));
    }
    if !(hp.gamma_d < theta) {
        hypotheses.push(format!("gamma_d {} is not below theta {theta}", hp.gamma_d));
    }
    if hp.domain_capacity <= n {
        hypotheses.push(format!(
            "domain capacity {} does not exceed the {n} domains",
            hp.domain_capacity
        ));
    }
    if hp.softmax_over_all {
        hypotheses.push("softmax_over_all weights entries outside the match set".into());
    }

    let mut report = VerifyReport {
        passed: false,
        hypothesis_violations: hypotheses,
        violations: Vec::new(),
        measured,
        num_domains: n,
        batches: stream.len(),
        domain_fissions: 0,
        domain_fusions: 0,
        max_pool_d_size: 0,
        max_pool_c_size: 0,
        final_pool_d_size: 0,
    };
    if !report.hypothesis_violations.is_empty() {
        return Ok(report);
    }

    let engine = CttaEngine::new(model.clone(), source.clone(), hp.clone(), seed)?;
    let mut ledger = ClusterLedger::default();
    let outcome = drive(engine, stream, |b, r, e| {
        ledger.observe(b, r, e);
        Ok(())
    })?;
    let m = &outcome.metrics.batches;
    report.domain_fissions = m.iter().filter(|b| b.fissioned_d).count();
    report.domain_fusions = m.iter().filter(|b| b.fused_d).count();
    report.max_pool_d_size = m.iter().map(|b| b.pool_d_size).max().unwrap_or(0);
    report.max_pool_c_size = m.iter().map(|b| b.pool_c_size).max().unwrap_or(0);
    report.final_pool_d_size = outcome.engine.domain_pool().len();
    report.violations = ledger.violations;
    report.passed = report.violations.is_empty();
    Ok(report)
}
