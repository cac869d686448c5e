use crate::error::{KffError, Result};
use crate::fusion::{
    update_class_pool, update_domain_pool, ClassUpdateRecord, ClassUpdateSummary,
    DomainUpdateRecord, DomainUpdateSummary,
};
use crate::model::ToyModel;
use crate::numerics::{self, entropy, BatchStats, SeededRng, Vector};
use crate::objective::{self, LossBreakdown, SourceStats};
use crate::pools::{self, ClassPromptPool, DomainPromptPool, PoolSnapshot};

use super::config::Hyperparams;

/// What one call to [`CttaEngine::step`] did.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// Class probabilities under the learned prompts: the batch's answer.
    pub predictions: Vec<Vector>,
    pub loss: LossBreakdown,
    pub batch_key: BatchStats,
    /// Domain-pool indices (pre-update) that received composition weight.
    pub domain_matches: Vec<usize>,
    pub domain_fissioned: bool,
    pub class_fissions: usize,
    pub class_update: ClassUpdateSummary,
    pub domain_update: DomainUpdateSummary,
}

impl StepReport {
    pub fn mean_entropy(&self) -> f64 {
        let total: f64 = self
            .predictions
            .iter()
            .map(|p| entropy(p).expect("softmax output is nonnegative"))
            .sum();
        total / self.predictions.len() as f64
    }
}

/// Online adaptation state. Sees only unlabelled batches.
#[derive(Debug, Clone)]
pub struct CttaEngine {
    model: ToyModel,
    source: SourceStats,
    hp: Hyperparams,
    class_pool: ClassPromptPool,
    domain_pool: DomainPromptPool,
    rng: SeededRng,
    batches_seen: u64,
}

impl CttaEngine {
    pub fn new(model: ToyModel, source: SourceStats, hp: Hyperparams, seed: u64) -> Result<Self> {
        let class_pool = ClassPromptPool::new(hp.class_capacity, model.input_dim())?;
        let domain_pool = DomainPromptPool::new(hp.domain_capacity, model.input_dim())?;
        Self::with_pools(model, source, hp, class_pool, domain_pool, seed)
    }

    /// Starts from existing pools, e.g. a snapshot.
    pub fn with_pools(
        model: ToyModel,
        source: SourceStats,
        hp: Hyperparams,
        class_pool: ClassPromptPool,
        domain_pool: DomainPromptPool,
        seed: u64,
    ) -> Result<Self> {
        hp.validate()?;
        numerics::check_dim(model.feature_dim(), source.mean.len())?;
        numerics::check_dim(model.feature_dim(), source.std.len())?;
        numerics::check_dim(model.input_dim(), class_pool.prompt_dim())?;
        numerics::check_dim(model.input_dim(), domain_pool.prompt_dim())?;
        if class_pool.len() > hp.class_capacity || domain_pool.len() > hp.domain_capacity {
            return Err(KffError::Config(
                "initial pools exceed configured capacity".into(),
            ));
        }
        Ok(CttaEngine {
            model,
            source,
            hp,
            class_pool,
            domain_pool,
            rng: SeededRng::new(seed),
            batches_seen: 0,
        })
    }

    pub fn model(&self) -> &ToyModel {
        &self.model
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hp
    }

    pub fn class_pool(&self) -> &ClassPromptPool {
        &self.class_pool
    }

    pub fn domain_pool(&self) -> &DomainPromptPool {
        &self.domain_pool
    }

    pub fn batches_seen(&self) -> u64 {
        self.batches_seen
    }

    /// Learnable prompt parameters currently held by both pools.
    pub fn param_count(&self) -> usize {
        (self.domain_pool.len() + self.class_pool.len()) * self.model.input_dim()
    }

    pub fn snapshot(&self) -> PoolSnapshot {
        PoolSnapshot {
            batch_idx: self.batches_seen.checked_sub(1).map(|b| b as usize),
            domain_pool: self.domain_pool.clone(),
            class_pool: self.class_pool.clone(),
        }
    }

    /// Adapts to one batch and returns its predictions. The predictions are
    /// computed before either pool is written.
    pub fn step(&mut self, batch: &[Vector]) -> Result<StepReport> {
        let now = self.batches_seen;
        let pseudo = self.model.pseudo_labels(batch)?;
        let class_outcomes = pools::fission_class_batch(
            &self.class_pool,
            &pseudo,
            &self.hp.class_match(),
            &mut self.rng,
        )?;
        let key = self.model.key_stats(batch)?;
        let domain_outcome = pools::fission_domain(
            &self.domain_pool,
            &key,
            &self.hp.domain_match(),
            &mut self.rng,
        )?;

        let composed_class: Vec<Vector> = class_outcomes
            .iter()
            .map(|o| o.composed_prompt.clone())
            .collect();
        let learned = objective::optimize_prompts(
            &self.model,
            batch,
            &domain_outcome.composed_prompt,
            &composed_class,
            &self.source,
            &self.hp.optimize(),
        )?;
        let predictions = self
            .model
            .forward(batch, &learned.domain, &learned.class)?
            .probs;

        let records: Vec<ClassUpdateRecord> = class_outcomes
            .into_iter()
            .zip(learned.class)
            .zip(predictions.iter().zip(pseudo))
            .map(
                |((outcome, learned_prompt), (pred, pseudo_label))| ClassUpdateRecord {
                    learned_prompt,
                    prediction: pred.clone(),
                    pseudo_label,
                    outcome,
                },
            )
            .collect();
        let class_fissions = records.iter().filter(|r| r.outcome.fissioned()).count();
        let class_update = update_class_pool(
            &mut self.class_pool,
            &records,
            self.hp.gamma_h,
            self.hp.alpha_c,
            self.hp.class_update,
            now,
        )?;

        let domain_matches = domain_outcome
            .weights
            .as_ref()
            .map(|w| w.iter().map(|(i, _)| *i).collect())
            .unwrap_or_default();
        let domain_fissioned = domain_outcome.fissioned();
        let domain_update = update_domain_pool(
            &mut self.domain_pool,
            &DomainUpdateRecord {
                learned_prompt: learned.domain,
                batch_key: key.clone(),
                outcome: domain_outcome,
            },
            self.hp.alpha_d,
            now,
        )?;
        self.batches_seen += 1;

        Ok(StepReport {
            predictions,
            loss: learned.loss,
            batch_key: key,
            domain_matches,
            domain_fissioned,
            class_fissions,
            class_update,
            domain_update,
        })
    }
}
