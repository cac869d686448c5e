//! Class and domain prompt pools, and knowledge fission: thresholded key
//! matching, softmax-weighted prompt composition, and fresh-prompt creation
//! when nothing matches.
//!
//! Fission never mutates a pool. Writes happen in [`crate::fusion`], which
//! checks the `pool_version` carried by every [`FissionOutcome`].

use serde::{Deserialize, Serialize};

use crate::error::{KffError, Result};
use crate::numerics::{self, check_dim, cosine_sim, is_probability, BatchStats, SeededRng, Vector};

/// Tolerance on `Σ p = 1` when a vector must be a probability distribution.
pub const PROBABILITY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPromptEntry {
    pub key: Vector,
    pub prompt: Vector,
    pub created_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainPromptEntry {
    pub key: BatchStats,
    pub prompt: Vector,
    pub created_at: u64,
}

/// Pool of `(pseudo-label key, prompt)` pairs, capacity `N_c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPromptPool {
    pub(crate) entries: Vec<ClassPromptEntry>,
    pub(crate) capacity: usize,
    pub(crate) prompt_dim: usize,
    pub(crate) version: u64,
}

/// Pool of `(batch-statistics key, prompt)` pairs, capacity `N_d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainPromptPool {
    pub(crate) entries: Vec<DomainPromptEntry>,
    pub(crate) capacity: usize,
    pub(crate) prompt_dim: usize,
    pub(crate) version: u64,
}

macro_rules! pool_common {
    ($pool:ident, $entry:ident) => {
        impl $pool {
            pub fn new(capacity: usize, prompt_dim: usize) -> Result<Self> {
                if capacity == 0 {
                    return Err(KffError::Domain("pool capacity must be positive".into()));
                }
                if prompt_dim == 0 {
                    return Err(KffError::Empty("prompt dimension"));
                }
                Ok($pool {
                    entries: Vec::new(),
                    capacity,
                    prompt_dim,
                    version: 0,
                })
            }

            pub fn entries(&self) -> &[$entry] {
                &self.entries
            }

            pub fn len(&self) -> usize {
                self.entries.len()
            }

            pub fn is_empty(&self) -> bool {
                self.entries.is_empty()
            }

            pub fn capacity(&self) -> usize {
                self.capacity
            }

            pub fn prompt_dim(&self) -> usize {
                self.prompt_dim
            }

            /// Bumped by every mutation; fission outcomes record it.
            pub fn version(&self) -> u64 {
                self.version
            }

            pub(crate) fn touch(&mut self) {
                self.version += 1;
            }
        }
    };
}

pool_common!(ClassPromptPool, ClassPromptEntry);
pool_common!(DomainPromptPool, DomainPromptEntry);

impl ClassPromptPool {
    /// Appends an entry directly. Intended for seeding pools and tests; the
    /// online loop only grows pools through fusion.
    pub fn push(&mut self, key: Vector, prompt: Vector, created_at: u64) -> Result<()> {
        if !is_probability(&key, PROBABILITY_TOL) {
            return Err(KffError::Domain(
                "class key is not a probability vector".into(),
            ));
        }
        check_dim(self.prompt_dim, prompt.len())?;
        numerics::check_finite(&prompt, "class prompt")?;
        if let Some(first) = self.entries.first() {
            check_dim(first.key.len(), key.len())?;
        }
        self.entries.push(ClassPromptEntry {
            key,
            prompt,
            created_at,
        });
        self.touch();
        Ok(())
    }
}

impl DomainPromptPool {
    pub fn push(&mut self, key: BatchStats, prompt: Vector, created_at: u64) -> Result<()> {
        check_dim(self.prompt_dim, prompt.len())?;
        numerics::check_finite(&prompt, "domain prompt")?;
        numerics::check_finite(&key.concat(), "domain key")?;
        if key.std.iter().any(|s| *s < 0.0) {
            return Err(KffError::Domain("negative std in domain key".into()));
        }
        if let Some(first) = self.entries.first() {
            check_dim(first.key.dim(), key.dim())?;
        }
        self.entries.push(DomainPromptEntry {
            key,
            prompt,
            created_at,
        });
        self.touch();
        Ok(())
    }
}

/// Matching parameters for one pool.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchParams {
    /// Cosine-similarity floor (class pool) or distance ceiling (domain pool).
    pub threshold: f64,
    pub temperature: f64,
    /// Std of freshly fissioned prompts; `0` gives zero-initialised prompts.
    pub init_scale: f64,
    /// Normalise the softmax over every entry instead of only the candidates.
    pub softmax_over_all: bool,
}

/// Result of matching one query against a pool.
#[derive(Debug, Clone, PartialEq)]
pub struct FissionOutcome {
    pub composed_prompt: Vector,
    /// `(pool index, weight)` in index order; `None` when a new prompt was
    /// fissioned.
    pub weights: Option<Vec<(usize, f64)>>,
    pub pool_version: u64,
}

impl FissionOutcome {
    pub fn fissioned(&self) -> bool {
        self.weights.is_none()
    }

    /// Weight assigned to pool entry `index` (zero for non-candidates).
    pub fn weight_of(&self, index: usize) -> f64 {
        self.weights
            .as_ref()
            .and_then(|w| w.iter().find(|(i, _)| *i == index).map(|(_, w)| *w))
            .unwrap_or(0.0)
    }
}

fn check_params(params: &MatchParams) -> Result<()> {
    if !(params.temperature > 0.0) || !params.temperature.is_finite() {
        return Err(KffError::Domain(format!(
            "temperature must be > 0, got {}",
            params.temperature
        )));
    }
    if !(params.init_scale >= 0.0) || !params.init_scale.is_finite() {
        return Err(KffError::Domain(format!(
            "init_scale must be >= 0, got {}",
            params.init_scale
        )));
    }
    Ok(())
}

/// Shared tail of both fission kinds: `scores` are the softmax logits for the
/// entries in `candidates`, or for all entries when `softmax_over_all`.
#[allow(clippy::too_many_arguments)]
fn compose<'a>(
    scores: &[f64],
    candidates: &[usize],
    softmax_over_all: bool,
    prompts: impl Fn(usize) -> &'a [f64],
    prompt_dim: usize,
    init_scale: f64,
    pool_version: u64,
    rng: &mut SeededRng,
) -> Result<FissionOutcome> {
    if candidates.is_empty() {
        return Ok(FissionOutcome {
            composed_prompt: rng.gaussian_vec(prompt_dim, init_scale),
            weights: None,
            pool_version,
        });
    }
    let weighted: Vec<usize> = if softmax_over_all {
        (0..scores.len()).collect()
    } else {
        candidates.to_vec()
    };
    let logits: Vec<f64> = weighted.iter().map(|&i| scores[i]).collect();
    let w = numerics::softmax(&logits)?;
    let mut composed = vec![0.0; prompt_dim];
    for (&i, wi) in weighted.iter().zip(&w) {
        for (c, p) in composed.iter_mut().zip(prompts(i)) {
            *c += wi * p;
        }
    }
    Ok(FissionOutcome {
        composed_prompt: composed,
        weights: Some(weighted.into_iter().zip(w).collect()),
        pool_version,
    })
}

/// Matches one pseudo-label against the class pool. Candidates are entries
/// whose key has cosine similarity above `params.threshold`.
pub fn fission_class(
    pool: &ClassPromptPool,
    pseudo_label: &[f64],
    params: &MatchParams,
    rng: &mut SeededRng,
) -> Result<FissionOutcome> {
    check_params(params)?;
    if !is_probability(pseudo_label, PROBABILITY_TOL) {
        return Err(KffError::Domain(
            "pseudo-label is not a probability vector".into(),
        ));
    }
    let sims = pool
        .entries
        .iter()
        .map(|e| cosine_sim(pseudo_label, &e.key))
        .collect::<Result<Vec<_>>>()?;
    let candidates: Vec<usize> = (0..sims.len())
        .filter(|&i| sims[i] > params.threshold)
        .collect();
    let scores: Vec<f64> = sims.iter().map(|s| s / params.temperature).collect();
    compose(
        &scores,
        &candidates,
        params.softmax_over_all,
        |i| &pool.entries[i].prompt,
        pool.prompt_dim,
        params.init_scale,
        pool.version,
        rng,
    )
}

/// Per-sample class fission; outcome order follows sample order.
pub fn fission_class_batch(
    pool: &ClassPromptPool,
    pseudo_labels: &[Vector],
    params: &MatchParams,
    rng: &mut SeededRng,
) -> Result<Vec<FissionOutcome>> {
    pseudo_labels
        .iter()
        .map(|y| fission_class(pool, y, params, rng))
        .collect()
}

/// Matches a batch key against the domain pool. Candidates are entries whose
/// key lies strictly within `params.threshold` in concatenated `(μ, σ)` space.
pub fn fission_domain(
    pool: &DomainPromptPool,
    key: &BatchStats,
    params: &MatchParams,
    rng: &mut SeededRng,
) -> Result<FissionOutcome> {
    check_params(params)?;
    numerics::check_finite(&key.concat(), "batch key")?;
    let dists = pool
        .entries
        .iter()
        .map(|e| key.distance(&e.key))
        .collect::<Result<Vec<_>>>()?;
    let candidates: Vec<usize> = (0..dists.len())
        .filter(|&i| dists[i] < params.threshold)
        .collect();
    let scores: Vec<f64> = dists.iter().map(|d| -d / params.temperature).collect();
    compose(
        &scores,
        &candidates,
        params.softmax_over_all,
        |i| &pool.entries[i].prompt,
        pool.prompt_dim,
        params.init_scale,
        pool.version,
        rng,
    )
}

/// Both pools at one point of a run, as written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSnapshot {
    /// Last batch folded into the pools, `None` before any batch.
    pub batch_idx: Option<usize>,
    pub domain_pool: DomainPromptPool,
    pub class_pool: ClassPromptPool,
}

impl PoolSnapshot {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| KffError::io(path, e))
    }

    /// Reads a snapshot and re-checks every entry through the pool `push`
    /// validation.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| KffError::io(path, e))?;
        let raw: PoolSnapshot = serde_json::from_str(&text)?;
        let mut domain =
            DomainPromptPool::new(raw.domain_pool.capacity, raw.domain_pool.prompt_dim)?;
        for e in raw.domain_pool.entries {
            domain.push(e.key, e.prompt, e.created_at)?;
        }
        let mut class = ClassPromptPool::new(raw.class_pool.capacity, raw.class_pool.prompt_dim)?;
        for e in raw.class_pool.entries {
            class.push(e.key, e.prompt, e.created_at)?;
        }
        if domain.len() > domain.capacity || class.len() > class.capacity {
            return Err(KffError::Domain(
                "snapshot pool exceeds its capacity".into(),
            ));
        }
        domain.version = raw.domain_pool.version;
        class.version = raw.class_pool.version;
        Ok(PoolSnapshot {
            batch_idx: raw.batch_idx,
            domain_pool: domain,
            class_pool: class,
        })
    }
}
