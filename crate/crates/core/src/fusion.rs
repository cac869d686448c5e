//! Knowledge fusion: writing learned prompts back into the pools and keeping
//! the pools within capacity.
//!
//! Class pool: entropy-gated per-sample updates, then single-linkage (MST)
//! compaction when the pool overflows `N_c`. Domain pool: one update per
//! batch, then nearest-pair fusion when the pool overflows `N_d`.

use serde::{Deserialize, Serialize};

use crate::error::{KffError, Result};
use crate::numerics::{self, check_dim, cosine_sim, entropy, renormalize, BatchStats, Vector};
use crate::pools::{
    ClassPromptEntry, ClassPromptPool, DomainPromptEntry, DomainPromptPool, FissionOutcome,
};

/// How gate-passing samples are folded into the class pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassUpdateMode {
    /// One convex update per sample, in sample order.
    #[default]
    Sequential,
    /// Per entry, the mean of the per-sample convex updates over all
    /// gate-passing samples, computed from the pre-update pool.
    Averaged,
}

/// Everything fusion needs about one sample of the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassUpdateRecord {
    pub learned_prompt: Vector,
    pub prediction: Vector,
    pub pseudo_label: Vector,
    pub outcome: FissionOutcome,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainUpdateRecord {
    pub learned_prompt: Vector,
    pub batch_key: BatchStats,
    pub outcome: FissionOutcome,
}

/// Single-linkage grouping of a class pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MstClustering {
    /// Group id per pool index; ids are numbered by first appearance.
    pub assignment: Vec<usize>,
    pub num_groups: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassUpdateSummary {
    pub gated: usize,
    pub appended: usize,
    pub updated: usize,
    pub compaction: Option<MstClustering>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DomainUpdateSummary {
    pub appended: bool,
    pub updated: Vec<usize>,
    pub fused: Option<(usize, usize)>,
}

fn check_rate(name: &str, rate: f64) -> Result<()> {
    if (0.0..=1.0).contains(&rate) {
        Ok(())
    } else {
        Err(KffError::Domain(format!(
            "{name} must be in [0, 1], got {rate}"
        )))
    }
}

fn check_outcome(outcome: &FissionOutcome, version: u64, len: usize) -> Result<()> {
    if outcome.pool_version != version {
        return Err(KffError::StaleIndex {
            pool: version,
            outcome: outcome.pool_version,
        });
    }
    if let Some(w) = &outcome.weights {
        if let Some((i, _)) = w.iter().find(|(i, _)| *i >= len) {
            return Err(KffError::Domain(format!(
                "fission weight references index {i} of a pool of {len}"
            )));
        }
    }
    Ok(())
}

fn blend_into(target: &mut [f64], incoming: &[f64], rate: f64) {
    for (t, x) in target.iter_mut().zip(incoming) {
        *t = rate * x + (1.0 - rate) * *t;
    }
}

/// Folds the learned class prompts of one batch into the pool.
///
/// Samples whose prediction entropy exceeds `entropy_gate` are skipped. A
/// fissioned sample appends `(pseudo-label, learned prompt)`; otherwise each
/// candidate `i` with weight `w` moves its key towards the prediction by
/// `key_rate·w` and its prompt towards the learned prompt by `w`. Compaction
/// runs if the pool ends above capacity.
pub fn update_class_pool(
    pool: &mut ClassPromptPool,
    records: &[ClassUpdateRecord],
    entropy_gate: f64,
    key_rate: f64,
    mode: ClassUpdateMode,
    now: u64,
) -> Result<ClassUpdateSummary> {
    if !(entropy_gate >= 0.0) {
        return Err(KffError::Domain(format!(
            "entropy gate must be >= 0, got {entropy_gate}"
        )));
    }
    check_rate("class key rate", key_rate)?;
    let original_len = pool.len();
    for r in records {
        check_outcome(&r.outcome, pool.version, original_len)?;
        check_dim(pool.prompt_dim, r.learned_prompt.len())?;
        numerics::check_finite(&r.learned_prompt, "learned class prompt")?;
    }

    let mut summary = ClassUpdateSummary::default();
    let mut passing = Vec::with_capacity(records.len());
    for r in records {
        if entropy(&r.prediction)? > entropy_gate {
            summary.gated += 1;
        } else {
            passing.push(r);
        }
    }

    match mode {
        ClassUpdateMode::Sequential => {
            for r in &passing {
                match &r.outcome.weights {
                    None => {
                        pool.entries.push(ClassPromptEntry {
                            key: r.pseudo_label.clone(),
                            prompt: r.learned_prompt.clone(),
                            created_at: now,
                        });
                        summary.appended += 1;
                    }
                    Some(weights) => {
                        for &(i, w) in weights {
                            let entry = &mut pool.entries[i];
                            blend_into(&mut entry.key, &r.prediction, key_rate * w);
                            renormalize(&mut entry.key);
                            blend_into(&mut entry.prompt, &r.learned_prompt, w);
                            summary.updated += 1;
                        }
                    }
                }
            }
        }
        ClassUpdateMode::Averaged => {
            let count = passing.len() as f64;
            for i in 0..original_len {
                let touching: Vec<(&ClassUpdateRecord, f64)> = passing
                    .iter()
                    .map(|r| (*r, r.outcome.weight_of(i)))
                    .filter(|(_, w)| *w > 0.0)
                    .collect();
                if touching.is_empty() {
                    continue;
                }
                let old = pool.entries[i].clone();
                let mut key = vec![0.0; old.key.len()];
                let mut prompt = vec![0.0; old.prompt.len()];
                // samples that did not select i contribute the old value
                let idle = count - touching.len() as f64;
                for (k, o) in key.iter_mut().zip(&old.key) {
                    *k = idle * o;
                }
                for (p, o) in prompt.iter_mut().zip(&old.prompt) {
                    *p = idle * o;
                }
                for (r, w) in touching {
                    let kr = key_rate * w;
                    for ((k, o), y) in key.iter_mut().zip(&old.key).zip(&r.prediction) {
                        *k += kr * y + (1.0 - kr) * o;
                    }
                    for ((p, o), x) in prompt.iter_mut().zip(&old.prompt).zip(&r.learned_prompt) {
                        *p += w * x + (1.0 - w) * o;
                    }
                }
                key.iter_mut().for_each(|k| *k /= count);
                prompt.iter_mut().for_each(|p| *p /= count);
                renormalize(&mut key);
                let entry = &mut pool.entries[i];
                entry.key = key;
                entry.prompt = prompt;
                summary.updated += 1;
            }
            for r in passing.iter().filter(|r| r.outcome.fissioned()) {
                pool.entries.push(ClassPromptEntry {
                    key: r.pseudo_label.clone(),
                    prompt: r.learned_prompt.clone(),
                    created_at: now,
                });
                summary.appended += 1;
            }
        }
    }

    if summary.appended + summary.updated > 0 {
        pool.touch();
    }
    if pool.len() > pool.capacity {
        summary.compaction = Some(mst_compact(pool)?);
    }
    Ok(summary)
}

/// Edge length between two class keys: `1 − cos`.
fn key_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(1.0 - cosine_sim(a, b)?)
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        // keep the smaller index as root so group order is stable
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.parent[hi] = lo;
        true
    }
}

/// Kruskal on the complete graph of keys, stopped at `groups` components.
/// Equivalent to building the full MST and cutting its `groups − 1`
/// heaviest edges. Edge ties are broken by `(i, j)` index order.
pub fn single_linkage(keys: &[Vector], groups: usize) -> Result<MstClustering> {
    let n = keys.len();
    if groups == 0 {
        return Err(KffError::Domain("cannot cluster into zero groups".into()));
    }
    let mut edges = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            edges.push((key_distance(&keys[i], &keys[j])?, i, j));
        }
    }
    edges.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut sets = DisjointSet::new(n);
    let mut components = n;
    for (_, i, j) in edges {
        if components <= groups {
            break;
        }
        if sets.union(i, j) {
            components -= 1;
        }
    }

    let mut ids = vec![usize::MAX; n];
    let mut assignment = vec![0; n];
    let mut next = 0;
    for (i, slot) in assignment.iter_mut().enumerate() {
        let root = sets.find(i);
        if ids[root] == usize::MAX {
            ids[root] = next;
            next += 1;
        }
        *slot = ids[root];
    }
    Ok(MstClustering {
        assignment,
        num_groups: next,
    })
}

/// Shrinks an over-capacity class pool to exactly `N_c` entries by merging
/// each single-linkage group into its unweighted mean (keys renormalised).
pub fn mst_compact(pool: &mut ClassPromptPool) -> Result<MstClustering> {
    if pool.len() <= pool.capacity {
        return Err(KffError::Domain(format!(
            "mst_compact needs an over-capacity pool ({} <= {})",
            pool.len(),
            pool.capacity
        )));
    }
    let keys: Vec<Vector> = pool.entries.iter().map(|e| e.key.clone()).collect();
    let clustering = single_linkage(&keys, pool.capacity)?;

    let mut merged = Vec::with_capacity(clustering.num_groups);
    for g in 0..clustering.num_groups {
        let members: Vec<&ClassPromptEntry> = pool
            .entries
            .iter()
            .zip(&clustering.assignment)
            .filter(|(_, a)| **a == g)
            .map(|(e, _)| e)
            .collect();
        if let [only] = members.as_slice() {
            merged.push((*only).clone());
            continue;
        }
        let mut key = numerics::mean_of(members.iter().map(|e| e.key.as_slice()));
        renormalize(&mut key);
        merged.push(ClassPromptEntry {
            key,
            prompt: numerics::mean_of(members.iter().map(|e| e.prompt.as_slice())),
            created_at: members.iter().map(|e| e.created_at).min().unwrap_or(0),
        });
    }
    pool.entries = merged;
    pool.touch();
    Ok(clustering)
}

/// Folds one batch's learned domain prompt into the pool.
pub fn update_domain_pool(
    pool: &mut DomainPromptPool,
    record: &DomainUpdateRecord,
    key_rate: f64,
    now: u64,
) -> Result<DomainUpdateSummary> {
    check_rate("domain key rate", key_rate)?;
    check_outcome(&record.outcome, pool.version, pool.len())?;
    check_dim(pool.prompt_dim, record.learned_prompt.len())?;
    numerics::check_finite(&record.learned_prompt, "learned domain prompt")?;
    if let Some(first) = pool.entries.first() {
        check_dim(first.key.dim(), record.batch_key.dim())?;
    }

    let mut summary = DomainUpdateSummary::default();
    match &record.outcome.weights {
        None => {
            pool.entries.push(DomainPromptEntry {
                key: record.batch_key.clone(),
                prompt: record.learned_prompt.clone(),
                created_at: now,
            });
            pool.touch();
            summary.appended = true;
            if pool.len() > pool.capacity {
                summary.fused = Some(fuse_nearest_pair(pool)?);
            }
        }
        Some(weights) => {
            for &(i, w) in weights {
                let entry = &mut pool.entries[i];
                let kr = key_rate * w;
                blend_into(&mut entry.key.mean, &record.batch_key.mean, kr);
                blend_into(&mut entry.key.std, &record.batch_key.std, kr);
                blend_into(&mut entry.prompt, &record.learned_prompt, w);
                summary.updated.push(i);
            }
            if !summary.updated.is_empty() {
                pool.touch();
            }
        }
    }
    Ok(summary)
}

/// Index pair `(i, j)`, `i < j`, of the two closest domain keys; the first
/// such pair in lexicographic order on ties.
pub fn nearest_pair(entries: &[DomainPromptEntry]) -> Result<(usize, usize)> {
    if entries.len() < 2 {
        return Err(KffError::InsufficientData {
            needed: 2,
            got: entries.len(),
        });
    }
    let mut best = (0, 1);
    let mut best_d = f64::INFINITY;
    for i in 0..entries.len() {
        for j in i + 1..entries.len() {
            let d = entries[i].key.distance(&entries[j].key)?;
            if d < best_d {
                best_d = d;
                best = (i, j);
            }
        }
    }
    Ok(best)
}

/// Replaces the closest pair with its unweighted mean (stored at the lower
/// index); the pool shrinks by one.
pub fn fuse_nearest_pair(pool: &mut DomainPromptPool) -> Result<(usize, usize)> {
    let (i, j) = nearest_pair(&pool.entries)?;
    let b = pool.entries.remove(j);
    let a = &mut pool.entries[i];
    let avg =
        |x: &[f64], y: &[f64]| -> Vector { x.iter().zip(y).map(|(p, q)| 0.5 * (p + q)).collect() };
    a.key = BatchStats {
        mean: avg(&a.key.mean, &b.key.mean),
        std: avg(&a.key.std, &b.key.std),
    };
    a.prompt = avg(&a.prompt, &b.prompt);
    a.created_at = a.created_at.min(b.created_at);
    pool.touch();
    Ok((i, j))
}
