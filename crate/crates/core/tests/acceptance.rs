//! Acceptance criteria 1-8. Every test prints one PASS/FAIL line.

use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use kff::fusion::{
    mst_compact, update_class_pool, update_domain_pool, ClassUpdateMode, ClassUpdateRecord,
    DomainUpdateRecord,
};
use kff::harness::{
    drive, error_rate, gradcheck, run_ctta, verify_lemmas, CttaEngine, GradcheckConfig,
    Hyperparams, Scenario, World, WorldConfig,
};
use kff::numerics::{self, softmax, BatchStats, SeededRng, Vector};
use kff::pools::{
    fission_class, fission_domain, ClassPromptEntry, ClassPromptPool, DomainPromptEntry,
    DomainPromptPool, MatchParams,
};
use kff::stream::{self, generate_stream, StreamConfig};

fn report(id: u32, name: &str, ok: bool, detail: String) {
    println!(
        "criterion {id} [{}] {name}: {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "criterion {id} ({name}) failed: {detail}");
}

/// Largest pool sizes seen after any batch, with the capacities in force.
#[derive(Debug, Clone, Copy, Default)]
struct Bounds {
    max_d: usize,
    max_c: usize,
    overflow: bool,
}

impl Bounds {
    fn record(&mut self, engine: &CttaEngine) {
        let hp = engine.hyperparams();
        let (d, c) = (engine.domain_pool().len(), engine.class_pool().len());
        self.max_d = self.max_d.max(d);
        self.max_c = self.max_c.max(c);
        self.overflow |= d > hp.domain_capacity || c > hp.class_capacity;
    }

    fn merge(&mut self, other: Bounds) {
        self.max_d = self.max_d.max(other.max_d);
        self.max_c = self.max_c.max(other.max_c);
        self.overflow |= other.overflow;
    }
}

// ---------------------------------------------------------------- 1

struct LemmaSuite {
    streams: usize,
    hypothesis_failures: usize,
    violations: usize,
    elapsed: Duration,
    bounds: Bounds,
}

fn lemma_suite() -> &'static LemmaSuite {
    static CELL: OnceLock<LemmaSuite> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let mut suite = LemmaSuite {
            streams: 0,
            hypothesis_failures: 0,
            violations: 0,
            elapsed: Duration::ZERO,
            bounds: Bounds::default(),
        };
        for seed in 0..200u64 {
            let n = 2 + (seed % 5) as u32;
            let cfg = StreamConfig {
                domain_order: (1..=n).collect(),
                batches_per_domain: 30,
                batch_size: 16,
                input_dim: 8,
                num_classes: 4,
                seed,
                separation: None,
            };
            let sc = Scenario::generate(&cfg, &WorldConfig::default()).expect("certified scenario");
            let hp = Hyperparams {
                gamma_d: sc.certificate.theta / 2.0,
                domain_capacity: n as usize + 3,
                ..Hyperparams::default()
            };
            let r = verify_lemmas(
                &sc.stream,
                &sc.certificate,
                &hp,
                &sc.model,
                &sc.source,
                seed,
            )
            .expect("verifier runs");
            suite.streams += 1;
            suite.hypothesis_failures += usize::from(!r.hypothesis_violations.is_empty());
            suite.violations += r.violations.len();
            suite.bounds.merge(Bounds {
                max_d: r.max_pool_d_size,
                max_c: r.max_pool_c_size,
                overflow: r.max_pool_d_size > hp.domain_capacity
                    || r.max_pool_c_size > hp.class_capacity,
            });
        }
        suite.elapsed = start.elapsed();
        suite
    })
}

#[test]
fn criterion_1_lemma_suite() {
    let s = lemma_suite();
    let ok = s.streams == 200
        && s.hypothesis_failures == 0
        && s.violations == 0
        && s.elapsed < Duration::from_secs(60);
    report(
        1,
        "assignment and fusion guarantees on 200 certified streams",
        ok,
        format!(
            "{} streams, {} hypothesis failures, {} violations, {:.1?}",
            s.streams, s.hypothesis_failures, s.violations, s.elapsed
        ),
    );
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_2_gradcheck() {
    let start = Instant::now();
    let r = gradcheck(&GradcheckConfig::default()).unwrap();
    let elapsed = start.elapsed();
    let ok = r.cases.len() == 50
        && r.max_rel_error < 1e-4
        && elapsed < Duration::from_secs(10)
        && r.cases
            .iter()
            .all(|c| (4..=16).contains(&c.batch_size) && (3..=8).contains(&c.input_dim));
    report(
        2,
        "analytic gradient vs central differences",
        ok,
        format!(
            "max rel error {:.3e} over {} configs ({} excluded), {:.1?}",
            r.max_rel_error,
            r.cases.len(),
            r.excluded,
            elapsed
        ),
    );
}

// ---------------------------------------------------------------- 3

fn random_probability(dim: usize, rng: &mut SeededRng, sharpness: f64) -> Vector {
    softmax(&rng.gaussian_vec(dim, sharpness)).unwrap()
}

fn ref_cos_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb)
}

/// Agglomerative single linkage by exhaustive search: repeatedly merge the
/// two clusters with the closest pair of members. Clusters come back ordered
/// by smallest member.
fn brute_single_linkage(keys: &[Vector], groups: usize) -> Vec<Vec<usize>> {
    let mut clusters: Vec<Vec<usize>> = (0..keys.len()).map(|i| vec![i]).collect();
    while clusters.len() > groups {
        let mut best = (f64::INFINITY, 0, 0);
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                for &i in &clusters[a] {
                    for &j in &clusters[b] {
                        let d = ref_cos_distance(&keys[i], &keys[j]);
                        if d < best.0 {
                            best = (d, a, b);
                        }
                    }
                }
            }
        }
        let merged = clusters.remove(best.2);
        clusters[best.1].extend(merged);
        clusters[best.1].sort_unstable();
    }
    clusters.sort_by_key(|c| c[0]);
    clusters
}

fn groups_of(assignment: &[usize], num_groups: usize) -> Vec<Vec<usize>> {
    let mut g = vec![Vec::new(); num_groups];
    for (i, a) in assignment.iter().enumerate() {
        g[*a].push(i);
    }
    g.sort_by_key(|c| c[0]);
    g
}

#[test]
fn criterion_3_mst_matches_brute_force() {
    let start = Instant::now();
    let mut rng = SeededRng::new(3);
    let mut mismatches = 0;
    for _ in 0..100 {
        let size = 2 + rng.index(11);
        let cap = 1 + rng.index(size - 1);
        let classes = 2 + rng.index(5);
        let mut pool = ClassPromptPool::new(cap, 2).unwrap();
        let mut keys = Vec::new();
        for t in 0..size {
            let k = random_probability(classes, &mut rng, 2.0);
            keys.push(k.clone());
            pool.push(k, rng.gaussian_vec(2, 1.0), t as u64).unwrap();
        }
        let clustering = mst_compact(&mut pool).unwrap();
        let expected = brute_single_linkage(&keys, cap);
        let got = groups_of(&clustering.assignment, clustering.num_groups);
        if got != expected || pool.len() != cap {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    report(
        3,
        "MST compaction equals brute-force single linkage",
        mismatches == 0 && elapsed < Duration::from_secs(10),
        format!("{mismatches} mismatches in 100 pools, {elapsed:.1?}"),
    );
}

// ---------------------------------------------------------------- 4

type EntryBits = (Vec<u64>, Vec<u64>, u64);

fn class_pool_bits(pool: &ClassPromptPool) -> (u64, Vec<EntryBits>) {
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    (
        pool.version(),
        pool.entries()
            .iter()
            .map(|e| (bits(&e.key), bits(&e.prompt), e.created_at))
            .collect(),
    )
}

fn gate_only_direct(rng: &mut SeededRng) -> bool {
    let mut pool = ClassPromptPool::new(6, 3).unwrap();
    for t in 0..4 {
        pool.push(random_probability(4, rng, 3.0), rng.gaussian_vec(3, 1.0), t)
            .unwrap();
    }
    let before = class_pool_bits(&pool);
    let params = MatchParams {
        threshold: 0.5,
        temperature: 1.0,
        init_scale: 0.01,
        softmax_over_all: false,
    };
    let records: Vec<ClassUpdateRecord> = (0..8)
        .map(|_| {
            let pseudo = random_probability(4, rng, 3.0);
            let outcome = fission_class(&pool, &pseudo, &params, rng).unwrap();
            // near-uniform predictions: entropy close to ln 4 ≈ 1.386
            ClassUpdateRecord {
                learned_prompt: rng.gaussian_vec(3, 1.0),
                prediction: random_probability(4, rng, 0.05),
                pseudo_label: pseudo,
                outcome,
            }
        })
        .collect();
    let mut ok = true;
    for mode in [ClassUpdateMode::Sequential, ClassUpdateMode::Averaged] {
        let mut p = pool.clone();
        let s = update_class_pool(&mut p, &records, 1.0, 0.1, mode, 99).unwrap();
        ok &= s.gated == records.len() && class_pool_bits(&p) == before;
    }
    ok
}

fn gate_only_engine() -> bool {
    let world = World::build(11, 8, 4, &WorldConfig::default()).unwrap();
    let mut rng = SeededRng::new(12);
    let mut class_pool = ClassPromptPool::new(100, 8).unwrap();
    for t in 0..5 {
        class_pool
            .push(
                random_probability(4, &mut rng, 3.0),
                rng.gaussian_vec(8, 0.1),
                t,
            )
            .unwrap();
    }
    let before = class_pool_bits(&class_pool);
    let hp = Hyperparams {
        gamma_h: 0.0,
        steps: 3,
        ..Hyperparams::default()
    };
    let domain_pool = DomainPromptPool::new(hp.domain_capacity, 8).unwrap();
    let mut engine = CttaEngine::with_pools(
        world.model.clone(),
        world.source.clone(),
        hp,
        class_pool,
        domain_pool,
        5,
    )
    .unwrap();
    let mut ok = true;
    for _ in 0..5 {
        let (x, _) = world.base.sample(16, &mut rng);
        let r = engine.step(&x).unwrap();
        ok &= r
            .predictions
            .iter()
            .all(|p| numerics::entropy(p).unwrap() > 0.0);
        ok &= r.class_update.gated == 16;
    }
    ok && class_pool_bits(engine.class_pool()) == before
}

#[test]
fn criterion_4_pool_bounds_and_gate() {
    let lemma = lemma_suite().bounds;
    let repeat = repeating_suite().bounds;
    let mut rng = SeededRng::new(4);
    let direct = (0..20).all(|_| gate_only_direct(&mut rng));
    let engine = gate_only_engine();
    let ok = !lemma.overflow && !repeat.overflow && direct && engine;
    report(
        4,
        "pool capacities respected and gated samples leave the class pool untouched",
        ok,
        format!(
            "max domain/class pool {}/{} (lemma runs), {}/{} (repeating runs); gate direct {direct}, engine {engine}",
            lemma.max_d, lemma.max_c, repeat.max_d, repeat.max_c
        ),
    );
}

// ---------------------------------------------------------------- 5

struct ShiftResult {
    ratio: f64,
    adapted_error: f64,
    source_error: f64,
}

/// One domain shifted by δ with ‖Aδ‖ = 5·‖σˢ‖ (the total std of source
/// features). The source error is the unadapted model on the unshifted
/// twin of every test sample.
fn shift_recovery(seed: u64) -> ShiftResult {
    let world = World::build(seed, 8, 4, &WorldConfig::default()).unwrap();
    let mut rng = SeededRng::new(seed + 1000);
    let dir = rng.gaussian_vec(8, 1.0);
    let gain = numerics::norm(&world.model.features(&dir).unwrap());
    let delta = numerics::scaled(&dir, 5.0 * numerics::norm(&world.source.std) / gain);
    let cfg = StreamConfig {
        domain_order: vec![1],
        batches_per_domain: 40,
        batch_size: 64,
        input_dim: 8,
        num_classes: 4,
        seed,
        separation: None,
    };
    let shifted = world.base.shifted(1, delta.clone());
    let twin = world.base.shifted(1, vec![0.0; 8]);
    let stream = generate_stream(&cfg, &[shifted], &mut rng.fork(1)).unwrap();
    let twins = generate_stream(&cfg, &[twin], &mut rng.fork(1)).unwrap();

    let hp = Hyperparams {
        steps: 50,
        ..Hyperparams::default()
    };
    let out = run_ctta(&world.model, &stream, &hp, &world.source, seed).unwrap();
    assert_eq!(out.engine.domain_pool().len(), 1);
    let prompt = &out.engine.domain_pool().entries()[0].prompt;
    let ratio = numerics::norm(&numerics::add(prompt, &delta)) / numerics::norm(&delta);
    let last = 30..40;
    let adapted_error = out.metrics.batches[last.clone()]
        .iter()
        .map(|m| m.error_rate)
        .sum::<f64>()
        / 10.0;
    let source_error = twins[last]
        .iter()
        .map(|b| error_rate(&world.model.pseudo_labels(&b.samples).unwrap(), &b.labels))
        .sum::<f64>()
        / 10.0;
    ShiftResult {
        ratio,
        adapted_error,
        source_error,
    }
}

#[test]
fn criterion_5_shift_recovery() {
    let start = Instant::now();
    let results: Vec<ShiftResult> = (0..10).map(shift_recovery).collect();
    let elapsed = start.elapsed();
    let worst_ratio = results.iter().map(|r| r.ratio).fold(0.0, f64::max);
    let worst_gap = results
        .iter()
        .map(|r| (r.adapted_error - r.source_error).abs())
        .fold(0.0, f64::max);
    let ok = worst_ratio <= 0.1 && worst_gap <= 0.02 && elapsed < Duration::from_secs(30);
    report(
        5,
        "additive shift recovered by the domain prompt",
        ok,
        format!(
            "10 seeds: worst ||P_d + delta||/||delta|| {worst_ratio:.4}, worst error gap {:.2} pp, {elapsed:.1?}",
            100.0 * worst_gap
        ),
    );
}

// ---------------------------------------------------------------- 6

struct RepeatingSuite {
    runs: usize,
    size_stable: usize,
    no_degradation: usize,
    detail: Vec<String>,
    bounds: Bounds,
    elapsed: Duration,
}

/// Three certified domains visited ten times. The match radius sits between
/// the largest same-domain key distance and θ: every revisit then lies
/// within reach of its domain's entry (keys stay in the convex hull of
/// their domain's batch keys) and never within reach of another domain's.
fn repeating_suite() -> &'static RepeatingSuite {
    static CELL: OnceLock<RepeatingSuite> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let mut suite = RepeatingSuite {
            runs: 0,
            size_stable: 0,
            no_degradation: 0,
            detail: Vec::new(),
            bounds: Bounds::default(),
            elapsed: Duration::ZERO,
        };
        for seed in 0..10u64 {
            let cfg = StreamConfig {
                seed,
                ..StreamConfig::default()
            };
            assert_eq!(cfg.domain_order.len(), 30);
            let sc = Scenario::generate(&cfg, &WorldConfig::default()).unwrap();
            let c = &sc.certificate;
            let hp = Hyperparams {
                gamma_d: 0.5 * (c.max_intra + c.theta),
                steps: 5,
                ..Hyperparams::default()
            };
            let engine = CttaEngine::new(sc.model.clone(), sc.source.clone(), hp, seed).unwrap();
            let mut bounds = Bounds::default();
            let out = drive(engine, &sc.stream, |_, _, e| {
                bounds.record(e);
                Ok(())
            })
            .unwrap();
            suite.bounds.merge(bounds);

            let round1_end = 3 * cfg.batches_per_domain - 1;
            let tail = &out.metrics.batches[round1_end..];
            let stable = tail.iter().all(|m| {
                m.pool_d_size == tail[0].pool_d_size && m.param_count == tail[0].param_count
            });
            let rounds = out.metrics.summary().per_round_error;
            let later = rounds[1..].iter().sum::<f64>() / (rounds.len() - 1) as f64;
            let fine = later <= rounds[0] + 0.005;
            suite.runs += 1;
            suite.size_stable += usize::from(stable);
            suite.no_degradation += usize::from(fine);
            suite.detail.push(format!("{:.3}->{:.3}", rounds[0], later));
        }
        suite.elapsed = start.elapsed();
        suite
    })
}

#[test]
fn criterion_6_repeating_domains() {
    let s = repeating_suite();
    let ok = s.runs == 10
        && s.size_stable == s.runs
        && s.no_degradation == s.runs
        && s.elapsed < Duration::from_secs(60);
    report(
        6,
        "stable pools and no degradation over 10 rounds",
        ok,
        format!(
            "{} runs, pool/params constant in {}, no degradation in {} (round 1 -> rounds 2-10: {}), {:.1?}",
            s.runs,
            s.size_stable,
            s.no_degradation,
            s.detail.join(" "),
            s.elapsed
        ),
    );
}

// ---------------------------------------------------------------- 7

/// Line-by-line reading of the class-pool update: gate, then append or blend
/// each candidate, then compact by single linkage if over capacity.
fn reference_class_update(
    entries: &[ClassPromptEntry],
    capacity: usize,
    records: &[ClassUpdateRecord],
    gamma_h: f64,
    alpha_c: f64,
    now: u64,
) -> Vec<ClassPromptEntry> {
    let mut pool: Vec<ClassPromptEntry> = entries.to_vec();
    for r in records {
        let mut h = 0.0;
        for &p in &r.prediction {
            if p > 0.0 {
                h -= p * p.ln();
            }
        }
        if h > gamma_h {
            continue;
        }
        match &r.outcome.weights {
            None => pool.push(ClassPromptEntry {
                key: r.pseudo_label.clone(),
                prompt: r.learned_prompt.clone(),
                created_at: now,
            }),
            Some(ws) => {
                for &(i, w) in ws {
                    let rate = alpha_c * w;
                    let e = &mut pool[i];
                    for c in 0..e.key.len() {
                        e.key[c] = rate * r.prediction[c] + (1.0 - rate) * e.key[c];
                    }
                    let mut sum = 0.0;
                    for c in 0..e.key.len() {
                        sum += e.key[c];
                    }
                    for c in 0..e.key.len() {
                        e.key[c] /= sum;
                    }
                    for c in 0..e.prompt.len() {
                        e.prompt[c] = w * r.learned_prompt[c] + (1.0 - w) * e.prompt[c];
                    }
                }
            }
        }
    }
    if pool.len() <= capacity {
        return pool;
    }
    let keys: Vec<Vector> = pool.iter().map(|e| e.key.clone()).collect();
    brute_single_linkage(&keys, capacity)
        .into_iter()
        .map(|members| {
            if members.len() == 1 {
                return pool[members[0]].clone();
            }
            let n = members.len() as f64;
            let mut key = vec![0.0; pool[0].key.len()];
            let mut prompt = vec![0.0; pool[0].prompt.len()];
            for &m in &members {
                for (k, x) in key.iter_mut().zip(&pool[m].key) {
                    *k += x;
                }
                for (p, x) in prompt.iter_mut().zip(&pool[m].prompt) {
                    *p += x;
                }
            }
            for v in key.iter_mut().chain(prompt.iter_mut()) {
                *v /= n;
            }
            let mut sum = 0.0;
            for v in &key {
                sum += v;
            }
            for v in key.iter_mut() {
                *v /= sum;
            }
            ClassPromptEntry {
                key,
                prompt,
                created_at: members.iter().map(|&m| pool[m].created_at).min().unwrap(),
            }
        })
        .collect()
}

/// Line-by-line reading of the domain-pool update: append (and fuse the
/// closest pair on overflow) or blend every candidate.
fn reference_domain_update(
    entries: &[DomainPromptEntry],
    capacity: usize,
    record: &DomainUpdateRecord,
    alpha_d: f64,
    now: u64,
) -> Vec<DomainPromptEntry> {
    let mut pool = entries.to_vec();
    match &record.outcome.weights {
        None => {
            pool.push(DomainPromptEntry {
                key: record.batch_key.clone(),
                prompt: record.learned_prompt.clone(),
                created_at: now,
            });
            if pool.len() > capacity {
                let dist = |a: &BatchStats, b: &BatchStats| {
                    let mut s = 0.0;
                    for k in 0..a.mean.len() {
                        s += (a.mean[k] - b.mean[k]) * (a.mean[k] - b.mean[k]);
                    }
                    for k in 0..a.std.len() {
                        s += (a.std[k] - b.std[k]) * (a.std[k] - b.std[k]);
                    }
                    s.sqrt()
                };
                let (mut bi, mut bj, mut bd) = (0, 1, f64::INFINITY);
                for i in 0..pool.len() {
                    for j in i + 1..pool.len() {
                        let d = dist(&pool[i].key, &pool[j].key);
                        if d < bd {
                            (bi, bj, bd) = (i, j, d);
                        }
                    }
                }
                let b = pool.remove(bj);
                let a = &mut pool[bi];
                let half = |x: &mut Vec<f64>, y: &[f64]| {
                    for k in 0..x.len() {
                        x[k] = (x[k] + y[k]) / 2.0;
                    }
                };
                half(&mut a.key.mean, &b.key.mean);
                half(&mut a.key.std, &b.key.std);
                half(&mut a.prompt, &b.prompt);
                a.created_at = a.created_at.min(b.created_at);
            }
        }
        Some(ws) => {
            for &(i, w) in ws {
                let rate = alpha_d * w;
                let e = &mut pool[i];
                for k in 0..e.key.mean.len() {
                    e.key.mean[k] = rate * record.batch_key.mean[k] + (1.0 - rate) * e.key.mean[k];
                    e.key.std[k] = rate * record.batch_key.std[k] + (1.0 - rate) * e.key.std[k];
                }
                for k in 0..e.prompt.len() {
                    e.prompt[k] = w * record.learned_prompt[k] + (1.0 - w) * e.prompt[k];
                }
            }
        }
    }
    pool
}

fn bits_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Returns (matches reference, compaction ran, some sample was gated).
fn class_instance(rng: &mut SeededRng) -> (bool, bool, bool) {
    let dim = 3;
    let classes = 3 + rng.index(3);
    let cap = 2 + rng.index(5);
    let mut pool = ClassPromptPool::new(cap, dim).unwrap();
    for t in 0..rng.index(cap + 1) {
        pool.push(
            random_probability(classes, rng, 3.0),
            rng.gaussian_vec(dim, 1.0),
            t as u64,
        )
        .unwrap();
    }
    let params = MatchParams {
        threshold: rng.uniform(0.5, 0.99),
        temperature: rng.uniform(0.5, 2.0),
        init_scale: 0.01,
        softmax_over_all: false,
    };
    let gamma_h = rng.uniform(0.3, 1.0);
    let alpha_c = rng.uniform(0.0, 1.0);
    let records: Vec<ClassUpdateRecord> = (0..1 + rng.index(8))
        .map(|_| {
            let pseudo = random_probability(classes, rng, 3.0);
            let outcome = fission_class(&pool, &pseudo, &params, rng).unwrap();
            let sharp = if rng.uniform(0.0, 1.0) < 0.3 {
                0.2
            } else {
                4.0
            };
            ClassUpdateRecord {
                learned_prompt: rng.gaussian_vec(dim, 1.0),
                prediction: random_probability(classes, rng, sharp),
                pseudo_label: pseudo,
                outcome,
            }
        })
        .collect();
    let expected = reference_class_update(pool.entries(), cap, &records, gamma_h, alpha_c, 50);
    let s = update_class_pool(
        &mut pool,
        &records,
        gamma_h,
        alpha_c,
        ClassUpdateMode::Sequential,
        50,
    )
    .unwrap();
    let same = pool.entries().len() == expected.len()
        && pool.entries().iter().zip(&expected).all(|(g, e)| {
            bits_equal(&g.key, &e.key)
                && bits_equal(&g.prompt, &e.prompt)
                && g.created_at == e.created_at
        });
    (same, s.compaction.is_some(), s.gated > 0)
}

/// Returns (matches reference, a fusion ran, some entry was blended).
fn domain_instance(rng: &mut SeededRng) -> (bool, bool, bool) {
    let (dim, feat) = (3, 4);
    let cap = 1 + rng.index(5);
    let mut pool = DomainPromptPool::new(cap, dim).unwrap();
    let stats = |rng: &mut SeededRng| BatchStats {
        mean: rng.gaussian_vec(feat, 2.0),
        std: (0..feat).map(|_| rng.uniform(0.1, 2.0)).collect(),
    };
    for t in 0..rng.index(cap + 1) {
        pool.push(stats(rng), rng.gaussian_vec(dim, 1.0), t as u64)
            .unwrap();
    }
    let params = MatchParams {
        threshold: rng.uniform(1.0, 6.0),
        temperature: rng.uniform(0.5, 3.0),
        init_scale: 0.01,
        softmax_over_all: false,
    };
    let key = stats(rng);
    let outcome = fission_domain(&pool, &key, &params, rng).unwrap();
    let record = DomainUpdateRecord {
        learned_prompt: rng.gaussian_vec(dim, 1.0),
        batch_key: key,
        outcome,
    };
    let alpha_d = rng.uniform(0.0, 1.0);
    let expected = reference_domain_update(pool.entries(), cap, &record, alpha_d, 50);
    let s = update_domain_pool(&mut pool, &record, alpha_d, 50).unwrap();
    let same = pool.entries().len() == expected.len()
        && pool.entries().iter().zip(&expected).all(|(g, e)| {
            bits_equal(&g.key.mean, &e.key.mean)
                && bits_equal(&g.key.std, &e.key.std)
                && bits_equal(&g.prompt, &e.prompt)
                && g.created_at == e.created_at
        });
    (same, s.fused.is_some(), !s.updated.is_empty())
}

#[test]
fn criterion_7_reference_interpreters() {
    let start = Instant::now();
    let mut rng = SeededRng::new(7);
    let class: Vec<_> = (0..100).map(|_| class_instance(&mut rng)).collect();
    let domain: Vec<_> = (0..100).map(|_| domain_instance(&mut rng)).collect();
    let elapsed = start.elapsed();
    let count = |v: &[(bool, bool, bool)], f: fn(&(bool, bool, bool)) -> bool| {
        v.iter().filter(|x| f(x)).count()
    };
    let class_ok = count(&class, |x| x.0);
    let domain_ok = count(&domain, |x| x.0);
    let (compactions, gated) = (count(&class, |x| x.1), count(&class, |x| x.2));
    let (fusions, blends) = (count(&domain, |x| x.1), count(&domain, |x| x.2));
    let covered = compactions > 0 && gated > 0 && fusions > 0 && blends > 0;
    report(
        7,
        "pool updates bitwise equal to reference interpreters",
        class_ok == 100 && domain_ok == 100 && covered && elapsed < Duration::from_secs(10),
        format!(
            "class {class_ok}/100 ({compactions} compactions, {gated} with gated samples), \
             domain {domain_ok}/100 ({fusions} fusions, {blends} blends), {elapsed:.1?}"
        ),
    );
}

// ---------------------------------------------------------------- 8

fn run_cli(out: &std::path::Path) -> (Vec<u8>, Vec<u8>) {
    let status = Command::new(env!("CARGO_BIN_EXE_kff"))
        .args(["run", "--seed", "7", "--out"])
        .arg(out)
        .output()
        .unwrap();
    assert!(
        status.status.success(),
        "{}",
        String::from_utf8_lossy(&status.stderr)
    );
    (
        std::fs::read(out.join("metrics.csv")).unwrap(),
        std::fs::read(out.join("summary.json")).unwrap(),
    )
}

#[test]
fn criterion_8_determinism_and_format() {
    let dir = tempfile::tempdir().unwrap();
    let a = run_cli(&dir.path().join("a"));
    let b = run_cli(&dir.path().join("b"));
    let deterministic = a == b && !a.0.is_empty();

    let sc = Scenario::generate(
        &StreamConfig {
            seed: 8,
            ..StreamConfig::default()
        },
        &WorldConfig::default(),
    )
    .unwrap();
    let path = dir.path().join("stream.csv");
    stream::write_stream(&sc.stream, &path).unwrap();
    let back = stream::read_stream(&path).unwrap();
    let values_equal = back.len() == sc.stream.len()
        && back.iter().zip(&sc.stream).all(|(x, y)| {
            x.index == y.index
                && x.domain_id == y.domain_id
                && x.labels == y.labels
                && x.samples
                    .iter()
                    .zip(&y.samples)
                    .all(|(p, q)| bits_equal(p, q))
        });
    let rewritten =
        stream::stream_to_string(&back).unwrap() == std::fs::read_to_string(&path).unwrap();
    report(
        8,
        "deterministic runs and lossless stream CSV",
        deterministic && values_equal && rewritten,
        format!(
            "metrics+summary identical {deterministic}, {} bytes of metrics; round trip bitwise {values_equal}, rewrite identical {rewritten}",
            a.0.len()
        ),
    );
}
