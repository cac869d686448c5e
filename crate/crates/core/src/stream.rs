//! Synthetic domain-shift streams.
//!
//! A domain draws `x = scale ⊙ (class_mean + noise) + shift`. Streams visit
//! domains in a configured order (repeats allowed), `batches_per_domain`
//! batches per visit. [`make_separated`] builds domain sets whose batch keys
//! form well-separated clusters and returns the measured certificate.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{KffError, Result};
use crate::model::ToyModel;
use crate::numerics::{self, check_dim, BatchStats, SeededRng, Vector};

pub type DomainId = u32;

/// Source domains carry this id; target domains start at 1.
pub const SOURCE_DOMAIN: DomainId = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub id: DomainId,
    pub shift: Vector,
    pub scale: Vector,
    pub class_means: Vec<Vector>,
    pub noise_std: f64,
}

impl DomainSpec {
    /// Unshifted, unscaled domain with Gaussian class means of std `spread`.
    pub fn source(
        input_dim: usize,
        num_classes: usize,
        spread: f64,
        noise_std: f64,
        rng: &mut SeededRng,
    ) -> Self {
        DomainSpec {
            id: SOURCE_DOMAIN,
            shift: vec![0.0; input_dim],
            scale: vec![1.0; input_dim],
            class_means: (0..num_classes)
                .map(|_| rng.gaussian_vec(input_dim, spread))
                .collect(),
            noise_std,
        }
    }

    /// Same classes, moved by `shift`.
    pub fn shifted(&self, id: DomainId, shift: Vector) -> Self {
        DomainSpec {
            id,
            shift,
            ..self.clone()
        }
    }

    pub fn input_dim(&self) -> usize {
        self.shift.len()
    }

    pub fn validate(&self, input_dim: usize, num_classes: usize) -> Result<()> {
        check_dim(input_dim, self.shift.len())?;
        check_dim(input_dim, self.scale.len())?;
        check_dim(num_classes, self.class_means.len())?;
        for m in &self.class_means {
            check_dim(input_dim, m.len())?;
            numerics::check_finite(m, "class mean")?;
        }
        numerics::check_finite(&self.shift, "domain shift")?;
        if self.scale.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(KffError::Domain("domain scale entries must be > 0".into()));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(KffError::Domain("noise std must be >= 0".into()));
        }
        Ok(())
    }

    /// Draws `n` labelled samples.
    pub fn sample(&self, n: usize, rng: &mut SeededRng) -> (Vec<Vector>, Vec<usize>) {
        let d = self.input_dim();
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let y = rng.index(self.class_means.len());
            let mean = &self.class_means[y];
            let x = (0..d)
                .map(|i| {
                    self.scale[i] * (mean[i] + self.noise_std * rng.standard_normal())
                        + self.shift[i]
                })
                .collect();
            xs.push(x);
            ys.push(y);
        }
        (xs, ys)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub domain_order: Vec<DomainId>,
    pub batches_per_domain: usize,
    pub batch_size: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    pub seed: u64,
    /// Target separation θ; calibrated from the noise level when unset.
    pub separation: Option<f64>,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            domain_order: [1, 2, 3].repeat(10),
            batches_per_domain: 10,
            batch_size: 16,
            input_dim: 8,
            num_classes: 4,
            seed: 0,
            separation: None,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(KffError::Config("batch_size must be >= 2".into()));
        }
        if self.domain_order.is_empty() {
            return Err(KffError::Config("domain_order must be nonempty".into()));
        }
        if self.batches_per_domain == 0 || self.input_dim == 0 || self.num_classes == 0 {
            return Err(KffError::Config(
                "batches_per_domain, input_dim and num_classes must be positive".into(),
            ));
        }
        if let Some(theta) = self.separation {
            if !(theta > 0.0) {
                return Err(KffError::Config("separation must be > 0".into()));
            }
        }
        Ok(())
    }

    /// Distinct domain ids in first-visit order.
    pub fn distinct_domains(&self) -> Vec<DomainId> {
        let mut seen = Vec::new();
        for id in &self.domain_order {
            if !seen.contains(id) {
                seen.push(*id);
            }
        }
        seen
    }
}

/// One test batch with its ground truth. Only harness code reads the labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub index: usize,
    pub domain_id: DomainId,
    pub samples: Vec<Vector>,
    pub labels: Vec<usize>,
}

pub fn generate_stream(
    config: &StreamConfig,
    domains: &[DomainSpec],
    rng: &mut SeededRng,
) -> Result<Vec<LabeledBatch>> {
    config.validate()?;
    let by_id: BTreeMap<DomainId, &DomainSpec> = domains.iter().map(|d| (d.id, d)).collect();
    for d in domains {
        d.validate(config.input_dim, config.num_classes)?;
    }
    let mut out = Vec::with_capacity(config.domain_order.len() * config.batches_per_domain);
    for id in &config.domain_order {
        let spec = by_id.get(id).ok_or_else(|| {
            KffError::Config(format!("domain_order references unknown domain {id}"))
        })?;
        for _ in 0..config.batches_per_domain {
            let (samples, labels) = spec.sample(config.batch_size, rng);
            out.push(LabeledBatch {
                index: out.len(),
                domain_id: *id,
                samples,
                labels,
            });
        }
    }
    Ok(out)
}

/// Measured cluster separation in key space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationCertificate {
    pub theta: f64,
    pub max_intra: f64,
    pub min_inter: f64,
    pub probe_batches: usize,
    pub seed: u64,
}

impl SeparationCertificate {
    pub fn is_valid(&self) -> bool {
        self.max_intra < self.theta && self.theta < self.min_inter
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| KffError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| KffError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Largest same-domain and smallest cross-domain key distance over `keys`.
/// Returns `(0, ∞)` components when a kind of pair does not exist.
pub fn separation_extremes(keys: &[(DomainId, BatchStats)]) -> Result<(f64, f64)> {
    let mut max_intra: f64 = 0.0;
    let mut min_inter = f64::INFINITY;
    for i in 0..keys.len() {
        for j in i + 1..keys.len() {
            let d = keys[i].1.distance(&keys[j].1)?;
            if keys[i].0 == keys[j].0 {
                max_intra = max_intra.max(d);
            } else {
                min_inter = min_inter.min(d);
            }
        }
    }
    Ok((max_intra, min_inter))
}

/// Measures the separation of an existing stream at threshold `theta`.
pub fn certify(
    batches: &[LabeledBatch],
    model: &ToyModel,
    theta: f64,
    seed: u64,
) -> Result<SeparationCertificate> {
    let keys = batches
        .iter()
        .map(|b| Ok((b.domain_id, model.key_stats(&b.samples)?)))
        .collect::<Result<Vec<_>>>()?;
    let (max_intra, min_inter) = separation_extremes(&keys)?;
    let per_domain = batches
        .iter()
        .fold(BTreeMap::<DomainId, usize>::new(), |mut m, b| {
            *m.entry(b.domain_id).or_default() += 1;
            m
        });
    Ok(SeparationCertificate {
        theta,
        max_intra,
        min_inter,
        probe_batches: per_domain.values().copied().min().unwrap_or(0),
        seed,
    })
}

/// Probe batches per domain used when certifying a domain set.
pub const PROBE_BATCHES: usize = 30;
const MAX_SEPARATION_ATTEMPTS: usize = 8;

fn probe_keys(
    domains: &[DomainSpec],
    batch_size: usize,
    batches: usize,
    model: &ToyModel,
    rng: &mut SeededRng,
) -> Result<Vec<(DomainId, BatchStats)>> {
    let mut keys = Vec::with_capacity(domains.len() * batches);
    for d in domains {
        for _ in 0..batches {
            let (xs, _) = d.sample(batch_size, rng);
            keys.push((d.id, model.key_stats(&xs)?));
        }
    }
    Ok(keys)
}

/// Largest key distance between `batches` probe batches of `base`; a lower
/// bound on any usable θ at this noise level.
pub fn probe_intra_spread(
    base: &DomainSpec,
    batch_size: usize,
    batches: usize,
    model: &ToyModel,
    rng: &mut SeededRng,
) -> Result<f64> {
    let keys = probe_keys(std::slice::from_ref(base), batch_size, batches, model, rng)?;
    Ok(separation_extremes(&keys)?.0)
}

/// Orthonormal directions when `n ≤ dim`, otherwise unit Gaussian ones.
fn shift_directions(n: usize, dim: usize, rng: &mut SeededRng) -> Vec<Vector> {
    let mut dirs: Vec<Vector> = Vec::with_capacity(n);
    for k in 0..n {
        let mut v = rng.gaussian_vec(dim, 1.0);
        if k < dim {
            for u in &dirs {
                let p = numerics::dot(&v, u);
                for (vi, ui) in v.iter_mut().zip(u) {
                    *vi -= p * ui;
                }
            }
        }
        let n = numerics::norm(&v);
        dirs.push(numerics::scaled(&v, 1.0 / n));
    }
    dirs
}

/// Builds `n` shifted copies of `base` (ids `1..=n`) whose probe batches are
/// well separated at `theta` in key space. Shifts start at three times θ
/// apart (measured through the extractor) and double until the probe
/// certificate holds. Fails if the noise alone already spreads a domain over
/// θ or the retries run out.
pub fn make_separated(
    config: &StreamConfig,
    n: usize,
    theta: f64,
    base: &DomainSpec,
    model: &ToyModel,
    rng: &mut SeededRng,
) -> Result<(Vec<DomainSpec>, SeparationCertificate)> {
    if n < 2 {
        return Err(KffError::Config(
            "make_separated needs at least 2 domains".into(),
        ));
    }
    if !(theta > 0.0) {
        return Err(KffError::Config("theta must be > 0".into()));
    }
    base.validate(config.input_dim, config.num_classes)?;
    check_dim(config.input_dim, model.input_dim())?;

    let dirs = shift_directions(n, config.input_dim, rng);
    let feat_dirs = dirs
        .iter()
        .map(|d| model.features(d))
        .collect::<Result<Vec<_>>>()?;
    let mut unit_gap = f64::INFINITY;
    for i in 0..n {
        for j in i + 1..n {
            unit_gap = unit_gap.min(numerics::euclid(&feat_dirs[i], &feat_dirs[j])?);
        }
    }
    if !(unit_gap > 0.0) {
        return Err(KffError::Certificate("degenerate shift directions".into()));
    }
    let mut magnitude = 3.0 * theta / unit_gap;

    let mut last = None;
    for _ in 0..MAX_SEPARATION_ATTEMPTS {
        let domains: Vec<DomainSpec> = dirs
            .iter()
            .enumerate()
            .map(|(k, d)| base.shifted(k as DomainId + 1, numerics::scaled(d, magnitude)))
            .collect();
        let keys = probe_keys(&domains, config.batch_size, PROBE_BATCHES, model, rng)?;
        let (max_intra, min_inter) = separation_extremes(&keys)?;
        let cert = SeparationCertificate {
            theta,
            max_intra,
            min_inter,
            probe_batches: PROBE_BATCHES,
            seed: config.seed,
        };
        if cert.is_valid() {
            return Ok((domains, cert));
        }
        if max_intra >= theta {
            return Err(KffError::Certificate(format!(
                "max intra-domain distance {max_intra:.4} is not below theta {theta:.4}"
            )));
        }
        last = Some(cert);
        magnitude *= 2.0;
    }
    Err(KffError::Certificate(format!(
        "no separating shift found after {MAX_SEPARATION_ATTEMPTS} attempts (last: {last:?})"
    )))
}

const HEADER_PREFIX: &str = "batch_idx,domain_id,class_id";

/// Formats a value with 9 significant digits.
pub fn format_value(v: f64) -> String {
    format!("{v:.8e}")
}

/// Rounds to the value the stream file would store.
pub fn quantize(v: f64) -> f64 {
    format_value(v).parse().expect("formatted float parses")
}

pub fn write_stream(batches: &[LabeledBatch], path: &Path) -> Result<()> {
    std::fs::write(path, stream_to_string(batches)?).map_err(|e| KffError::io(path, e))
}

pub fn stream_to_string(batches: &[LabeledBatch]) -> Result<String> {
    let dim = batches
        .first()
        .and_then(|b| b.samples.first())
        .map_or(0, Vec::len);
    let mut out = String::from(HEADER_PREFIX);
    for i in 0..dim {
        write!(out, ",f{i}").expect("string write");
    }
    out.push('\n');
    for b in batches {
        check_dim(b.samples.len(), b.labels.len())?;
        for (x, y) in b.samples.iter().zip(&b.labels) {
            check_dim(dim, x.len())?;
            numerics::check_finite(x, "stream sample")?;
            write!(out, "{},{},{}", b.index, b.domain_id, y).expect("string write");
            for v in x {
                out.push(',');
                out.push_str(&format_value(*v));
            }
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn read_stream(path: &Path) -> Result<Vec<LabeledBatch>> {
    let text = std::fs::read_to_string(path).map_err(|e| KffError::io(path, e))?;
    parse_stream(&text, path)
}

/// Parses stream CSV text; `origin` only labels error messages.
pub fn parse_stream(text: &str, origin: &Path) -> Result<Vec<LabeledBatch>> {
    let err = |line: usize, msg: String| KffError::Parse {
        path: origin.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Ok(Vec::new());
    };
    let dim = parse_header(header).map_err(|m| err(1, m))?;

    let mut batches: Vec<LabeledBatch> = Vec::new();
    for (n, line) in lines {
        let lineno = n + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 3 {
            return Err(err(
                lineno,
                format!("expected {} fields, found {}", dim + 3, fields.len()),
            ));
        }
        let batch_idx: usize = fields[0]
            .parse()
            .map_err(|_| err(lineno, format!("bad batch_idx {:?}", fields[0])))?;
        let domain_id: DomainId = fields[1]
            .parse()
            .map_err(|_| err(lineno, format!("bad domain_id {:?}", fields[1])))?;
        let class_id: usize = fields[2]
            .parse()
            .map_err(|_| err(lineno, format!("bad class_id {:?}", fields[2])))?;
        let values = fields[3..]
            .iter()
            .map(|f| match f.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(err(lineno, format!("bad value {f:?}"))),
            })
            .collect::<Result<Vector>>()?;

        match batches.last_mut() {
            Some(b) if b.index == batch_idx => {
                if b.domain_id != domain_id {
                    return Err(err(
                        lineno,
                        format!("domain_id changes inside batch {batch_idx}"),
                    ));
                }
                b.samples.push(values);
                b.labels.push(class_id);
            }
            last => {
                if let Some(b) = last {
                    if batch_idx < b.index {
                        return Err(err(
                            lineno,
                            format!("batch_idx {batch_idx} after {}: rows must ascend", b.index),
                        ));
                    }
                }
                batches.push(LabeledBatch {
                    index: batch_idx,
                    domain_id,
                    samples: vec![values],
                    labels: vec![class_id],
                });
            }
        }
    }
    Ok(batches)
}

fn parse_header(header: &str) -> std::result::Result<usize, String> {
    let rest = header
        .strip_prefix(HEADER_PREFIX)
        .ok_or_else(|| format!("missing header, expected it to start with {HEADER_PREFIX:?}"))?;
    let mut dim = 0;
    for (i, name) in rest.split(',').skip(1).enumerate() {
        if name != format!("f{i}") {
            return Err(format!("unexpected column {name:?}, expected f{i}"));
        }
        dim += 1;
    }
    if !rest.is_empty() && !rest.starts_with(',') {
        return Err("malformed header".into());
    }
    Ok(dim)
}
