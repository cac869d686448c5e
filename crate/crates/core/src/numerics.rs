//! Vector primitives, softmax/entropy, batch statistics and the seeded RNG.
//!
//! Vectors are plain `Vec<f64>` / `&[f64]`. Nothing non-finite is ever stored:
//! constructors and the fallible helpers here reject NaN and infinities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{KffError, Result};

pub type Vector = Vec<f64>;

pub fn check_finite(values: &[f64], what: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(KffError::NonFinite(what))
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(KffError::Dimension { expected, got })
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn add(a: &[f64], b: &[f64]) -> Vector {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vector {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn scaled(a: &[f64], s: f64) -> Vector {
    a.iter().map(|x| x * s).collect()
}

/// Elementwise mean of equally sized vectors.
pub fn mean_of<'a>(vectors: impl IntoIterator<Item = &'a [f64]>) -> Vector {
    let mut acc: Vector = Vec::new();
    let mut count = 0usize;
    for v in vectors {
        if acc.is_empty() {
            acc = vec![0.0; v.len()];
        }
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
        count += 1;
    }
    if count > 0 {
        let n = count as f64;
        acc.iter_mut().for_each(|a| *a /= n);
    }
    acc
}

/// Index of the largest entry; first one wins on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Result<Vector> {
    if logits.is_empty() {
        return Err(KffError::Empty("softmax logits"));
    }
    check_finite(logits, "softmax logits")?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vector = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `ln softmax(logits)`, finite even where the probability underflows to zero.
pub fn log_softmax(logits: &[f64]) -> Result<Vector> {
    if logits.is_empty() {
        return Err(KffError::Empty("softmax logits"));
    }
    check_finite(logits, "softmax logits")?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok(logits.iter().map(|l| l - lse).collect())
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn entropy(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(KffError::Empty("probability vector"));
    }
    check_finite(probs, "probability vector")?;
    if let Some(p) = probs.iter().find(|p| **p < 0.0) {
        return Err(KffError::Domain(format!("negative probability {p}")));
    }
    Ok(-probs
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>())
}

/// True when `v` is a finite, non-negative vector summing to one within `tol`.
pub fn is_probability(v: &[f64], tol: f64) -> bool {
    !v.is_empty()
        && v.iter().all(|p| p.is_finite() && *p >= 0.0)
        && (v.iter().sum::<f64>() - 1.0).abs() <= tol
}

/// Rescales a non-negative vector so it sums to one.
pub fn renormalize(v: &mut [f64]) {
    let total: f64 = v.iter().sum();
    if total > 0.0 {
        v.iter_mut().for_each(|p| *p /= total);
    }
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(KffError::UndefinedSimilarity);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn euclid(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// Per-dimension mean and population standard deviation of a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub mean: Vector,
    pub std: Vector,
}

impl BatchStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `(μ, σ)` laid end to end; the space keys are compared in.
    pub fn concat(&self) -> Vector {
        self.mean.iter().chain(&self.std).copied().collect()
    }

    pub fn distance(&self, other: &BatchStats) -> Result<f64> {
        check_dim(self.dim(), other.dim())?;
        let sq: f64 = self
            .mean
            .iter()
            .zip(&other.mean)
            .chain(self.std.iter().zip(&other.std))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(sq.sqrt())
    }
}

pub fn batch_stats(features: &[Vector]) -> Result<BatchStats> {
    if features.len() < 2 {
        return Err(KffError::InsufficientData {
            needed: 2,
            got: features.len(),
        });
    }
    let dim = features[0].len();
    for f in features {
        check_dim(dim, f.len())?;
        check_finite(f, "batch features")?;
    }
    let n = features.len() as f64;
    let mut mean = vec![0.0; dim];
    let mut sq = vec![0.0; dim];
    // Welford keeps the variance non-negative without a second pass.
    for (count, f) in features.iter().enumerate() {
        let k = (count + 1) as f64;
        for j in 0..dim {
            let delta = f[j] - mean[j];
            mean[j] += delta / k;
            sq[j] += delta * (f[j] - mean[j]);
        }
    }
    let std = sq.iter().map(|s| (s.max(0.0) / n).sqrt()).collect();
    Ok(BatchStats { mean, std })
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_dim(rows * cols, data.len())?;
        check_finite(&data, "matrix")?;
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vector]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_dim(cols, r.len())?;
            data.extend_from_slice(r);
        }
        Matrix::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub(crate) fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `M x`
    pub fn matvec(&self, x: &[f64]) -> Result<Vector> {
        check_dim(self.cols, x.len())?;
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    /// `Mᵀ y`
    pub fn tr_matvec(&self, y: &[f64]) -> Result<Vector> {
        check_dim(self.rows, y.len())?;
        let mut out = vec![0.0; self.cols];
        for (r, yr) in y.iter().enumerate() {
            for (o, m) in out.iter_mut().zip(self.row(r)) {
                *o += m * yr;
            }
        }
        Ok(out)
    }
}

/// ChaCha8-backed generator: same seed, same draws, on every platform.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child generator; `stream` selects which one.
    pub fn fork(&self, stream: u64) -> SeededRng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        SeededRng {
            seed: self.seed,
            inner,
        }
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn gaussian_vec(&mut self, dim: usize, std: f64) -> Vector {
        (0..dim).map(|_| std * self.standard_normal()).collect()
    }

    /// Uniform on `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }
}
