//! Frozen toy source model: a linear feature extractor followed by a softmax
//! head. Prompts are added to the input before the extractor.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{KffError, Result};
use crate::numerics::{self, check_dim, softmax, BatchStats, Matrix, SeededRng, Vector};

/// `f(x) = softmax(W · A(x + s·prompt) + c)`. Weights never change after
/// construction; there is no `&mut self` API.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    extractor: Matrix,
    head: Matrix,
    bias: Vector,
    seed: u64,
    #[serde(default = "default_prompt_scale")]
    prompt_scale: f64,
}

fn default_prompt_scale() -> f64 {
    1.0
}

/// Output of a prompted forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub features: Vec<Vector>,
    pub logits: Vec<Vector>,
    pub probs: Vec<Vector>,
}

/// Knobs for fitting the head on labelled source data.
#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub l2: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            l2: 1e-2,
            max_iters: 2000,
            grad_tol: 1e-6,
        }
    }
}

impl ToyModel {
    pub fn new(extractor: Matrix, head: Matrix, bias: Vector, seed: u64) -> Result<Self> {
        check_dim(extractor.rows(), head.cols())?;
        check_dim(head.rows(), bias.len())?;
        numerics::check_finite(&bias, "head bias")?;
        if extractor.cols() == 0 || head.rows() == 0 {
            return Err(KffError::Empty("model dimensions"));
        }
        Ok(ToyModel {
            extractor,
            head,
            bias,
            seed,
            prompt_scale: 1.0,
        })
    }

    pub fn with_prompt_scale(mut self, scale: f64) -> Result<Self> {
        if !scale.is_finite() || scale <= 0.0 {
            return Err(KffError::Domain(format!(
                "prompt_scale must be > 0, got {scale}"
            )));
        }
        self.prompt_scale = scale;
        Ok(self)
    }

    /// Gaussian extractor scaled by `1/√input_dim`.
    pub fn random_extractor(input_dim: usize, feature_dim: usize, rng: &mut SeededRng) -> Matrix {
        let scale = 1.0 / (input_dim as f64).sqrt();
        let data = rng.gaussian_vec(input_dim * feature_dim, scale);
        Matrix::new(feature_dim, input_dim, data).expect("finite gaussian draws")
    }

    /// Draws the extractor from `seed` and fits the head by L2-regularised
    /// multinomial logistic regression on the extracted features.
    pub fn fit_source(
        feature_dim: usize,
        num_classes: usize,
        samples: &[Vector],
        labels: &[usize],
        seed: u64,
        opts: FitOptions,
    ) -> Result<Self> {
        let input_dim = samples
            .first()
            .ok_or(KffError::Empty("source samples"))?
            .len();
        check_dim(samples.len(), labels.len())?;
        if let Some(bad) = labels.iter().find(|l| **l >= num_classes) {
            return Err(KffError::Domain(format!(
                "label {bad} >= num_classes {num_classes}"
            )));
        }
        let mut rng = SeededRng::new(seed);
        let extractor = Self::random_extractor(input_dim, feature_dim, &mut rng);
        let feats = samples
            .iter()
            .map(|x| extractor.matvec(x))
            .collect::<Result<Vec<_>>>()?;

        let n = feats.len() as f64;
        let mean_sq = feats.iter().map(|z| numerics::dot(z, z) + 1.0).sum::<f64>() / n;
        let step = 1.0 / (0.5 * mean_sq + opts.l2);

        let mut head = Matrix::zeros(num_classes, feature_dim);
        let mut bias = vec![0.0; num_classes];
        for _ in 0..opts.max_iters {
            let mut g_head = Matrix::zeros(num_classes, feature_dim);
            let mut g_bias = vec![0.0; num_classes];
            for (z, &y) in feats.iter().zip(labels) {
                let logits = numerics::add(&head.matvec(z)?, &bias);
                let mut p = softmax(&logits)?;
                p[y] -= 1.0;
                for (k, pk) in p.iter().enumerate() {
                    g_bias[k] += pk / n;
                    for (g, zj) in g_head.row_mut(k).iter_mut().zip(z) {
                        *g += pk * zj / n;
                    }
                }
            }
            let mut gnorm = 0.0;
            for k in 0..num_classes {
                for j in 0..feature_dim {
                    let g = g_head.get(k, j) + opts.l2 * head.get(k, j);
                    gnorm += g * g;
                    head.row_mut(k)[j] -= step * g;
                }
                gnorm += g_bias[k] * g_bias[k];
                bias[k] -= step * g_bias[k];
            }
            if gnorm.sqrt() < opts.grad_tol {
                break;
            }
        }
        ToyModel::new(extractor, head, bias, seed)
    }

    pub fn input_dim(&self) -> usize {
        self.extractor.cols()
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.head.rows()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn prompt_scale(&self) -> f64 {
        self.prompt_scale
    }

    pub fn extractor(&self) -> &Matrix {
        &self.extractor
    }

    pub fn head(&self) -> &Matrix {
        &self.head
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    /// `A x`, no prompt.
    pub fn features(&self, x: &[f64]) -> Result<Vector> {
        self.extractor.matvec(x)
    }

    /// `W z + c`
    pub fn logits(&self, z: &[f64]) -> Result<Vector> {
        Ok(numerics::add(&self.head.matvec(z)?, &self.bias))
    }

    pub fn forward(
        &self,
        batch: &[Vector],
        domain_prompt: &[f64],
        class_prompts: &[Vector],
    ) -> Result<Forward> {
        if batch.is_empty() {
            return Err(KffError::Empty("batch"));
        }
        check_dim(batch.len(), class_prompts.len())?;
        let d = self.input_dim();
        check_dim(d, domain_prompt.len())?;
        let s = self.prompt_scale;
        let mut out = Forward {
            features: Vec::with_capacity(batch.len()),
            logits: Vec::with_capacity(batch.len()),
            probs: Vec::with_capacity(batch.len()),
        };
        for (x, pc) in batch.iter().zip(class_prompts) {
            check_dim(d, x.len())?;
            check_dim(d, pc.len())?;
            let u: Vector = (0..d)
                .map(|i| x[i] + s * (domain_prompt[i] + pc[i]))
                .collect();
            let z = self.extractor.matvec(&u)?;
            let l = self.logits(&z)?;
            out.probs.push(softmax(&l)?);
            out.logits.push(l);
            out.features.push(z);
        }
        Ok(out)
    }

    /// Prompt-free predictions; the class-pool matching keys.
    pub fn pseudo_labels(&self, batch: &[Vector]) -> Result<Vec<Vector>> {
        if batch.is_empty() {
            return Err(KffError::Empty("batch"));
        }
        batch
            .iter()
            .map(|x| softmax(&self.logits(&self.features(x)?)?))
            .collect()
    }

    /// Domain-matching key: stats of prompt-free features.
    pub fn key_stats(&self, batch: &[Vector]) -> Result<BatchStats> {
        if batch.len() < 2 {
            return Err(KffError::InsufficientData {
                needed: 2,
                got: batch.len(),
            });
        }
        let feats = batch
            .iter()
            .map(|x| self.features(x))
            .collect::<Result<Vec<_>>>()?;
        numerics::batch_stats(&feats)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| KffError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| KffError::io(path, e))?;
        let model: ToyModel = serde_json::from_str(&text)?;
        // re-run constructor checks on untrusted input
        let scale = model.prompt_scale;
        ToyModel::new(model.extractor, model.head, model.bias, model.seed)?.with_prompt_scale(scale)
    }
}
