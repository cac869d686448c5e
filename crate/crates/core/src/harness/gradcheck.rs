use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::ToyModel;
use crate::numerics::{self, Matrix, SeededRng, Vector};
use crate::objective::{self, LossWeights, PromptGrads, SourceStats};
use crate::pools::{self, ClassPromptPool, DomainPromptPool, MatchParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub configs: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Configurations closer than this to a non-differentiable point are
    /// skipped.
    pub kink_margin: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            configs: 50,
            step: 1e-5,
            tolerance: 1e-4,
            kink_margin: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckCase {
    pub batch_size: usize,
    pub input_dim: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub kink_distance: f64,
    pub excluded: bool,
    /// `‖g − g_fd‖ / max(‖g‖, ‖g_fd‖)` over all prompt coordinates.
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub cases: Vec<GradcheckCase>,
    pub max_rel_error: f64,
    pub excluded: usize,
    pub passed: bool,
}

fn flatten(g: &PromptGrads) -> Vector {
    g.domain
        .iter()
        .chain(g.class.iter().flatten())
        .copied()
        .collect()
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = numerics::norm(&numerics::sub(analytic, numeric));
    let scale = numerics::norm(analytic).max(numerics::norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn random_probability(dim: usize, rng: &mut SeededRng) -> Vector {
    numerics::softmax(&rng.gaussian_vec(dim, 2.0)).expect("nonempty logits")
}

/// One random model, batch, source and pool pair; prompts are composed by
/// fission against the pools so the check runs at realistic prompt values.
fn case(rng: &mut SeededRng, cfg: &GradcheckConfig) -> Result<GradcheckCase> {
    let b = 4 + rng.index(13);
    let d = 3 + rng.index(6);
    let f = 3 + rng.index(6);
    let c = 3 + rng.index(6);
    let extractor = ToyModel::random_extractor(d, f, rng);
    let head = Matrix::new(c, f, rng.gaussian_vec(c * f, 1.0))?;
    let model = ToyModel::new(extractor, head, rng.gaussian_vec(c, 0.5), 0)?;
    let source = SourceStats {
        mean: rng.gaussian_vec(f, 1.0),
        std: (0..f).map(|_| rng.uniform(0.5, 2.0)).collect(),
        sample_count: 300,
    };
    let batch: Vec<Vector> = (0..b).map(|_| rng.gaussian_vec(d, 1.5)).collect();

    let mut class_pool = ClassPromptPool::new(100, d)?;
    for t in 0..5 {
        class_pool.push(random_probability(c, rng), rng.gaussian_vec(d, 0.3), t)?;
    }
    let key = model.key_stats(&batch)?;
    let mut domain_pool = DomainPromptPool::new(20, d)?;
    for t in 0..3 {
        let mut k = key.clone();
        for v in k.mean.iter_mut() {
            *v += rng.standard_normal() * 0.2;
        }
        domain_pool.push(k, rng.gaussian_vec(d, 0.3), t)?;
    }
    let params = |threshold: f64, temperature: f64| MatchParams {
        threshold,
        temperature,
        init_scale: 0.1,
        softmax_over_all: false,
    };
    let pseudo = model.pseudo_labels(&batch)?;
    let class_prompts: Vec<Vector> =
        pools::fission_class_batch(&class_pool, &pseudo, &params(0.3, 1.0), rng)?
            .into_iter()
            .map(|o| o.composed_prompt)
            .collect();
    let domain_prompt =
        pools::fission_domain(&domain_pool, &key, &params(1.0, 3.0), rng)?.composed_prompt;

    let weights = LossWeights {
        entropy: 3.0,
        std: 1.0,
    };
    let kink = objective::kink_distance(&model, &batch, &domain_prompt, &class_prompts, &source)?;
    let excluded = kink < cfg.kink_margin;
    let rel_error = if excluded {
        0.0
    } else {
        let analytic = objective::grad(
            &model,
            &batch,
            &domain_prompt,
            &class_prompts,
            &source,
            weights,
        )?;
        let numeric = objective::finite_difference_grad(
            &model,
            &batch,
            &domain_prompt,
            &class_prompts,
            &source,
            weights,
            cfg.step,
        )?;
        relative_error(&flatten(&analytic), &flatten(&numeric))
    };
    Ok(GradcheckCase {
        batch_size: b,
        input_dim: d,
        feature_dim: f,
        num_classes: c,
        kink_distance: kink,
        excluded,
        rel_error,
    })
}

/// Compares analytic prompt gradients against central differences on
/// `cfg.configs` seeded random configurations.
pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let root = SeededRng::new(cfg.seed);
    let cases = (0..cfg.configs as u64)
        .map(|k| case(&mut root.fork(k), cfg))
        .collect::<Result<Vec<_>>>()?;
    let max_rel_error = cases.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    let excluded = cases.iter().filter(|c| c.excluded).count();
    Ok(GradcheckReport {
        passed: max_rel_error < cfg.tolerance,
        cases,
        max_rel_error,
        excluded,
    })
}
