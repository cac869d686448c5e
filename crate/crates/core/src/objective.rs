//! Bi-level adaptation objective `L = L_d + a·L_c`.
//!
//! * `L_d = ‖μˢ − μ(P)‖ + α‖σˢ − σ(P)‖` aligns the prompted feature
//!   statistics of the batch with the source statistics.
//! * `L_c = (1/b) Σ H(ŷ_t)` is the mean prediction entropy.
//!
//! Gradients are closed form through `z = A(x + s(P_d + P_t))`, the batch
//! mean/std and the softmax entropy. A vanishing norm term contributes the
//! zero subgradient, and so does a feature dimension with `σ = 0`.

use serde::{Deserialize, Serialize};

use crate::error::{KffError, Result};
use crate::model::ToyModel;
use crate::numerics::{self, batch_stats, check_dim, log_softmax, norm, BatchStats, Vector};

/// Source feature statistics `(μˢ, σˢ)`; needs no labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceStats {
    pub mean: Vector,
    pub std: Vector,
    pub sample_count: usize,
}

impl SourceStats {
    pub fn from_features(features: &[Vector]) -> Result<Self> {
        let BatchStats { mean, std } = batch_stats(features)?;
        Ok(SourceStats {
            mean,
            std,
            sample_count: features.len(),
        })
    }
}

/// The two scalar weights of the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// `a`, weight of the entropy term.
    pub entropy: f64,
    /// `α`, weight of the std term inside `L_d`.
    pub std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub domain: f64,
    pub class: f64,
    pub entropy_weight: f64,
    pub total: f64,
}

/// Gradients of the total loss.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptGrads {
    pub domain: Vector,
    pub class: Vec<Vector>,
}

struct Evaluated {
    loss: LossBreakdown,
    stats: BatchStats,
    features: Vec<Vector>,
    log_probs: Vec<Vector>,
}

fn evaluate(
    model: &ToyModel,
    batch: &[Vector],
    domain_prompt: &[f64],
    class_prompts: &[Vector],
    source: &SourceStats,
    weights: LossWeights,
) -> Result<Evaluated> {
    if batch.len() < 2 {
        return Err(KffError::InsufficientData {
            needed: 2,
            got: batch.len(),
        });
    }
    check_dim(model.feature_dim(), source.mean.len())?;
    check_dim(model.feature_dim(), source.std.len())?;
    let fwd = model.forward(batch, domain_prompt, class_prompts)?;
    let stats = batch_stats(&fwd.features)?;
    let domain = norm(&numerics::sub(&source.mean, &stats.mean))
        + weights.std * norm(&numerics::sub(&source.std, &stats.std));

    let log_probs = fwd
        .logits
        .iter()
        .map(|l| log_softmax(l))
        .collect::<Result<Vec<_>>>()?;
    let class = log_probs.iter().map(|lp| entropy_from_log(lp)).sum::<f64>() / batch.len() as f64;

    Ok(Evaluated {
        loss: LossBreakdown {
            domain,
            class,
            entropy_weight: weights.entropy,
            total: domain + weights.entropy * class,
        },
        stats,
        features: fwd.features,
        log_probs,
    })
}

fn entropy_from_log(log_probs: &[f64]) -> f64 {
    -log_probs.iter().map(|lp| lp.exp() * lp).sum::<f64>()
}

pub fn loss(
    model: &ToyModel,
    batch: &[Vector],
    domain_prompt: &[f64],
    class_prompts: &[Vector],
    source: &SourceStats,
    weights: LossWeights,
) -> Result<LossBreakdown> {
    Ok(evaluate(model, batch, domain_prompt, class_prompts, source, weights)?.loss)
}

/// Analytic gradient of `total` with respect to the domain prompt and every
/// per-sample class prompt.
pub fn grad(
    model: &ToyModel,
    batch: &[Vector],
    domain_prompt: &[f64],
    class_prompts: &[Vector],
    source: &SourceStats,
    weights: LossWeights,
) -> Result<PromptGrads> {
    Ok(loss_and_grad(model, batch, domain_prompt, class_prompts, source, weights)?.1)
}

pub fn loss_and_grad(
    model: &ToyModel,
    batch: &[Vector],
    domain_prompt: &[f64],
    class_prompts: &[Vector],
    source: &SourceStats,
    weights: LossWeights,
) -> Result<(LossBreakdown, PromptGrads)> {
    let ev = evaluate(model, batch, domain_prompt, class_prompts, source, weights)?;
    let b = batch.len() as f64;
    let f = model.feature_dim();

    let mean_resid = numerics::sub(&ev.stats.mean, &source.mean);
    let mean_norm = norm(&mean_resid);
    let std_resid = numerics::sub(&ev.stats.std, &source.std);
    let std_norm = norm(&std_resid);

    // per-dimension factors shared by all samples
    let mean_coef: Vector = if mean_norm > 0.0 {
        mean_resid.iter().map(|r| r / (mean_norm * b)).collect()
    } else {
        vec![0.0; f]
    };
    let std_coef: Vector = (0..f)
        .map(|k| {
            let sigma = ev.stats.std[k];
            if std_norm > 0.0 && sigma > 0.0 {
                weights.std * std_resid[k] / (std_norm * b * sigma)
            } else {
                0.0
            }
        })
        .collect();

    let s = model.prompt_scale();
    let mut domain = vec![0.0; model.input_dim()];
    let mut class = Vec::with_capacity(batch.len());
    for (z, lp) in ev.features.iter().zip(&ev.log_probs) {
        let h = entropy_from_log(lp);
        let g_logits: Vector = lp
            .iter()
            .map(|l| -weights.entropy / b * l.exp() * (l + h))
            .collect();
        let mut g_feat = model.head().tr_matvec(&g_logits)?;
        for k in 0..f {
            g_feat[k] += mean_coef[k] + std_coef[k] * (z[k] - ev.stats.mean[k]);
        }
        let g_input = numerics::scaled(&model.extractor().tr_matvec(&g_feat)?, s);
        for (d, g) in domain.iter_mut().zip(&g_input) {
            *d += g;
        }
        class.push(g_input);
    }
    Ok((ev.loss, PromptGrads { domain, class }))
}

/// Distance of a configuration from the non-differentiable set of `L_d`:
/// the smaller of the two residual norms and the smallest batch std.
pub fn kink_distance(
    model: &ToyModel,
    batch: &[Vector],
    domain_prompt: &[f64],
    class_prompts: &[Vector],
    source: &SourceStats,
) -> Result<f64> {
    let fwd = model.forward(batch, domain_prompt, class_prompts)?;
    let stats = batch_stats(&fwd.features)?;
    let min_std = stats.std.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(norm(&numerics::sub(&stats.mean, &source.mean))
        .min(norm(&numerics::sub(&stats.std, &source.std)))
        .min(min_std))
}

/// Central finite differences of `total`, one coordinate at a time. Only
/// calls [`loss`]; shares no code with [`loss_and_grad`].
pub fn finite_difference_grad(
    model: &ToyModel,
    batch: &[Vector],
    domain_prompt: &[f64],
    class_prompts: &[Vector],
    source: &SourceStats,
    weights: LossWeights,
    h: f64,
) -> Result<PromptGrads> {
    let eval = |pd: &[f64], pc: &[Vector]| -> Result<f64> {
        Ok(loss(model, batch, pd, pc, source, weights)?.total)
    };
    let mut domain = Vec::with_capacity(domain_prompt.len());
    let mut pd = domain_prompt.to_vec();
    for i in 0..pd.len() {
        let orig = pd[i];
        pd[i] = orig + h;
        let up = eval(&pd, class_prompts)?;
        pd[i] = orig - h;
        let down = eval(&pd, class_prompts)?;
        pd[i] = orig;
        domain.push((up - down) / (2.0 * h));
    }
    let mut pc = class_prompts.to_vec();
    let mut class = Vec::with_capacity(pc.len());
    for t in 0..pc.len() {
        let mut g = Vec::with_capacity(pc[t].len());
        for i in 0..pc[t].len() {
            let orig = pc[t][i];
            pc[t][i] = orig + h;
            let up = eval(domain_prompt, &pc)?;
            pc[t][i] = orig - h;
            let down = eval(domain_prompt, &pc)?;
            pc[t][i] = orig;
            g.push((up - down) / (2.0 * h));
        }
        class.push(g);
    }
    Ok(PromptGrads { domain, class })
}

/// Constants of the AdamW recurrence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn with_lr(lr: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moment estimates for one prompt vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub config: AdamW,
    pub m: Vector,
    pub v: Vector,
    pub step: u64,
}

impl AdamWState {
    pub fn new(config: AdamW, dim: usize) -> Self {
        AdamWState {
            config,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            step: 0,
        }
    }
}

/// One AdamW step with bias correction and decoupled weight decay, applied in
/// place. A non-finite gradient is rejected before any state changes.
pub fn adamw_step(state: &mut AdamWState, prompt: &mut [f64], grad: &[f64]) -> Result<()> {
    check_dim(state.m.len(), prompt.len())?;
    check_dim(prompt.len(), grad.len())?;
    numerics::check_finite(grad, "gradient")?;
    let c = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for i in 0..prompt.len() {
        prompt[i] *= 1.0 - c.lr * c.weight_decay;
        state.m[i] = c.beta1 * state.m[i] + (1.0 - c.beta1) * grad[i];
        state.v[i] = c.beta2 * state.v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        prompt[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
    }
    Ok(())
}

/// Per-batch optimisation settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizeParams {
    pub steps: usize,
    pub domain: AdamW,
    pub class: AdamW,
    pub weights: LossWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizedPrompts {
    pub domain: Vector,
    pub class: Vec<Vector>,
    /// Loss at the returned prompts.
    pub loss: LossBreakdown,
}

/// Runs `params.steps` AdamW steps from the composed prompts. Optimizer state
/// is created fresh for every call.
pub fn optimize_prompts(
    model: &ToyModel,
    batch: &[Vector],
    domain_prompt: &[f64],
    class_prompts: &[Vector],
    source: &SourceStats,
    params: &OptimizeParams,
) -> Result<OptimizedPrompts> {
    let d = model.input_dim();
    let mut domain = domain_prompt.to_vec();
    let mut class = class_prompts.to_vec();
    let mut domain_state = AdamWState::new(params.domain, d);
    let mut class_states: Vec<AdamWState> = class
        .iter()
        .map(|_| AdamWState::new(params.class, d))
        .collect();
    for _ in 0..params.steps {
        let g = grad(model, batch, &domain, &class, source, params.weights)?;
        adamw_step(&mut domain_state, &mut domain, &g.domain)?;
        for ((state, prompt), gc) in class_states.iter_mut().zip(class.iter_mut()).zip(&g.class) {
            adamw_step(state, prompt, gc)?;
        }
    }
    let loss = loss(model, batch, &domain, &class, source, params.weights)?;
    Ok(OptimizedPrompts {
        domain,
        class,
        loss,
    })
}
