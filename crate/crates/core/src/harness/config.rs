use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{KffError, Result};
use crate::fusion::ClassUpdateMode;
use crate::objective::{AdamW, LossWeights, OptimizeParams};
use crate::pools::MatchParams;
use crate::stream::StreamConfig;

/// Every tunable constant of the adaptation loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    /// Domain match radius in key space.
    pub gamma_d: f64,
    /// Class match cosine threshold.
    pub gamma_c: f64,
    /// Entropy gate for class-pool updates.
    pub gamma_h: f64,
    /// Domain key update rate.
    pub alpha_d: f64,
    /// Class key update rate.
    pub alpha_c: f64,
    pub tau_d: f64,
    pub tau_c: f64,
    /// Weight of the entropy term.
    pub entropy_weight: f64,
    /// Weight of the std term inside the domain loss.
    pub alpha_std: f64,
    pub domain_capacity: usize,
    pub class_capacity: usize,
    pub lr_domain: f64,
    pub lr_class: f64,
    /// Optimizer steps per batch.
    pub steps: usize,
    pub init_scale: f64,
    pub softmax_over_all: bool,
    pub class_update: ClassUpdateMode,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            gamma_d: 25.0,
            gamma_c: 0.005,
            gamma_h: 2.0,
            alpha_d: 0.1,
            alpha_c: 0.1,
            tau_d: 3.0,
            tau_c: 1.0,
            entropy_weight: 3.0,
            alpha_std: 1.0,
            domain_capacity: 20,
            class_capacity: 100,
            lr_domain: 0.1,
            lr_class: 0.001,
            steps: 1,
            init_scale: 0.01,
            softmax_over_all: false,
            class_update: ClassUpdateMode::Sequential,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |name: &str, v: f64| Err(KffError::Config(format!("{name} out of range: {v}")));
        let positive = [
            ("gamma_d", self.gamma_d),
            ("tau_d", self.tau_d),
            ("tau_c", self.tau_c),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(name, v);
            }
        }
        let non_negative = [
            ("gamma_h", self.gamma_h),
            ("entropy_weight", self.entropy_weight),
            ("alpha_std", self.alpha_std),
            ("lr_domain", self.lr_domain),
            ("lr_class", self.lr_class),
            ("init_scale", self.init_scale),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(name, v);
            }
        }
        for (name, v) in [("alpha_d", self.alpha_d), ("alpha_c", self.alpha_c)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(name, v);
            }
        }
        if !(-1.0..=1.0).contains(&self.gamma_c) {
            return bad("gamma_c", self.gamma_c);
        }
        if self.domain_capacity == 0 || self.class_capacity == 0 {
            return Err(KffError::Config("pool capacities must be positive".into()));
        }
        Ok(())
    }

    pub fn domain_match(&self) -> MatchParams {
        MatchParams {
            threshold: self.gamma_d,
            temperature: self.tau_d,
            init_scale: self.init_scale,
            softmax_over_all: self.softmax_over_all,
        }
    }

    pub fn class_match(&self) -> MatchParams {
        MatchParams {
            threshold: self.gamma_c,
            temperature: self.tau_c,
            init_scale: self.init_scale,
            softmax_over_all: self.softmax_over_all,
        }
    }

    pub fn optimize(&self) -> OptimizeParams {
        OptimizeParams {
            steps: self.steps,
            domain: AdamW::with_lr(self.lr_domain),
            class: AdamW::with_lr(self.lr_class),
            weights: LossWeights {
                entropy: self.entropy_weight,
                std: self.alpha_std,
            },
        }
    }

    /// Copy with one field replaced, addressed by its JSON name.
    pub fn with_field(&self, name: &str, value: &serde_json::Value) -> Result<Self> {
        let mut obj = serde_json::to_value(self)?;
        let map = obj.as_object_mut().expect("struct serializes to an object");
        if !map.contains_key(name) {
            return Err(KffError::Config(format!("unknown hyperparameter {name:?}")));
        }
        map.insert(name.to_string(), value.clone());
        let hp: Hyperparams =
            serde_json::from_value(obj).map_err(|e| KffError::Config(format!("{name}: {e}")))?;
        hp.validate()?;
        Ok(hp)
    }
}

/// Parameters of the synthetic world a scenario is drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub feature_dim: usize,
    /// Std of the Gaussian class means.
    pub class_spread: f64,
    pub noise_std: f64,
    /// Labelled samples for fitting the head.
    pub fit_samples: usize,
    /// Gradient-descent iterations for the head.
    pub fit_iters: usize,
    /// Unlabelled samples for the source statistics.
    pub source_samples: usize,
    /// θ = this × the largest probe key distance, when no separation is set.
    pub theta_factor: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            feature_dim: 16,
            class_spread: 2.0,
            noise_std: 1.0,
            fit_samples: 400,
            fit_iters: 500,
            source_samples: 300,
            theta_factor: 1.5,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.fit_samples == 0 {
            return Err(KffError::Config(
                "feature_dim and fit_samples must be positive".into(),
            ));
        }
        if self.source_samples < 2 {
            return Err(KffError::Config("source_samples must be >= 2".into()));
        }
        if !(self.class_spread >= 0.0) || !(self.noise_std >= 0.0) || !(self.theta_factor > 1.0) {
            return Err(KffError::Config(
                "class_spread and noise_std must be >= 0, theta_factor > 1".into(),
            ));
        }
        Ok(())
    }
}

/// The single JSON config document.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub hyperparams: Hyperparams,
    pub stream: StreamConfig,
    pub world: WorldConfig,
    /// Set when the document names `gamma_d` explicitly; otherwise certified
    /// scenarios derive it from θ.
    #[serde(skip)]
    pub gamma_d_explicit: bool,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| KffError::Config(e.to_string()))?;
        let explicit = value
            .get("hyperparams")
            .and_then(|h| h.get("gamma_d"))
            .is_some();
        let mut cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| KffError::Config(e.to_string()))?;
        cfg.gamma_d_explicit = explicit;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| KffError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.hyperparams.validate()?;
        self.stream.validate()?;
        self.world.validate()
    }

    /// Domain radius to use against a certificate with threshold `theta`.
    pub fn effective_gamma_d(&self, theta: Option<f64>) -> f64 {
        match theta {
            Some(t) if !self.gamma_d_explicit => t / 2.0,
            _ => self.hyperparams.gamma_d,
        }
    }
}
