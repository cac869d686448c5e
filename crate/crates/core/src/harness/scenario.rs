use std::path::Path;

use crate::error::{KffError, Result};
use crate::model::{FitOptions, ToyModel};
use crate::numerics::{self, SeededRng, Vector};
use crate::objective::SourceStats;
use crate::stream::{
    self, certify, generate_stream, make_separated, probe_intra_spread, quantize, DomainSpec,
    LabeledBatch, SeparationCertificate, StreamConfig, PROBE_BATCHES, SOURCE_DOMAIN,
};

use super::config::WorldConfig;

/// Sample count below which source statistics are considered noisy.
pub const RECOMMENDED_SOURCE_SAMPLES: usize = 300;

/// Statistics of prompt-free source features.
pub fn compute_source_stats(model: &ToyModel, samples: &[Vector]) -> Result<SourceStats> {
    if samples.len() < 2 {
        return Err(KffError::InsufficientData {
            needed: 2,
            got: samples.len(),
        });
    }
    let feats = samples
        .iter()
        .map(|x| model.features(x))
        .collect::<Result<Vec<_>>>()?;
    SourceStats::from_features(&feats)
}

fn quantized(mut xs: Vec<Vector>) -> Vec<Vector> {
    for x in &mut xs {
        for v in x.iter_mut() {
            *v = quantize(*v);
        }
    }
    xs
}

/// Source domain, fitted model and source statistics for one seed.
#[derive(Debug, Clone)]
pub struct World {
    pub base: DomainSpec,
    pub model: ToyModel,
    pub source_samples: Vec<Vector>,
    pub source_labels: Vec<usize>,
    pub source: SourceStats,
}

impl World {
    pub fn build(
        seed: u64,
        input_dim: usize,
        num_classes: usize,
        cfg: &WorldConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let rng = SeededRng::new(seed);
        let base = DomainSpec::source(
            input_dim,
            num_classes,
            cfg.class_spread,
            cfg.noise_std,
            &mut rng.fork(1),
        );
        let (fit_x, fit_y) = base.sample(cfg.fit_samples, &mut rng.fork(2));
        let model = ToyModel::fit_source(
            cfg.feature_dim,
            num_classes,
            &fit_x,
            &fit_y,
            seed,
            FitOptions {
                max_iters: cfg.fit_iters,
                ..FitOptions::default()
            },
        )?;
        let (src_x, source_labels) = base.sample(cfg.source_samples, &mut rng.fork(3));
        let source_samples = quantized(src_x);
        let source = compute_source_stats(&model, &source_samples)?;
        Ok(World {
            base,
            model,
            source_samples,
            source_labels,
            source,
        })
    }

    /// Error of the unadapted model on labelled samples.
    pub fn source_model_error(&self, samples: &[Vector], labels: &[usize]) -> Result<f64> {
        let probs = self.model.pseudo_labels(samples)?;
        Ok(super::metrics::error_rate(&probs, labels))
    }
}

/// Everything needed to run or verify one stream.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub model: ToyModel,
    pub source_samples: Vec<Vector>,
    pub source_labels: Vec<usize>,
    pub source: SourceStats,
    pub stream: Vec<LabeledBatch>,
    pub certificate: SeparationCertificate,
}

const SCENARIO_ATTEMPTS: u64 = 6;

impl Scenario {
    /// Draws a world and a stream whose domains are certified well separated.
    /// Stored values are rounded to the on-disk precision so a saved and
    /// reloaded scenario behaves identically.
    pub fn generate(cfg: &StreamConfig, world_cfg: &WorldConfig) -> Result<Self> {
        cfg.validate()?;
        let world = World::build(cfg.seed, cfg.input_dim, cfg.num_classes, world_cfg)?;
        let rng = SeededRng::new(cfg.seed);
        let mut sep_rng = rng.fork(4);
        let ids = cfg.distinct_domains();
        let calibrated = cfg.separation.is_none();
        let mut theta = match cfg.separation {
            Some(t) => t,
            None => {
                world_cfg.theta_factor
                    * probe_intra_spread(
                        &world.base,
                        cfg.batch_size,
                        PROBE_BATCHES * ids.len(),
                        &world.model,
                        &mut sep_rng,
                    )?
            }
        };

        // A calibrated θ that a larger sample shows to be too tight is
        // raised and the domains redrawn; a configured θ is never changed.
        let mut last_err = None;
        for attempt in 0..SCENARIO_ATTEMPTS {
            let domains: Vec<DomainSpec> = if ids.len() == 1 {
                let shift = sep_rng.gaussian_vec(cfg.input_dim, world_cfg.class_spread);
                vec![world.base.shifted(ids[0], shift)]
            } else {
                match make_separated(
                    cfg,
                    ids.len(),
                    theta,
                    &world.base,
                    &world.model,
                    &mut sep_rng,
                ) {
                    Ok((found, _)) => found
                        .into_iter()
                        .zip(&ids)
                        .map(|(d, id)| DomainSpec { id: *id, ..d })
                        .collect(),
                    Err(KffError::Certificate(msg)) if calibrated => {
                        last_err = Some(msg);
                        theta *= world_cfg.theta_factor;
                        continue;
                    }
                    Err(e) => return Err(e),
                }
            };
            let mut batches = generate_stream(cfg, &domains, &mut rng.fork(5 + attempt))?;
            for b in &mut batches {
                b.samples = quantized(std::mem::take(&mut b.samples));
            }
            let cert = certify(&batches, &world.model, theta, cfg.seed)?;
            if cert.is_valid() {
                return Ok(Scenario {
                    model: world.model,
                    source_samples: world.source_samples,
                    source_labels: world.source_labels,
                    source: world.source,
                    stream: batches,
                    certificate: cert,
                });
            }
            if calibrated && cert.max_intra >= theta {
                theta = world_cfg.theta_factor * cert.max_intra;
            }
            last_err = Some(format!("stream certificate failed: {cert:?}"));
        }
        Err(KffError::Certificate(format!(
            "no certified stream after {SCENARIO_ATTEMPTS} attempts: {}",
            last_err.unwrap_or_default()
        )))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| KffError::io(dir, e))?;
        stream::write_stream(&self.stream, &dir.join("stream.csv"))?;
        self.certificate.save(&dir.join("certificate.json"))?;
        self.model.save(&dir.join("model.json"))?;
        let source = LabeledBatch {
            index: 0,
            domain_id: SOURCE_DOMAIN,
            samples: self.source_samples.clone(),
            labels: self.source_labels.clone(),
        };
        stream::write_stream(std::slice::from_ref(&source), &dir.join("source.csv"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let model = ToyModel::load(&dir.join("model.json"))?;
        let stream = stream::read_stream(&dir.join("stream.csv"))?;
        let certificate = SeparationCertificate::load(&dir.join("certificate.json"))?;
        let source_batches = stream::read_stream(&dir.join("source.csv"))?;
        let source_samples: Vec<Vector> = source_batches
            .iter()
            .flat_map(|b| b.samples.clone())
            .collect();
        let source_labels: Vec<usize> = source_batches
            .iter()
            .flat_map(|b| b.labels.clone())
            .collect();
        for x in stream
            .iter()
            .flat_map(|b| &b.samples)
            .chain(&source_samples)
        {
            numerics::check_dim(model.input_dim(), x.len())?;
        }
        let source = compute_source_stats(&model, &source_samples)?;
        Ok(Scenario {
            model,
            source_samples,
            source_labels,
            source,
            stream,
            certificate,
        })
    }

    pub fn num_domains(&self) -> usize {
        let mut ids: Vec<_> = self.stream.iter().map(|b| b.domain_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }
}
