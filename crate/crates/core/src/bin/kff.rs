use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use kff::harness::{
    self, gradcheck, run_ctta, verify_lemmas, GradcheckConfig, Hyperparams, RunConfig, Scenario,
    RECOMMENDED_SOURCE_SAMPLES,
};
use kff::{KffError, Result};

#[derive(Parser)]
#[command(
    name = "kff",
    version,
    about = "Prompt-pool test-time adaptation on synthetic shift streams"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a certified scenario directory (stream, certificate, model, source samples).
    GenStream {
        #[arg(long)]
        seed: u64,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt over a stream and write metrics, a summary and pool snapshots.
    Run {
        #[arg(long)]
        seed: u64,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: ScenarioSource,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check the assignment and fusion guarantees on a certified stream.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: ScenarioSource,
        /// Print the full report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Compare analytic prompt gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        configs: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Run once per value of one hyperparameter.
    Sweep {
        #[arg(long)]
        seed: u64,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: ScenarioSource,
        /// Hyperparameter name as spelled in the config.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// JSON config with optional `hyperparams`, `stream` and `world` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Domain match radius; defaults to half the certified separation.
    #[arg(long = "gamma-d")]
    gamma_d: Option<f64>,
}

#[derive(Args)]
struct ScenarioSource {
    /// Scenario directory written by `gen-stream`; generated from the seed
    /// when absent.
    #[arg(long)]
    scenario: Option<PathBuf>,
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(g) = common.gamma_d {
        cfg.hyperparams.gamma_d = g;
        cfg.gamma_d_explicit = true;
        cfg.hyperparams.validate()?;
    }
    Ok(cfg)
}

fn scenario(cfg: &RunConfig, source: &ScenarioSource, seed: u64) -> Result<Scenario> {
    let sc = match &source.scenario {
        Some(dir) => Scenario::load(dir)?,
        None => {
            let mut stream = cfg.stream.clone();
            stream.seed = seed;
            Scenario::generate(&stream, &cfg.world)?
        }
    };
    if sc.stream.is_empty() {
        eprintln!("notice: stream contains zero batches");
    }
    if sc.source.sample_count < RECOMMENDED_SOURCE_SAMPLES {
        eprintln!(
            "warning: source statistics from {} samples (recommended >= {RECOMMENDED_SOURCE_SAMPLES})",
            sc.source.sample_count
        );
    }
    Ok(sc)
}

fn effective_hyperparams(cfg: &RunConfig, sc: &Scenario) -> Hyperparams {
    Hyperparams {
        gamma_d: cfg.effective_gamma_d(Some(sc.certificate.theta)),
        ..cfg.hyperparams.clone()
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| KffError::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_run(
    out: &Path,
    prefix: &str,
    outcome: &harness::RunOutcome,
    snapshots: bool,
) -> Result<()> {
    outcome
        .metrics
        .write_csv(&out.join(format!("{prefix}metrics.csv")))?;
    outcome
        .metrics
        .summary()
        .save(&out.join(format!("{prefix}summary.json")))?;
    if snapshots {
        let dir = out.join("pools");
        create_dir(&dir)?;
        for snap in &outcome.snapshots {
            let idx = snap.batch_idx.unwrap_or(0);
            snap.save(&dir.join(format!("batch_{idx:06}.json")))?;
        }
        outcome.engine.snapshot().save(&dir.join("final.json"))?;
    }
    Ok(())
}

fn parse_value(raw: &str) -> serde_json::Value {
    serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()))
}

fn execute(command: Command) -> Result<bool> {
    match command {
        Command::GenStream { seed, common, out } => {
            let cfg = load_config(&common)?;
            let mut stream = cfg.stream.clone();
            stream.seed = seed;
            let sc = Scenario::generate(&stream, &cfg.world)?;
            sc.save(&out)?;
            let c = &sc.certificate;
            println!(
                "wrote {} batches to {}; theta {:.6} max_intra {:.6} min_inter {:.6}",
                sc.stream.len(),
                out.display(),
                c.theta,
                c.max_intra,
                c.min_inter
            );
            Ok(true)
        }
        Command::Run {
            seed,
            common,
            source,
            out,
        } => {
            let cfg = load_config(&common)?;
            let sc = scenario(&cfg, &source, seed)?;
            let hp = effective_hyperparams(&cfg, &sc);
            let outcome = run_ctta(&sc.model, &sc.stream, &hp, &sc.source, seed)?;
            create_dir(&out)?;
            write_run(&out, "", &outcome, true)?;
            let s = outcome.metrics.summary();
            println!(
                "{} batches, mean error {:.4}, domain pool {}, class pool {}",
                s.batches, s.overall_error, s.final_pool_d_size, s.final_pool_c_size
            );
            Ok(true)
        }
        Command::Verify {
            seed,
            common,
            source,
            json,
        } => {
            let cfg = load_config(&common)?;
            let sc = scenario(&cfg, &source, seed)?;
            let hp = effective_hyperparams(&cfg, &sc);
            let report = verify_lemmas(
                &sc.stream,
                &sc.certificate,
                &hp,
                &sc.model,
                &sc.source,
                seed,
            )?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            }
            for h in &report.hypothesis_violations {
                println!("hypothesis violated: {h}");
            }
            for v in &report.violations {
                println!("violation: {}", serde_json::to_string(v)?);
            }
            println!(
                "{}: {} domains, {} batches, {} domain fissions, {} fusions, {} violations",
                if report.passed { "PASS" } else { "FAIL" },
                report.num_domains,
                report.batches,
                report.domain_fissions,
                report.domain_fusions,
                report.violations.len()
            );
            Ok(report.passed)
        }
        Command::Gradcheck {
            seed,
            configs,
            step,
            tolerance,
        } => {
            let report = gradcheck(&GradcheckConfig {
                configs,
                step,
                tolerance,
                seed,
                ..GradcheckConfig::default()
            })?;
            println!(
                "max relative error {:.3e} over {} configurations ({} excluded near a kink); tolerance {tolerance:e}",
                report.max_rel_error,
                report.cases.len(),
                report.excluded
            );
            Ok(report.passed)
        }
        Command::Sweep {
            seed,
            common,
            source,
            param,
            values,
            out,
        } => {
            let cfg = load_config(&common)?;
            let sc = scenario(&cfg, &source, seed)?;
            let hp = effective_hyperparams(&cfg, &sc);
            let values: Vec<serde_json::Value> = values.iter().map(|v| parse_value(v)).collect();
            let runs = harness::sweep(
                &sc.model, &sc.stream, &hp, &sc.source, seed, &param, &values,
            )?;
            create_dir(&out)?;
            for (raw, (_, outcome)) in values_raw(&values).iter().zip(&runs) {
                write_run(&out, &format!("{param}_{raw}_"), outcome, false)?;
                println!(
                    "{param}={raw}: mean error {:.4}",
                    outcome.metrics.summary().overall_error
                );
            }
            Ok(true)
        }
    }
}

fn values_raw(values: &[serde_json::Value]) -> Vec<String> {
    values
        .iter()
        .map(|v| match v {
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        })
        .collect()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
