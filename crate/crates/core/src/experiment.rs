//! Experiment configuration, multi-seed runs, ablations and run
//! directories.
//!
//! A run directory is `<output_dir>/<config hash>/` holding `config.json`,
//! `summary.json` and one `seed-<s>/` directory per seed with the report,
//! selection log, histograms, loss curve, correlations and model.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ada::{
    default_round_plans, run_ada, write_selection_log, AblationSwitches, AdaConfig, AdaOutcome,
};
use crate::domain::{generate_domain_pair, split_pools, Dataset, DomainShift, DomainSpec};
use crate::enn::{write_loss_curve, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::evidence::QuantificationMode;
use crate::loss::LossConfig;
use crate::metrics::{
    dataset_correlations, export_uncertainty_histograms, mean_std, rank_class_pairs,
    write_correlations_csv, write_histograms_csv, ClassSource,
};

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable capping the number of seeds run in parallel.
pub const WORKERS_ENV: &str = "EVID_NUM_WORKERS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    /// Zero-based epochs at whose start a sampling round runs.
    pub epochs: Vec<usize>,
    pub kappa: usize,
    /// Total oracle budget as a fraction of `|T|`.
    pub budget_fraction: f64,
    /// Round `k` pseudo-labels `k · certain_fraction_per_round · |T|`
    /// samples.
    pub certain_fraction_per_round: f64,
    #[serde(default)]
    pub auroc_epoch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub domain: DomainSpec,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub switches: AblationSwitches,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub initial_labeled_fraction: f64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    /// The desk-scale synthetic setup: five classes on a ring in the plane,
    /// 2000 samples per domain, a rotated and translated target, a 5% budget
    /// over five rounds.
    pub fn desk_scale() -> Self {
        let num_classes = 5;
        let shift = DomainShift {
            translation: vec![0.5, -0.5],
            rotation_degrees: 25.0,
            noise_multiplier: 1.2,
        };
        Self {
            schema_version: SCHEMA_VERSION,
            domain: DomainSpec::ring(num_classes, 2, 2000, 3.0, 0.6, shift, 0),
            train: TrainConfig {
                epochs: 24,
                hidden_layers: vec![32, 32],
                ..TrainConfig::default()
            },
            loss: LossConfig {
                lambda_e: 10.0,
                ..LossConfig::for_classes(num_classes, QuantificationMode::Variance)
            },
            sampling: SamplingConfig {
                epochs: vec![10, 12, 14, 16, 18],
                kappa: 10,
                budget_fraction: 0.05,
                certain_fraction_per_round: 0.01,
                auroc_epoch: None,
            },
            switches: AblationSwitches::ALL,
            seeds: (0..10).collect(),
            initial_labeled_fraction: 0.0,
            output_dir: default_output_dir(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Every offending field, or an empty list.
    pub fn invalid_fields(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            bad.push(format!(
                "schema_version must be {SCHEMA_VERSION} (got {})",
                self.schema_version
            ));
        }
        bad.extend(self.domain.invalid_fields());
        bad.extend(self.train.invalid_fields());
        bad.extend(self.loss.invalid_fields());
        let s = &self.sampling;
        if s.epochs.iter().any(|&e| e >= self.train.epochs) {
            bad.push("sampling.epochs must all be < train.epochs".into());
        }
        if s.epochs.windows(2).any(|w| w[0] >= w[1]) {
            bad.push("sampling.epochs must be strictly increasing".into());
        }
        if s.kappa == 0 {
            bad.push("sampling.kappa must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&s.budget_fraction) {
            bad.push("sampling.budget_fraction must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&s.certain_fraction_per_round) {
            bad.push("sampling.certain_fraction_per_round must lie in [0, 1]".into());
        }
        if s.auroc_epoch.is_some_and(|e| e >= self.train.epochs) {
            bad.push("sampling.auroc_epoch must be < train.epochs".into());
        }
        if !(0.0..=1.0).contains(&self.initial_labeled_fraction) {
            bad.push("initial_labeled_fraction must lie in [0, 1]".into());
        }
        if self.seeds.is_empty() {
            bad.push("seeds must not be empty".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            bad.push("seeds must be distinct".into());
        }
        bad
    }

    pub fn validate(&self) -> Result<()> {
        let bad = self.invalid_fields();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }

    pub fn with_mode(mut self, mode: QuantificationMode) -> Self {
        self.loss.mode = mode;
        self
    }

    /// First 12 hex digits of the SHA-256 of the config JSON, ignoring the
    /// output directory.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let digest = Sha256::digest(serde_json::to_vec(&c)?);
        Ok(digest.iter().take(6).map(|b| format!("{b:02x}")).collect())
    }

    pub fn run_dir(&self) -> Result<PathBuf> {
        Ok(self.output_dir.join(self.hash()?))
    }

    /// Config for one seed: the seed drives both data generation and
    /// training.
    pub fn for_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.domain.seed = seed;
        c.train.seed = seed;
        c
    }
}

/// Everything one seed produced.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub source: Dataset,
    pub target: Dataset,
    pub outcome: AdaOutcome,
}

/// Generates the domain pair for `seed`, trains and samples.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    cfg.validate()?;
    let c = cfg.for_seed(seed);
    let (source, target) = generate_domain_pair(&c.domain)?;
    let pool = split_pools(
        source.clone(),
        target.clone(),
        c.initial_labeled_fraction,
        c.sampling.budget_fraction,
    )?;
    let plans = default_round_plans(
        pool.budget_remaining(),
        c.sampling.epochs.len(),
        c.sampling.kappa,
        c.sampling.certain_fraction_per_round,
        target.len(),
    );
    let ada = AdaConfig {
        train: c.train.clone(),
        loss: c.loss.clone(),
        schedule: c.sampling.epochs.clone(),
        plans,
        switches: c.switches,
        auroc_epoch: c.sampling.auroc_epoch,
    };
    let model = Trainer::init_model(&c.train, source.feature_dim, source.num_classes)?;
    let outcome = run_ada(model, pool, &source, &target, &ada)?;
    Ok(SeedRun {
        seed,
        source,
        target,
        outcome,
    })
}

fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(vec![format!("{WORKERS_ENV} must be a positive integer")]))?;
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))
}

/// Runs every configured seed, in parallel up to the worker cap. Results
/// are in seed order.
pub fn run_seeds(cfg: &ExperimentConfig) -> Result<Vec<SeedRun>> {
    cfg.validate()?;
    worker_pool()?.install(|| cfg.seeds.par_iter().map(|&s| run_seed(cfg, s)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub final_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub config_hash: String,
    pub mode: QuantificationMode,
    pub switches: AblationSwitches,
    pub runs: Vec<SeedSummary>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

impl ExperimentSummary {
    fn new(cfg: &ExperimentConfig, runs: &[SeedRun]) -> Result<Self> {
        let runs: Vec<SeedSummary> = runs
            .iter()
            .map(|r| SeedSummary {
                seed: r.seed,
                final_accuracy: r.outcome.report.final_accuracy,
            })
            .collect();
        let acc: Vec<f64> = runs.iter().map(|r| r.final_accuracy).collect();
        let (mean_accuracy, std_accuracy) = mean_std(&acc);
        Ok(Self {
            config_hash: cfg.hash()?,
            mode: cfg.loss.mode,
            switches: cfg.switches,
            runs,
            mean_accuracy,
            std_accuracy,
        })
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Writes one seed's artifacts into `dir`.
pub fn write_seed_outputs(dir: &Path, run: &SeedRun, mode: QuantificationMode) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let out = &run.outcome;
    write_json(&dir.join("report.json"), &out.report)?;
    write_json(&dir.join("model.json"), &out.model)?;
    write_selection_log(create(&dir.join("selection_log.csv"))?, &out.selection_log)?;
    write_loss_curve(create(&dir.join("loss_curve.csv"))?, &out.report.losses)?;
    let rows = export_uncertainty_histograms(&out.model, &run.source, &run.target, mode)?;
    write_histograms_csv(create(&dir.join("histograms.csv"))?, &rows)?;
    let pairs = rank_class_pairs(&dataset_correlations(&out.model, &run.target, ClassSource::Labels)?);
    write_correlations_csv(create(&dir.join("correlations.csv"))?, &pairs)?;
    Ok(())
}

/// Runs all seeds and writes the run directory. Returns the summary and
/// the directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(ExperimentSummary, PathBuf)> {
    let runs = run_seeds(cfg)?;
    let dir = cfg.run_dir()?;
    std::fs::create_dir_all(&dir)?;
    write_json(&dir.join("config.json"), cfg)?;
    for run in &runs {
        write_seed_outputs(&dir.join(format!("seed-{}", run.seed)), run, cfg.loss.mode)?;
    }
    let summary = ExperimentSummary::new(cfg, &runs)?;
    write_json(&dir.join("summary.json"), &summary)?;
    Ok((summary, dir))
}

/// The five ablation rows: source-only, +UG, +US, +UG+US, +UG+US+CS.
pub fn ablation_switches() -> [AblationSwitches; 5] {
    let row = |guidance, uncertainty_sampling, certainty_sampling| AblationSwitches {
        guidance,
        uncertainty_sampling,
        certainty_sampling,
        class_balanced: false,
    };
    [
        row(false, false, false),
        row(true, false, false),
        row(false, true, false),
        row(true, true, false),
        row(true, true, true),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub switches: AblationSwitches,
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

/// Final target accuracy per seed for each switch combination, without
/// writing files.
pub fn ablation_rows(cfg: &ExperimentConfig, rows: &[AblationSwitches]) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let pool = worker_pool()?;
    let jobs: Vec<(usize, u64)> = (0..rows.len())
        .flat_map(|r| cfg.seeds.iter().map(move |&s| (r, s)))
        .collect();
    let acc: Vec<f64> = pool.install(|| {
        jobs.par_iter()
            .map(|&(r, s)| {
                let mut c = cfg.clone();
                c.switches = rows[r];
                Ok(run_seed(&c, s)?.outcome.report.final_accuracy)
            })
            .collect::<Result<_>>()
    })?;
    Ok(rows
        .iter()
        .zip(acc.chunks(cfg.seeds.len()))
        .map(|(sw, a)| {
            let (mean_accuracy, std_accuracy) = mean_std(a);
            AblationRow {
                label: sw.label(),
                switches: *sw,
                accuracies: a.to_vec(),
                mean_accuracy,
                std_accuracy,
            }
        })
        .collect())
}

/// Runs the ablation and writes `ablation.json` and `ablation.csv` into the
/// run directory.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<(Vec<AblationRow>, PathBuf)> {
    let rows = ablation_rows(cfg, &ablation_switches())?;
    let dir = cfg.run_dir()?;
    std::fs::create_dir_all(&dir)?;
    write_json(&dir.join("config.json"), cfg)?;
    write_json(&dir.join("ablation.json"), &rows)?;
    let mut w = csv::Writer::from_writer(create(&dir.join("ablation.csv"))?);
    w.write_record(["row", "guidance", "uncertainty_sampling", "certainty_sampling", "mean_accuracy", "std_accuracy"])?;
    for r in &rows {
        w.serialize((
            &r.label,
            r.switches.guidance,
            r.switches.uncertainty_sampling,
            r.switches.certainty_sampling,
            r.mean_accuracy,
            r.std_accuracy,
        ))?;
    }
    w.flush()?;
    Ok((rows, dir))
}
