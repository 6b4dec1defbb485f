//! Experiment configuration: a TOML file covering the whole pipeline,
//! with `desk` and `paper` profiles and run manifests.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::SyntheticTaskSpec;
use crate::error::{LanmtError, Result};
use crate::model::LaNMTConfig;
use crate::optim::TrainOptions;
use crate::teacher::TeacherConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub train_corpus: PathBuf,
    pub eval_corpus: PathBuf,
    pub vocab: PathBuf,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSection {
    pub hidden: usize,
    pub ff: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub max_steps: usize,
    pub label_smoothing: f64,
    pub shared_embedding: bool,
    pub length_normalize_beam: bool,
    pub beam_size: usize,
}

impl Default for TeacherSection {
    fn default() -> Self {
        let base = TeacherConfig::desk(0);
        Self {
            hidden: base.hidden,
            ff: base.ff,
            encoder_layers: base.encoder_layers,
            decoder_layers: base.decoder_layers,
            heads: base.heads,
            dropout: base.dropout,
            max_steps: base.max_steps,
            label_smoothing: base.label_smoothing,
            shared_embedding: base.shared_embedding,
            length_normalize_beam: base.length_normalize_beam,
            beam_size: 3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub latent_dim: usize,
    pub hidden: usize,
    pub ff: usize,
    pub prior_layers: usize,
    pub decoder_layers: usize,
    pub posterior_layers: usize,
    pub heads: usize,
    pub max_offset: usize,
    pub dropout: f64,
    /// Budget-annealing horizon M; also the NAR training step count.
    pub max_steps: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let base = LaNMTConfig::desk(0);
        Self {
            latent_dim: base.latent_dim,
            hidden: base.hidden,
            ff: base.ff,
            prior_layers: base.prior_layers,
            decoder_layers: base.decoder_layers,
            posterior_layers: base.posterior_layers,
            heads: base.heads,
            max_offset: base.max_offset,
            dropout: base.dropout,
            max_steps: base.max_steps,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub batch_size: usize,
    pub warmup: usize,
    pub lr_factor: f64,
    pub grad_clip: f64,
    pub log_every: usize,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let base = TrainOptions::default();
        Self {
            batch_size: base.batch_size,
            warmup: base.warmup,
            lr_factor: base.lr_factor,
            grad_clip: base.grad_clip,
            log_every: base.log_every,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceSection {
    /// Refinement iterations T.
    pub steps: usize,
    /// Latent-search candidate count N.
    pub candidates: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for InferenceSection {
    fn default() -> Self {
        Self { steps: 1, candidates: 10, temperature: 0.5, seed: 1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    /// Monte Carlo ELBO samples per instance.
    pub elbo_samples: usize,
    pub bench_warmup: usize,
    pub bench_repeats: usize,
    /// Candidate counts swept by the trade-off report.
    pub tradeoff_candidates: Vec<usize>,
    /// Cap on evaluation pairs (0 = use all).
    pub limit: usize,
    /// Emit SVG charts alongside the CSV tables.
    pub charts: bool,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            elbo_samples: 20,
            bench_warmup: 1,
            bench_repeats: 3,
            tradeoff_candidates: vec![1, 5, 10],
            limit: 0,
            charts: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed for data generation and training.
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub paths: PathsSection,
    /// Synthetic task used by gen-data; optional for external corpora.
    #[serde(default)]
    pub task: Option<SyntheticTaskSpec>,
    #[serde(default)]
    pub teacher: TeacherSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub inference: InferenceSection,
    #[serde(default)]
    pub evaluation: EvaluationSection,
}

fn default_seed() -> u64 {
    1
}

impl ExperimentConfig {
    /// Tiny profile for synthetic desk-scale experiments.
    pub fn desk(output_dir: &Path) -> Self {
        Self {
            seed: 1,
            paths: PathsSection {
                train_corpus: output_dir.join("train.tsv"),
                eval_corpus: output_dir.join("eval.tsv"),
                vocab: output_dir.join("vocab.txt"),
                output_dir: output_dir.to_path_buf(),
            },
            task: Some(SyntheticTaskSpec::expand_contract(3, 10, 0.35, 1)),
            teacher: TeacherSection::default(),
            model: ModelSection::default(),
            schedule: ScheduleSection::default(),
            inference: InferenceSection::default(),
            evaluation: EvaluationSection::default(),
        }
    }

    /// Full-scale profile mirroring the reference hyperparameters; not
    /// exercised by the test suite.
    pub fn paper(output_dir: &Path) -> Self {
        let teacher = TeacherConfig::paper(0);
        let model = LaNMTConfig::paper(0);
        let mut config = Self::desk(output_dir);
        config.teacher = TeacherSection {
            hidden: teacher.hidden,
            ff: teacher.ff,
            encoder_layers: teacher.encoder_layers,
            decoder_layers: teacher.decoder_layers,
            heads: teacher.heads,
            dropout: teacher.dropout,
            max_steps: teacher.max_steps,
            label_smoothing: teacher.label_smoothing,
            shared_embedding: teacher.shared_embedding,
            length_normalize_beam: teacher.length_normalize_beam,
            beam_size: 3,
        };
        config.model = ModelSection {
            latent_dim: model.latent_dim,
            hidden: model.hidden,
            ff: model.ff,
            prior_layers: model.prior_layers,
            decoder_layers: model.decoder_layers,
            posterior_layers: model.posterior_layers,
            heads: model.heads,
            max_offset: model.max_offset,
            dropout: model.dropout,
            max_steps: model.max_steps,
        };
        config.task = None;
        config
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LanmtError::Config(format!(
            "cannot read config {}: {e}",
            path.display()
        )))?;
        let config: Self = toml::from_str(&text)
            .map_err(|e| LanmtError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let text = toml::to_string_pretty(self)
            .map_err(|e| LanmtError::Config(format!("serialize config: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Field-level validation of the numeric invariants. Path existence
    /// is checked per command against the inputs it actually consumes.
    pub fn validate(&self) -> Result<()> {
        if self.inference.temperature <= 0.0 {
            return Err(LanmtError::Config(format!(
                "inference.temperature = {} must be > 0",
                self.inference.temperature
            )));
        }
        if self.model.max_steps < 2 {
            return Err(LanmtError::Config(format!(
                "model.max_steps = {} must be >= 2 (budget annealing horizon M)",
                self.model.max_steps
            )));
        }
        if self.inference.candidates == 0 {
            return Err(LanmtError::Config("inference.candidates must be >= 1".into()));
        }
        if self.teacher.beam_size == 0 {
            return Err(LanmtError::Config("teacher.beam_size must be >= 1".into()));
        }
        if self.schedule.batch_size == 0 {
            return Err(LanmtError::Config("schedule.batch_size must be >= 1".into()));
        }
        if self.evaluation.bench_repeats == 0 {
            return Err(LanmtError::Config("evaluation.bench_repeats must be >= 1".into()));
        }
        if self.evaluation.elbo_samples == 0 {
            return Err(LanmtError::Config("evaluation.elbo_samples must be >= 1".into()));
        }
        if let Some(task) = &self.task {
            task.validate()?;
        }
        Ok(())
    }

    pub fn teacher_config(&self, vocab_size: usize) -> TeacherConfig {
        TeacherConfig {
            vocab_size,
            hidden: self.teacher.hidden,
            ff: self.teacher.ff,
            encoder_layers: self.teacher.encoder_layers,
            decoder_layers: self.teacher.decoder_layers,
            heads: self.teacher.heads,
            dropout: self.teacher.dropout,
            max_steps: self.teacher.max_steps,
            label_smoothing: self.teacher.label_smoothing,
            shared_embedding: self.teacher.shared_embedding,
            length_normalize_beam: self.teacher.length_normalize_beam,
        }
    }

    pub fn lanmt_config(&self, vocab_size: usize) -> LaNMTConfig {
        LaNMTConfig {
            vocab_size,
            latent_dim: self.model.latent_dim,
            hidden: self.model.hidden,
            ff: self.model.ff,
            prior_layers: self.model.prior_layers,
            decoder_layers: self.model.decoder_layers,
            posterior_layers: self.model.posterior_layers,
            heads: self.model.heads,
            max_offset: self.model.max_offset,
            dropout: self.model.dropout,
            max_steps: self.model.max_steps,
            shared_embedding: self.teacher.shared_embedding,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            batch_size: self.schedule.batch_size,
            warmup: self.schedule.warmup,
            lr_factor: self.schedule.lr_factor,
            grad_clip: self.schedule.grad_clip,
            log_every: self.schedule.log_every,
        }
    }

    /// SHA-256 of the canonical TOML serialization.
    pub fn hash(&self) -> Result<String> {
        let text = toml::to_string(self)
            .map_err(|e| LanmtError::Config(format!("serialize config: {e}")))?;
        let digest = Sha256::digest(text.as_bytes());
        Ok(format!("{digest:x}"))
    }

    /// Errors unless `path` exists, naming the command that produces it.
    pub fn require_artifact(path: &Path, artifact: &str, command: &str) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(LanmtError::MissingArtifact {
                artifact: artifact.to_string(),
                path: path.display().to_string(),
                command: command.to_string(),
            })
        }
    }
}

/// Reproducibility record written next to every command's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub wall_time_s: f64,
    pub unix_time_s: u64,
}

impl Manifest {
    pub fn new(command: &str, config: &ExperimentConfig, seed: u64, wall_time_s: f64) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            config_hash: config.hash()?,
            seed,
            version: format!("lanmt-v{}", env!("CARGO_PKG_VERSION")),
            wall_time_s,
            unix_time_s: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        })
    }

    /// Writes `<output_dir>/manifests/<command>.json`.
    pub fn write(&self, output_dir: &Path) -> Result<PathBuf> {
        let dir = output_dir.join("manifests");
        std::fs::create_dir_all(&dir)?;
        let path = dir.join(format!("{}.json", self.command));
        std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }
}
