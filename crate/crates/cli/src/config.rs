//! Run configuration file (TOML). Unknown keys are rejected; every omitted
//! key takes its default, and the fully resolved form is what gets dumped
//! next to the checkpoint.

use std::fs;
use std::path::{Path, PathBuf};

use pe_retrieval::encoder::EncoderConfig;
use pe_retrieval::peft::{PeConfig, PeMethod};
use pe_retrieval::retrievers::{LateConfig, ModelSpec, RetrieverKind};
use pe_retrieval::trainer::TrainConfig;
use pe_retrieval::{Error, Result};
use serde::{Deserialize, Serialize};

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_retriever() -> RetrieverKind {
    RetrieverKind::Dense
}

fn default_pe() -> PeConfig {
    PeConfig::new(PeMethod::FineTune)
}

/// `[train]` without the seed, which lives at the top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default = "TrainSection::default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "TrainSection::default_epochs")]
    pub epochs: usize,
    #[serde(default = "TrainSection::default_warmup")]
    pub warmup_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
}

impl TrainSection {
    fn default_batch_size() -> usize {
        TrainConfig::default().batch_size
    }
    fn default_epochs() -> usize {
        TrainConfig::default().epochs
    }
    fn default_warmup() -> f64 {
        TrainConfig::default().warmup_fraction
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            learning_rate: d.learning_rate,
            batch_size: d.batch_size,
            epochs: d.epochs,
            warmup_fraction: d.warmup_fraction,
            grad_clip: d.grad_clip,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_name: String,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_retriever")]
    pub retriever: RetrieverKind,
    pub train_file: PathBuf,
    /// Built from the training texts when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_file: Option<PathBuf>,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default = "default_pe")]
    pub pe: PeConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub late: LateConfig,
}

/// Command-line overrides; each one beats the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub run_name: Option<String>,
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub method: Option<PeMethod>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        // an unreadable config is a usage problem, not a runtime failure
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = &o.run_name {
            self.run_name = v.clone();
        }
        if let Some(v) = &o.output_dir {
            self.output_dir = v.clone();
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.method {
            self.pe.method = v;
        }
        if let Some(v) = o.epochs {
            self.train.epochs = v;
        }
        if let Some(v) = o.batch_size {
            self.train.batch_size = v;
        }
        if let Some(v) = o.learning_rate {
            self.train.learning_rate = Some(v);
        }
    }

    /// Fills method- and shape-dependent defaults and validates everything.
    pub fn resolve(mut self) -> Result<Self> {
        if self.run_name.is_empty() || self.run_name.contains(['/', '\\']) {
            return Err(Error::Config("run_name must be a non-empty plain name".into()));
        }
        self.encoder.validate()?;
        self.pe = self.pe.resolved(self.encoder.d_model);
        self.pe.validate(&self.encoder)?;
        self.train.learning_rate = Some(
            self.train
                .learning_rate
                .unwrap_or_else(|| pe_retrieval::trainer::default_learning_rate(self.pe.method)),
        );
        self.train_config().validate()?;
        Ok(self)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            warmup_fraction: self.train.warmup_fraction,
            seed: self.seed,
            grad_clip: self.train.grad_clip,
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            kind: self.retriever,
            encoder: self.encoder.clone(),
            pe: self.pe.clone(),
            late: self.late.clone(),
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_name)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Internal(e.to_string()))
    }
}

/// Fixed run-directory layout: `checkpoint/`, `logs/`, `dumps/`, `runs/`,
/// `reports/`.
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: PathBuf) -> Self {
        RunLayout { root }
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint").join("model.ckpt")
    }

    pub fn loss_log(&self) -> PathBuf {
        self.root.join("logs").join("loss.csv")
    }

    pub fn effective_config(&self) -> PathBuf {
        self.root.join("dumps").join("effective_config.toml")
    }

    pub fn create(&self) -> Result<()> {
        for d in ["checkpoint", "logs", "dumps", "runs", "reports"] {
            let p = self.root.join(d);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}
