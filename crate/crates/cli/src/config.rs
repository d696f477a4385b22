use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use merfuse::prompt::{EncoderConfig, PromptConfig, PromptTrainConfig};
use merfuse::text_augment::HttpConfig;
use merfuse::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::Flags;

/// Everything a run depends on. Written next to any model a command produces so
/// the run can be repeated byte-for-byte.
///
/// Sections mirror the library config types; `train.seed` is the master seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub folds: usize,
    /// Self-training rounds after round 0.
    pub rounds: usize,
    /// Pseudo-labels absorbed per class and round.
    pub k: usize,
    pub jobs: usize,
    /// Manifest of the training data.
    pub data: Option<PathBuf>,
    /// Optional held-out manifest scored by the fold ensemble.
    pub test_data: Option<PathBuf>,
    pub out: PathBuf,
    /// Share of test samples that get one present modality zeroed.
    pub missing_fraction: f64,
    pub encoder: EncoderConfig,
    pub prompt: PromptConfig,
    pub prompt_train: PromptTrainConfig,
    pub backend: HttpConfig,
    pub mock: bool,
    pub max_in_flight: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            folds: 5,
            rounds: 10,
            k: 10,
            jobs: 1,
            data: None,
            test_data: None,
            out: PathBuf::from("merfuse-out"),
            missing_fraction: 0.0,
            encoder: EncoderConfig::default(),
            prompt: PromptConfig::default(),
            prompt_train: PromptTrainConfig::default(),
            backend: HttpConfig::default(),
            mock: false,
            max_in_flight: 4,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Loads `--config` (or defaults), applies flag overrides and validates.
    pub fn resolve(flags: &Flags) -> Result<Self> {
        let mut c = match &flags.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(seed) = flags.seed {
            c.train.seed = seed;
            c.prompt_train.seed = seed;
        }
        if let Some(j) = flags.jobs {
            c.jobs = j;
        }
        if let Some(o) = &flags.out {
            c.out = o.clone();
        }
        if let Some(d) = &flags.data {
            c.data = Some(d.clone());
        }
        if let Some(d) = &flags.test_data {
            c.test_data = Some(d.clone());
        }
        if let Some(r) = flags.rounds {
            c.rounds = r;
        }
        if let Some(k) = flags.k {
            c.k = k;
        }
        if let Some(p) = flags.modality_dropout {
            c.train.modality_dropout = p;
        }
        if let Some(f) = flags.folds {
            c.folds = f;
        }
        if let Some(f) = flags.missing_fraction {
            c.missing_fraction = f;
        }
        if flags.mock {
            c.mock = true;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.encoder.validate()?;
        self.prompt.validate()?;
        if self.folds < 2 {
            bail!("folds must be >= 2, got {}", self.folds);
        }
        if self.jobs == 0 {
            bail!("jobs must be >= 1");
        }
        if self.max_in_flight == 0 {
            bail!("max_in_flight must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.missing_fraction) {
            bail!("missing_fraction must lie in [0, 1], got {}", self.missing_fraction);
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn data(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .context("no dataset given: pass --data or set `data` in the config")
    }
}
