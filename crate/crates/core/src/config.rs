//! Run configuration: model, STFT, loss weights, training schedule and paths, read from TOML.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dsp::StftConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::metrics::{OracleSpec, SsnrConfig};
use crate::network::{MaskActivation, ModelConfig};
use crate::optim::AdamWConfig;

/// Which network is updated first within a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateOrder {
    #[default]
    DiscriminatorFirst,
    GeneratorFirst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: u64,
    pub lr_init: f64,
    pub lr_halving_period: u64,
    /// Discriminator learning rate; shares the generator's when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disc_lr_init: Option<f64>,
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    /// Training crop length in samples.
    pub segment_length: usize,
    pub grad_clip: f64,
    pub checkpoint_every: u64,
    /// Stop after this many steps even if epochs remain.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u64>,
    pub update_order: UpdateOrder,
    /// Skip discriminator updates and drop the metric term.
    pub disable_discriminator: bool,
    /// Evaluate on the test split every this many epochs; 0 disables evaluation during training.
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr_init: 5e-4,
            lr_halving_period: 30,
            disc_lr_init: None,
            optimizer: AdamWConfig::default(),
            batch_size: 4,
            segment_length: 32_000,
            grad_clip: 5.0,
            checkpoint_every: 1,
            max_steps: None,
            update_order: UpdateOrder::default(),
            disable_discriminator: false,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::Config(format!("train.{key}: {why}")));
        if !(self.lr_init > 0.0 && self.lr_init.is_finite()) {
            return bad("lr_init", "must be positive");
        }
        if let Some(lr) = self.disc_lr_init {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad("disc_lr_init", "must be positive");
            }
        }
        if self.lr_halving_period == 0 {
            return bad("lr_halving_period", "must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if self.segment_length == 0 {
            return bad("segment_length", "must be at least 1");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip", "must be positive");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every", "must be at least 1");
        }
        self.optimizer.validate("train.optimizer")
    }

    pub fn disc_lr(&self) -> f64 {
        self.disc_lr_init.unwrap_or(self.lr_init)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Checkpoint to resume training from.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub oracle: OracleSpec,
    pub model: ModelConfig,
    pub stft: StftConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub ssnr: SsnrConfig,
    pub paths: PathsConfig,
}


impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative paths inside it are resolved against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.paths.manifest, &mut cfg.paths.out_dir, &mut cfg.paths.resume]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.stft
            .validate()
            .map_err(|e| Error::Config(format!("stft: {e}")))?;
        if self.stft.n_bins() != self.model.n_freq {
            return Err(Error::Config(format!(
                "model.n_freq: must equal stft.n_fft / 2 + 1 = {}",
                self.stft.n_bins()
            )));
        }
        self.loss.validate()?;
        self.train.validate()?;
        self.ssnr.validate()
    }

    /// Extra checks before training starts.
    pub fn validate_for_training(&self) -> Result<()> {
        self.validate()?;
        if self.paths.manifest.is_none() {
            return Err(Error::Config("paths.manifest: required for training".into()));
        }
        if self.paths.out_dir.is_none() {
            return Err(Error::Config("paths.out_dir: required for training".into()));
        }
        Ok(())
    }

    /// True when no discriminator update or metric term is needed.
    pub fn discriminator_disabled(&self) -> bool {
        self.train.disable_discriminator || self.loss.gamma4 == 0.0
    }

    pub fn apply_ablation(&mut self, a: Ablation) {
        match a {
            Ablation::MagComp => self.model.disable_mag_compression = true,
            Ablation::LSigmoid => self.model.mask_activation = MaskActivation::PRelu,
            Ablation::PhaDec => self.model.disable_phase_decoder = true,
            Ablation::PhaLoss => self.loss.gamma5 = 0.0,
            Ablation::ComLoss => self.loss.gamma3 = 0.0,
            Ablation::MetricDisc => {
                self.loss.gamma4 = 0.0;
                self.train.disable_discriminator = true;
            }
        }
    }
}

/// The six ablation rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Ablation {
    MagComp,
    LSigmoid,
    PhaDec,
    PhaLoss,
    ComLoss,
    MetricDisc,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::MagComp,
        Ablation::LSigmoid,
        Ablation::PhaDec,
        Ablation::PhaLoss,
        Ablation::ComLoss,
        Ablation::MetricDisc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::MagComp => "w/o-mag-comp",
            Ablation::LSigmoid => "w/o-lsigmoid",
            Ablation::PhaDec => "w/o-phase-decoder",
            Ablation::PhaLoss => "w/o-phase-loss",
            Ablation::ComLoss => "w/o-complex-loss",
            Ablation::MetricDisc => "w/o-metric-disc",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    /// Accepts the canonical names plus the short forms `w/o-pha-dec`, `w/o-pha-loss`, `w/o-com-loss`.
    fn from_str(s: &str) -> Result<Self> {
        let norm = s
            .trim()
            .to_ascii_lowercase()
            .split(['_', ' ', '.', '-'])
            .filter(|p| !p.is_empty())
            .collect::<Vec<_>>()
            .join("-");
        let norm = norm.strip_prefix("wo-").map(|r| format!("w/o-{r}")).unwrap_or(norm);
        let found = match norm.trim_end_matches('-') {
            "w/o-mag-comp" => Ablation::MagComp,
            "w/o-lsigmoid" => Ablation::LSigmoid,
            "w/o-phase-decoder" | "w/o-pha-dec" => Ablation::PhaDec,
            "w/o-phase-loss" | "w/o-pha-loss" => Ablation::PhaLoss,
            "w/o-complex-loss" | "w/o-com-loss" => Ablation::ComLoss,
            "w/o-metric-disc" => Ablation::MetricDisc,
            _ => {
                let names: Vec<_> = Ablation::ALL.iter().map(|a| a.name()).collect();
                return Err(Error::Config(format!("ablation: unknown name {s:?}, expected one of {}", names.join(", "))));
            }
        };
        Ok(found)
    }
}
