//! Experiment configuration: one TOML file per run.
//!
//! The canonical text is the TOML serialization of the parsed value, so two
//! files that differ only in layout, comments or key order hash the same.

use std::fs;
use std::path::{Path, PathBuf};

use mjp_core::attack::{AttackConfig, Setting};
use mjp_core::aux_loss::{AuxConfig, AuxKind};
use mjp_core::mjp::ShuffleSpec;
use mjp_core::model::{Mode, ModelConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LabError, LabResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_warmup")]
    pub warmup_frac: f64,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
}

fn default_weight_decay() -> f64 {
    0.05
}
fn default_warmup() -> f64 {
    0.1
}
fn default_clip() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Inference-time shuffle ratios for the robustness sweep.
    #[serde(default = "default_gammas")]
    pub gammas: Vec<f64>,
    /// Seed of the inference-time shuffle stream, independent of training.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eval_batch")]
    pub batch_size: usize,
}

fn default_gammas() -> Vec<f64> {
    vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5]
}
fn default_eval_batch() -> usize {
    64
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            gammas: default_gammas(),
            seed: 0,
            batch_size: default_eval_batch(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    /// Validation samples attacked, one client step each.
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_settings")]
    pub settings: Vec<Setting>,
    /// Client shuffle ratios for settings b and c; empty means the training ratio.
    #[serde(default)]
    pub gammas: Vec<f64>,
}

fn default_samples() -> usize {
    4
}
fn default_settings() -> Vec<Setting> {
    vec![Setting::A, Setting::B, Setting::C]
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            samples: default_samples(),
            settings: default_settings(),
            gammas: Vec::new(),
        }
    }
}

/// Where samples come from. Synthetic generators are seeded from the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    SyntheticText { train: usize, val: usize },
    SyntheticVision { train: usize, val: usize, patch: usize },
    Text { train: PathBuf, val: PathBuf },
    Images { train: PathBuf, val: PathBuf, patch: usize },
}

impl DataConfig {
    pub fn patch(&self) -> Option<usize> {
        match self {
            DataConfig::SyntheticVision { patch, .. } | DataConfig::Images { patch, .. } => Some(*patch),
            _ => None,
        }
    }

    fn mode(&self) -> Mode {
        match self {
            DataConfig::SyntheticText { .. } | DataConfig::Text { .. } => Mode::Text,
            _ => Mode::Vision,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Output root used when neither the command line nor the environment names one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub shuffle: ShuffleSpec,
    #[serde(default)]
    pub aux: AuxConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackConfig>,
    #[serde(default)]
    pub campaign: CampaignConfig,
    pub data: DataConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> LabResult<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> LabResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    /// SHA-256 of the canonical text, hex encoded. The output directory does not take part.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        hex::encode(Sha256::digest(c.canonical().as_bytes()))
    }

    pub fn validate(&self) -> LabResult<()> {
        self.model.validate()?;
        self.shuffle.validate()?;
        self.aux.validate()?;
        if self.aux.kind != AuxKind::None && !self.model.localization_head {
            return Err(LabError::Config("localization losses need model.localization_head = true".into()));
        }
        if self.data.mode() != self.model.mode {
            return Err(LabError::Config("data kind does not match model.mode".into()));
        }
        if let Some(p) = self.data.patch() {
            if p == 0 || !self.model.patch_dim.is_multiple_of(p * p) {
                return Err(LabError::Config(format!("patch {p} does not divide patch_dim {}", self.model.patch_dim)));
            }
        }
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 {
            return Err(LabError::Config("train.epochs and train.batch_size must be positive".into()));
        }
        let positive = |x: f64| x > 0.0;
        if !positive(t.lr) || !positive(t.clip_norm) || !(0.0..1.0).contains(&t.warmup_frac) || !(0.0..).contains(&t.weight_decay) {
            return Err(LabError::Config("train: need lr > 0, clip_norm > 0, 0 ≤ warmup_frac < 1, weight_decay ≥ 0".into()));
        }
        if self.eval.batch_size == 0 || self.eval.gammas.iter().any(|g| !(0.0..=1.0).contains(g)) {
            return Err(LabError::Config("eval: batch_size must be positive and gammas in [0, 1]".into()));
        }
        if self.campaign.gammas.iter().any(|g| !(0.0..=1.0).contains(g)) {
            return Err(LabError::Config("campaign gammas must lie in [0, 1]".into()));
        }
        if let Some(a) = &self.attack {
            a.validate()?;
        }
        Ok(())
    }

    /// The same experiment without MJP: no shuffling, no localization loss or head.
    pub fn baseline(&self) -> Self {
        let mut c = self.clone();
        c.shuffle.gamma = 0.0;
        c.aux.kind = AuxKind::None;
        c.model.localization_head = false;
        c
    }

    /// Desk-scale text setup: 2 layers, width 32, 16 tokens, 2 classes.
    pub fn text_toy(seed: u64) -> Self {
        ExperimentConfig {
            seed,
            output_dir: None,
            model: ModelConfig {
                localization_head: true,
                ..ModelConfig::text(crate::synth::TEXT_VOCAB, crate::synth::TEXT_LEN, 32, 2, 2, 2)
            },
            shuffle: ShuffleSpec::text_default(seed),
            aux: dal(),
            train: TrainConfig {
                epochs: 6,
                batch_size: 32,
                lr: 3e-3,
                weight_decay: default_weight_decay(),
                warmup_frac: default_warmup(),
                clip_norm: default_clip(),
            },
            eval: EvalConfig::default(),
            attack: Some(AttackConfig {
                iterations: 5000,
                lr: Some(0.003),
                lr_decay: true,
                restarts: 8,
                seed,
                ..AttackConfig::default()
            }),
            // Clients shuffle harder than training does when the attack is measured.
            campaign: CampaignConfig {
                gammas: vec![0.9],
                ..CampaignConfig::default()
            },
            data: DataConfig::SyntheticText { train: 1024, val: 512 },
        }
    }

    /// Desk-scale vision setup: 16×16 grayscale images, 2×2 patches on an 8×8 grid.
    pub fn vision_toy(seed: u64) -> Self {
        let side = crate::synth::IMAGE_SIDE;
        let patch = 2;
        ExperimentConfig {
            seed,
            output_dir: None,
            model: ModelConfig {
                localization_head: true,
                ..ModelConfig::vision(side / patch, patch * patch, 32, 2, 2, crate::synth::IMAGE_CLASSES)
            },
            shuffle: ShuffleSpec::vision_default(seed),
            aux: dal(),
            train: TrainConfig {
                epochs: 4,
                batch_size: 32,
                lr: 5e-3,
                weight_decay: default_weight_decay(),
                warmup_frac: default_warmup(),
                clip_norm: default_clip(),
            },
            eval: EvalConfig::default(),
            attack: Some(AttackConfig {
                iterations: 3000,
                lr: Some(0.03),
                lr_decay: true,
                restarts: 4,
                seed,
                ..AttackConfig::default()
            }),
            campaign: CampaignConfig::default(),
            data: DataConfig::SyntheticVision { train: 2048, val: 256, patch },
        }
    }
}

fn dal() -> AuxConfig {
    AuxConfig {
        kind: AuxKind::Dal,
        lambda: 0.01,
        ..AuxConfig::default()
    }
}
