//! Experiment configuration: a TOML file with `model`, `data`, `attack`,
//! `train`, `theory` and `defense` sections. Unknown keys are rejected, every
//! default is written out by [`ExperimentConfig::resolved_toml`], and every
//! output file embeds the resolved config so a run is reconstructible from
//! its artifacts alone.

use serde::{Deserialize, Serialize};

use fuselab_core::attack::{default_injection_layers, AttackKind};
use fuselab_core::data::SyntheticDatasetSpec;
use fuselab_core::train::TrainConfig;
use fuselab_core::vit::ViTConfig;

use crate::error::{LabError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub patch: usize,
    pub image: usize,
    pub channels: usize,
    pub classes: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let c = ViTConfig::toy();
        ModelSection {
            depth: c.depth,
            dim: c.dim,
            heads: c.heads,
            patch: c.patch,
            image: c.image,
            channels: c.channels,
            classes: c.classes,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub classes: usize,
    pub image: usize,
    pub channels: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub pattern_seed: u64,
    pub noise_std: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            classes: 10,
            image: 32,
            channels: 1,
            train_per_class: 16,
            test_per_class: 50,
            pattern_seed: 7,
            noise_std: 0.15,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    /// dynamic | static | lowrank
    pub kind: String,
    /// Injection layers (1-based); empty selects the depth-proportional
    /// default.
    pub layers: Vec<usize>,
    pub n_prompts: usize,
    pub epsilon: f64,
    pub target_class: usize,
    /// Adapter rank for the lowrank backend.
    pub rank: usize,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            kind: "dynamic".to_string(),
            layers: Vec::new(),
            n_prompts: 8,
            epsilon: 4.0 / 255.0,
            target_class: 0,
            rank: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch: usize,
    pub lr_phi: f64,
    pub lr_delta: f64,
    pub l1_phi: f64,
    pub clean_epochs: usize,
    pub clean_lr: f64,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 40,
            batch: 16,
            lr_phi: 2e-3,
            lr_delta: 1e-2,
            l1_phi: 0.1,
            clean_epochs: 25,
            clean_lr: 1e-3,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheorySection {
    pub p: usize,
    pub k_shared: usize,
    pub ratios: Vec<f64>,
    pub seeds: u64,
    pub n_clean: usize,
    pub n_attack: usize,
}

impl Default for TheorySection {
    fn default() -> Self {
        TheorySection {
            p: 20,
            k_shared: 4,
            ratios: vec![1.0, 2.0, 5.0, 10.0],
            seeds: 50,
            n_clean: 20,
            n_attack: 20,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseSection {
    pub nc_steps: usize,
    pub lambda_l1: f64,
    pub nc_batch: usize,
}

impl Default for DefenseSection {
    fn default() -> Self {
        DefenseSection {
            nc_steps: 200,
            lambda_l1: 0.01,
            nc_batch: 8,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub data: DataSection,
    pub attack: AttackSection,
    pub train: TrainSection,
    pub theory: TheorySection,
    pub defense: DefenseSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.image != self.data.image
            || self.model.channels != self.data.channels
            || self.model.classes != self.data.classes
        {
            return Err(LabError::Config(
                "model and data sections disagree on image/channels/classes".to_string(),
            ));
        }
        self.vit_config()
            .validate()
            .map_err(|e| LabError::Config(e.to_string()))?;
        AttackKind::parse(&self.attack.kind).map_err(|e| LabError::Config(e.to_string()))?;
        if self.attack.target_class >= self.model.classes {
            return Err(LabError::Config(format!(
                "attack.target_class {} out of range for {} classes",
                self.attack.target_class, self.model.classes
            )));
        }
        Ok(())
    }

    pub fn vit_config(&self) -> ViTConfig {
        ViTConfig {
            depth: self.model.depth,
            dim: self.model.dim,
            heads: self.model.heads,
            patch: self.model.patch,
            image: self.model.image,
            channels: self.model.channels,
            classes: self.model.classes,
        }
    }

    pub fn dataset_spec(&self) -> SyntheticDatasetSpec {
        SyntheticDatasetSpec {
            classes: self.data.classes,
            image: self.data.image,
            channels: self.data.channels,
            train_per_class: self.data.train_per_class,
            test_per_class: self.data.test_per_class,
            pattern_seed: self.data.pattern_seed,
            noise_std: self.data.noise_std,
        }
    }

    pub fn attack_kind(&self) -> AttackKind {
        AttackKind::parse(&self.attack.kind).expect("validated at load")
    }

    pub fn injection_layers(&self) -> Vec<usize> {
        if self.attack.layers.is_empty() {
            default_injection_layers(self.model.depth)
        } else {
            self.attack.layers.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch: self.train.batch,
            lr_phi: self.train.lr_phi,
            lr_delta: self.train.lr_delta,
            epsilon: self.attack.epsilon,
            target_class: self.attack.target_class,
            kind: self.attack_kind(),
            seed: self.train.seed,
            l1_phi: self.train.l1_phi,
            clean_epochs: self.train.clean_epochs,
            clean_lr: self.train.clean_lr,
        }
    }

    /// The fully resolved config as TOML (defaults included).
    pub fn resolved_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
