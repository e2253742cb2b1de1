//! Convolutional feature extractor, its checkpoint container and the
//! discriminative (artist classification) trainer.

mod checkpoint;
mod images;
pub(crate) mod model;
pub(crate) mod net;
pub(crate) mod optim;
pub(crate) mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{
    read_checkpoint_meta, Checkpoint, CheckpointKind, CheckpointMeta, CheckpointStore,
    FingerprintInput,
};
pub use images::{preprocess, preprocess_file, ImageArray, ImageStore};
pub use model::{argmax, EmbeddingVector, LoadedModel};
pub use optim::OptimizerKind;
pub use train::{train_discriminative, write_metrics_csv, TrainHistory};

/// Residual network variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Architecture {
    /// 18-layer residual network: 7x7 stem, four stages of two basic blocks
    /// with widths 64..512.
    Resnet18,
    /// Narrow 3x3-stem variant with one basic block per stage and widths
    /// 8..64, for small inputs and CPU-scale experiments.
    ResnetMini,
}

impl Architecture {
    pub fn tag(self) -> &'static str {
        match self {
            Architecture::Resnet18 => "resnet18",
            Architecture::ResnetMini => "resnet-mini",
        }
    }

    /// Width of the globally pooled feature map.
    pub fn feature_width(self) -> usize {
        *self.stage_widths().last().unwrap()
    }

    pub(crate) fn stage_widths(self) -> [usize; 4] {
        match self {
            Architecture::Resnet18 => [64, 128, 256, 512],
            Architecture::ResnetMini => [8, 16, 32, 64],
        }
    }

    pub(crate) fn blocks_per_stage(self) -> usize {
        match self {
            Architecture::Resnet18 => 2,
            Architecture::ResnetMini => 1,
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet18" => Ok(Architecture::Resnet18),
            "resnet-mini" => Ok(Architecture::ResnetMini),
            other => Err(Error::InvalidConfig(format!(
                "unknown architecture {other:?} (expected resnet18 or resnet-mini)"
            ))),
        }
    }
}

impl TryFrom<String> for Architecture {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Architecture> for String {
    fn from(a: Architecture) -> String {
        a.tag().to_owned()
    }
}

/// How the network weights are initialized before training.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum InitMode {
    /// Seeded He-normal convolutions, unit batch norms.
    Random,
    /// Tensors with matching names and shapes are copied from a safetensors
    /// file (torchvision naming); anything else stays seeded-random.
    Pretrained { path: String, sha256: Option<String> },
}

impl Default for InitMode {
    fn default() -> Self {
        InitMode::Random
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub architecture: Architecture,
    pub embedding_dim: usize,
    pub input_edge: u32,
    pub mean: [f32; 3],
    pub std: [f32; 3],
    pub init: InitMode,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Resnet18,
            embedding_dim: 512,
            input_edge: 224,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
            init: InitMode::Random,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_edge < 32 {
            return Err(Error::InvalidConfig(format!(
                "input_edge {} is below the 32 pixel minimum",
                self.input_edge
            )));
        }
        if self.embedding_dim < 2 {
            return Err(Error::InvalidConfig(format!(
                "embedding_dim {} must be at least 2",
                self.embedding_dim
            )));
        }
        if self.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidConfig("normalization mean/std must be finite, std positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRunConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl TrainRunConfig {
    /// Discriminative baseline: Adam, 50 epochs, batch 32, lr and weight decay 1e-4.
    pub fn baseline() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }

    /// Metric stage: Adam, 250 epochs, batch 64, lr and weight decay 1e-4.
    pub fn siamese() -> Self {
        Self {
            epochs: 250,
            batch_size: 64,
            ..Self::baseline()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning_rate {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidConfig(format!("weight_decay {}", self.weight_decay)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_invariants() {
        assert!(BackboneConfig::default().validate().is_ok());
        let small = BackboneConfig {
            input_edge: 31,
            ..Default::default()
        };
        assert!(small.validate().is_err());
        let narrow = BackboneConfig {
            embedding_dim: 1,
            ..Default::default()
        };
        assert!(narrow.validate().is_err());
        assert!(TrainRunConfig { epochs: 0, ..TrainRunConfig::baseline() }.validate().is_err());
    }

    #[test]
    fn default_run_hyperparameters() {
        let b = TrainRunConfig::baseline();
        assert_eq!((b.epochs, b.batch_size), (50, 32));
        assert_eq!((b.learning_rate, b.weight_decay), (1e-4, 1e-4));
        let s = TrainRunConfig::siamese();
        assert_eq!((s.epochs, s.batch_size), (250, 64));
    }

    #[test]
    fn architecture_tags_round_trip() {
        for a in [Architecture::Resnet18, Architecture::ResnetMini] {
            assert_eq!(a.tag().parse::<Architecture>().unwrap(), a);
        }
        assert_eq!(Architecture::Resnet18.feature_width(), 512);
        assert!("vgg".parse::<Architecture>().is_err());
    }
}
