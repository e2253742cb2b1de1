//! The TOML run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attribution::ReferenceKind;
use crate::backbone::{BackboneConfig, OptimizerKind, TrainRunConfig};
use crate::corpus::TrainFraction;
use crate::error::{Error, Result};
use crate::evaluation::{DEFAULT_N_MAX, DEFAULT_THRESHOLDS};
use crate::seed::derive_seed;
use crate::siamese::{LossConfig, SelectionRule, SiameseOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigDocument {
    /// Global seed; every stage derives its own seed from it unless the
    /// stage sets one explicitly.
    pub seed: u64,
    pub corpus: CorpusSection,
    pub backbone: BackboneConfig,
    pub train: TrainSection,
    pub loss: LossConfig,
    pub attribution: AttributionSection,
    pub evaluation: EvaluationSection,
}

impl Default for RunConfigDocument {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: CorpusSection::default(),
            backbone: BackboneConfig::default(),
            train: TrainSection::default(),
            loss: LossConfig::default(),
            attribution: AttributionSection::default(),
            evaluation: EvaluationSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    /// Directory that record paths are relative to.
    pub root: PathBuf,
    pub manifest: PathBuf,
    pub train_fraction: TrainFraction,
    /// Per artist and provenance in the mixed dataset.
    pub quota: usize,
    pub images_per_prompt: usize,
    pub split_seed: Option<u64>,
    pub mix_seed: Option<u64>,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            root: PathBuf::from("corpus"),
            manifest: PathBuf::from("corpus/manifest.jsonl"),
            train_fraction: TrainFraction::default(),
            quota: 470,
            images_per_prompt: crate::corpus::DEFAULT_IMAGES_PER_PROMPT,
            split_seed: None,
            mix_seed: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub baseline: BaselineSection,
    pub siamese: SiameseSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub seed: Option<u64>,
}

impl Default for BaselineSection {
    fn default() -> Self {
        let r = TrainRunConfig::baseline();
        Self {
            epochs: r.epochs,
            batch_size: r.batch_size,
            learning_rate: r.learning_rate,
            weight_decay: r.weight_decay,
            optimizer: r.optimizer,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SiameseSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub seed: Option<u64>,
    pub pairs_per_epoch: usize,
    pub positive_fraction: f64,
    pub val_pairs: usize,
    pub normalize_embeddings: bool,
    pub selection: SelectionRule,
}

impl Default for SiameseSection {
    fn default() -> Self {
        let r = TrainRunConfig::siamese();
        let o = SiameseOptions::default();
        Self {
            epochs: r.epochs,
            batch_size: r.batch_size,
            learning_rate: r.learning_rate,
            weight_decay: r.weight_decay,
            optimizer: r.optimizer,
            seed: None,
            pairs_per_epoch: o.pairs_per_epoch,
            positive_fraction: o.positive_fraction,
            val_pairs: o.val_pairs,
            normalize_embeddings: o.normalize_embeddings,
            selection: SelectionRule::default(),
        }
    }
}

impl SiameseSection {
    pub fn options(&self) -> SiameseOptions {
        SiameseOptions {
            pairs_per_epoch: self.pairs_per_epoch,
            positive_fraction: self.positive_fraction,
            val_pairs: self.val_pairs,
            normalize_embeddings: self.normalize_embeddings,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttributionSection {
    pub reference_kind: ReferenceKind,
    /// Similarity a reference must exceed to vote.
    pub threshold: f64,
}

impl Default for AttributionSection {
    fn default() -> Self {
        Self {
            reference_kind: ReferenceKind::Synthetic,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    pub thresholds: Vec<f64>,
    pub n_max: usize,
    /// Number of independent query draws averaged in retrieval.
    pub repeats: usize,
    pub queries_per_artist: usize,
    pub gallery_kind: ReferenceKind,
    pub batch_size: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            n_max: DEFAULT_N_MAX,
            repeats: 1,
            queries_per_artist: 1,
            gallery_kind: ReferenceKind::Original,
            batch_size: 32,
        }
    }
}

impl RunConfigDocument {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Reads and validates a config file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: Self = toml::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        doc.validate()?;
        Ok(doc)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.baseline_run().validate()?;
        self.siamese_run().validate()?;
        self.loss.validate()?;
        let s = &self.train.siamese;
        if !(0.0..=1.0).contains(&s.positive_fraction) {
            return Err(Error::InvalidConfig(format!(
                "train.siamese.positive_fraction {} outside [0, 1]",
                s.positive_fraction
            )));
        }
        if s.pairs_per_epoch == 0 || s.val_pairs == 0 {
            return Err(Error::InvalidConfig("train.siamese pair counts must be positive".into()));
        }
        let t = self.attribution.threshold;
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::InvalidConfig(format!("attribution.threshold {t} outside (0, 1)")));
        }
        let e = &self.evaluation;
        if e.thresholds.is_empty() || e.thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(Error::InvalidConfig(
                "evaluation.thresholds must be non-empty and within (0, 1]".into(),
            ));
        }
        if e.n_max == 0 || e.repeats == 0 || e.queries_per_artist == 0 || e.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "evaluation n_max, repeats, queries_per_artist and batch_size must be positive".into(),
            ));
        }
        if self.corpus.quota == 0 || self.corpus.images_per_prompt == 0 {
            return Err(Error::InvalidConfig("corpus quota and images_per_prompt must be positive".into()));
        }
        Ok(())
    }

    fn stage_seed(&self, explicit: Option<u64>, stage: &str) -> u64 {
        explicit.unwrap_or_else(|| derive_seed(self.seed, stage))
    }

    pub fn split_seed(&self) -> u64 {
        self.stage_seed(self.corpus.split_seed, "corpus.split")
    }

    pub fn mix_seed(&self) -> u64 {
        self.stage_seed(self.corpus.mix_seed, "corpus.mix")
    }

    pub fn retrieval_seed(&self) -> u64 {
        derive_seed(self.seed, "evaluation.retrieval")
    }

    pub fn baseline_run(&self) -> TrainRunConfig {
        let b = &self.train.baseline;
        TrainRunConfig {
            epochs: b.epochs,
            batch_size: b.batch_size,
            learning_rate: b.learning_rate,
            weight_decay: b.weight_decay,
            optimizer: b.optimizer,
            seed: self.stage_seed(b.seed, "train.baseline"),
        }
    }

    pub fn siamese_run(&self) -> TrainRunConfig {
        let s = &self.train.siamese;
        TrainRunConfig {
            epochs: s.epochs,
            batch_size: s.batch_size,
            learning_rate: s.learning_rate,
            weight_decay: s.weight_decay,
            optimizer: s.optimizer,
            seed: self.stage_seed(s.seed, "train.siamese"),
        }
    }

    /// Copy with every derived seed written out.
    pub fn resolved(&self) -> Self {
        let mut d = self.clone();
        d.corpus.split_seed = Some(self.split_seed());
        d.corpus.mix_seed = Some(self.mix_seed());
        d.train.baseline.seed = Some(self.baseline_run().seed);
        d.train.siamese.seed = Some(self.siamese_run().seed);
        d
    }
}
