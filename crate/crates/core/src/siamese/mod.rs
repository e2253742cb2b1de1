//! Metric learning on top of a discriminative backbone: pair sampling,
//! the exponential contrastive loss, twin-branch training and checkpoint
//! selection.

mod loss;
mod metric;
mod pairs;
mod select;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use loss::{
    contrastive_loss, contrastive_loss_derivative, contrastive_loss_tensor, LossConfig,
    LossVariant, EXP_RATE,
};
pub use metric::{metric_distance, pair_distance, EmbeddingCache, MetricModel};
pub(crate) use metric::euclidean;
pub use pairs::{read_pairs, sample_pairs, write_pairs, PairSample};
pub use select::{select_checkpoint, select_epoch, SelectionRule};
pub use train::{train_siamese, write_loss_curve_csv, SiameseOptions, SiameseRun};

/// Similarity label of a pair. Serialized as the integer 0 (same artist)
/// or 1 (different artists).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum PairLabel {
    Similar,
    Dissimilar,
}

impl PairLabel {
    pub fn of(same_artist: bool) -> Self {
        if same_artist {
            PairLabel::Similar
        } else {
            PairLabel::Dissimilar
        }
    }

    pub fn as_f64(self) -> f64 {
        u8::from(self) as f64
    }
}

impl From<PairLabel> for u8 {
    fn from(l: PairLabel) -> u8 {
        match l {
            PairLabel::Similar => 0,
            PairLabel::Dissimilar => 1,
        }
    }
}

impl TryFrom<u8> for PairLabel {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            0 => Ok(PairLabel::Similar),
            1 => Ok(PairLabel::Dissimilar),
            other => Err(Error::MalformedInput(format!("pair label must be 0 or 1, got {other}"))),
        }
    }
}
