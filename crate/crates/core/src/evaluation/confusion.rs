use serde::{Deserialize, Serialize};

use crate::backbone::{
    argmax, train_discriminative, BackboneConfig, CheckpointStore, ImageStore, LoadedModel,
    TrainHistory, TrainRunConfig,
};
use crate::corpus::{ArtistLabel, ArtworkRecord, DatasetManifest, Split};
use crate::error::{Error, Result};

/// Rows are true artists, columns predicted artists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<ArtistLabel>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(labels: Vec<ArtistLabel>) -> Self {
        let n = labels.len();
        Self {
            labels,
            counts: vec![vec![0; n]; n],
        }
    }

    /// Tallies `(truth[i], predicted[i])` class-index pairs.
    pub fn from_predictions(labels: Vec<ArtistLabel>, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::DimensionMismatch {
                expected: truth.len(),
                actual: predicted.len(),
            });
        }
        if truth.is_empty() {
            return Err(Error::Empty("evaluation subset"));
        }
        let mut m = Self::zeros(labels);
        let n = m.labels.len();
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= n || p >= n {
                return Err(Error::MalformedInput(format!("class index {} out of range", t.max(p))));
            }
            m.counts[t][p] += 1;
        }
        Ok(m)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn trace(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        self.trace() as f64 / self.total().max(1) as f64
    }

    /// Fraction of each true class predicted as each class; all-zero rows stay zero.
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let s: u64 = row.iter().sum();
                row.iter().map(|&c| if s == 0 { 0.0 } else { c as f64 / s as f64 }).collect()
            })
            .collect()
    }

    /// Header `true\predicted,<artist names...>`, one row per true artist.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["true\\predicted".to_owned()];
        header.extend(self.labels.iter().map(|a| a.name.clone()));
        w.write_record(&header)?;
        for (a, row) in self.labels.iter().zip(&self.counts) {
            let mut rec = vec![a.name.clone()];
            rec.extend(row.iter().map(u64::to_string));
            w.write_record(&rec)?;
        }
        w.into_inner().map_err(|e| Error::Plot(e.to_string()))
    }
}

/// Classifies every active record of `subset` with a discriminative model.
pub fn confusion(
    subset: &DatasetManifest,
    images: &ImageStore,
    model: &LoadedModel,
    batch_size: usize,
) -> Result<ConfusionMatrix> {
    if model.meta().artists() != subset.artists.as_slice() {
        return Err(Error::IncompatibleCheckpoint(
            "checkpoint and evaluation subset have different artist lists".into(),
        ));
    }
    let records: Vec<&ArtworkRecord> = subset.records.iter().filter(|r| r.is_active()).collect();
    if records.is_empty() {
        return Err(Error::Empty("evaluation subset"));
    }
    let truth = records.iter().map(|r| subset.class_of(r)).collect::<Result<Vec<_>>>()?;
    let scores = model.classify_records(&records, images, batch_size)?;
    let predicted: Vec<usize> = scores.iter().map(|s| argmax(s)).collect();
    ConfusionMatrix::from_predictions(subset.artists.clone(), &truth, &predicted)
}

/// Outcome of training on originals and testing on both domains.
#[derive(Debug, Clone)]
pub struct TransferResult {
    pub original: ConfusionMatrix,
    pub synthetic: ConfusionMatrix,
    /// Fingerprint of the checkpoint that produced both matrices.
    pub fingerprint: String,
    pub history: Option<TrainHistory>,
}

impl TransferResult {
    /// `accuracy(original val) - accuracy(synthetic)`.
    pub fn gap(&self) -> f64 {
        self.original.accuracy() - self.synthetic.accuracy()
    }
}

/// Evaluates one discriminative model on the original val split and on
/// every active synthetic record.
pub fn transfer_evaluate(
    model: &LoadedModel,
    originals: &DatasetManifest,
    synthetics: &DatasetManifest,
    images: &ImageStore,
    batch_size: usize,
) -> Result<TransferResult> {
    if originals.artists != synthetics.artists {
        return Err(Error::MalformedInput(
            "original and synthetic manifests list different artists".into(),
        ));
    }
    let val = originals.active_in_split(Split::Val);
    Ok(TransferResult {
        original: confusion(&val, images, model, batch_size)?,
        synthetic: confusion(synthetics, images, model, batch_size)?,
        fingerprint: model.fingerprint().to_owned(),
        history: None,
    })
}

/// Trains on the originals' train split, keeps the epoch with the best
/// original-domain validation accuracy, then evaluates both domains.
pub fn transfer_experiment(
    originals: &DatasetManifest,
    synthetics: &DatasetManifest,
    images: &ImageStore,
    backbone: &BackboneConfig,
    run: &TrainRunConfig,
    store: &CheckpointStore,
) -> Result<TransferResult> {
    if originals.artists != synthetics.artists {
        return Err(Error::MalformedInput(
            "original and synthetic manifests list different artists".into(),
        ));
    }
    let history = train_discriminative(originals, images, backbone, run, store)?;
    let best = history.best_by_accuracy().ok_or(Error::Empty("training history"))?;
    let model = LoadedModel::load(best)?;
    let mut result = transfer_evaluate(&model, originals, synthetics, images, run.batch_size)?;
    result.history = Some(history);
    Ok(result)
}
