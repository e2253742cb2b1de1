use std::path::Path;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CheckpointKind, CheckpointMeta};
use super::images::{preprocess_file, ImageArray, ImageStore};
use super::net::Network;
use super::BackboneConfig;
use crate::corpus::ArtworkRecord;
use crate::error::{Error, Result};

/// Feature vector of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f32>,
    pub source_record_id: String,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f32>, source_record_id: impl Into<String>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::MalformedInput(format!("non-finite embedding entry {bad}")));
        }
        Ok(Self {
            values,
            source_record_id: source_record_id.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// A checkpoint materialized for inference. Read-only; safe to share
/// across threads.
pub struct LoadedModel {
    net: Network,
    meta: CheckpointMeta,
}

impl LoadedModel {
    pub fn load(checkpoint: &Checkpoint) -> Result<Self> {
        checkpoint.meta.verify()?;
        let meta = checkpoint.meta.clone();
        let net = Network::new(meta.backbone(), meta.artists().len().max(1), 0)?;
        net.load_safetensors(&checkpoint.bytes()?, true)?;
        Ok(Self { net, meta })
    }

    /// Loads after checking that the checkpoint was produced with `config`.
    pub fn load_with_config(checkpoint: &Checkpoint, config: &BackboneConfig) -> Result<Self> {
        let stored = checkpoint.meta.backbone();
        if stored.embedding_dim != config.embedding_dim {
            return Err(Error::DimensionMismatch {
                expected: config.embedding_dim,
                actual: stored.embedding_dim,
            });
        }
        if stored != config {
            return Err(Error::IncompatibleCheckpoint(format!(
                "checkpoint {} was trained with a different backbone configuration",
                checkpoint.meta.fingerprint
            )));
        }
        Self::load(checkpoint)
    }

    pub fn meta(&self) -> &CheckpointMeta {
        &self.meta
    }

    pub fn config(&self) -> &BackboneConfig {
        self.meta.backbone()
    }

    pub fn fingerprint(&self) -> &str {
        &self.meta.fingerprint
    }

    fn check_edge(&self, a: &ImageArray) -> Result<()> {
        let edge = self.config().input_edge as usize;
        if a.edge != edge {
            return Err(Error::DimensionMismatch {
                expected: edge,
                actual: a.edge,
            });
        }
        Ok(())
    }

    pub fn embed(&self, array: &ImageArray, source_record_id: &str) -> Result<EmbeddingVector> {
        Ok(self
            .embed_batch(&[array], &[source_record_id])?
            .pop()
            .expect("one embedding per input"))
    }

    pub fn embed_batch(&self, arrays: &[&ImageArray], ids: &[&str]) -> Result<Vec<EmbeddingVector>> {
        if arrays.len() != ids.len() {
            return Err(Error::DimensionMismatch {
                expected: arrays.len(),
                actual: ids.len(),
            });
        }
        if arrays.is_empty() {
            return Ok(Vec::new());
        }
        for a in arrays {
            self.check_edge(a)?;
        }
        let x = ImageArray::batch_tensor(arrays, self.net.device())?;
        let mut feats = self.net.features(&x, false)?;
        if self.meta.input.normalize_embeddings {
            feats = l2_normalize(&feats)?;
        }
        let rows: Vec<Vec<f32>> = feats.to_dtype(DType::F32)?.to_vec2()?;
        rows.into_iter()
            .zip(ids)
            .map(|(v, id)| EmbeddingVector::new(v, *id))
            .collect()
    }

    pub fn embed_file(&self, path: &Path) -> Result<EmbeddingVector> {
        let id = path.to_string_lossy().into_owned();
        let array = preprocess_file(path, &id, self.config())?;
        self.embed(&array, &id)
    }

    /// Embeds records in batches of `batch_size`.
    pub fn embed_records(
        &self,
        records: &[&ArtworkRecord],
        images: &ImageStore,
        batch_size: usize,
    ) -> Result<Vec<EmbeddingVector>> {
        let mut out = Vec::with_capacity(records.len());
        for chunk in records.chunks(batch_size.max(1)) {
            let arrays = chunk.iter().map(|r| images.load(r)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&ImageArray> = arrays.iter().map(|a| a.as_ref()).collect();
            let ids: Vec<&str> = chunk.iter().map(|r| r.id.as_str()).collect();
            out.extend(self.embed_batch(&refs, &ids)?);
        }
        Ok(out)
    }

    /// Softmax scores over the checkpoint's artists.
    pub fn classify(&self, array: &ImageArray) -> Result<Vec<f64>> {
        Ok(self.classify_batch(&[array])?.pop().unwrap())
    }

    pub fn classify_batch(&self, arrays: &[&ImageArray]) -> Result<Vec<Vec<f64>>> {
        if self.meta.kind() != CheckpointKind::Discriminative {
            return Err(Error::IncompatibleCheckpoint(
                "classification needs a discriminative checkpoint".into(),
            ));
        }
        if arrays.is_empty() {
            return Ok(Vec::new());
        }
        for a in arrays {
            self.check_edge(a)?;
        }
        let x = ImageArray::batch_tensor(arrays, self.net.device())?;
        let logits = self.net.logits(&x, false)?.to_dtype(DType::F64)?;
        let probs = candle_nn::ops::softmax(&logits, D::Minus1)?;
        Ok(probs.to_vec2()?)
    }

    pub fn classify_records(
        &self,
        records: &[&ArtworkRecord],
        images: &ImageStore,
        batch_size: usize,
    ) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(records.len());
        for chunk in records.chunks(batch_size.max(1)) {
            let arrays = chunk.iter().map(|r| images.load(r)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&ImageArray> = arrays.iter().map(|a| a.as_ref()).collect();
            out.extend(self.classify_batch(&refs)?);
        }
        Ok(out)
    }
}

pub(crate) fn l2_normalize(x: &Tensor) -> candle_core::Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    x.broadcast_div(&norm)
}

/// Index of the largest score; earliest index wins ties.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_rejects_non_finite() {
        assert!(EmbeddingVector::new(vec![0.0, f32::NAN], "x").is_err());
        assert!(EmbeddingVector::new(vec![0.0, 1.0], "x").is_ok());
    }

    #[test]
    fn argmax_prefers_earliest() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.5]), 0);
    }
}
