use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use safetensors::tensor::TensorView;
use safetensors::Dtype;

use super::LossConfig;
use crate::backbone::{Checkpoint, EmbeddingVector, ImageArray, ImageStore, LoadedModel};
use crate::corpus::ArtworkRecord;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

/// Euclidean distance, accumulated in f64.
pub fn pair_distance(e1: &EmbeddingVector, e2: &EmbeddingVector) -> Result<f64> {
    euclidean(&e1.values, &e2.values)
}

pub(crate) fn euclidean(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let sq: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum();
    Ok(sq.sqrt())
}

/// A twin network. Both branches are the same loaded backbone, so they
/// can never drift apart.
#[derive(Clone)]
pub struct MetricModel {
    shared: Arc<LoadedModel>,
    loss: LossConfig,
}

impl MetricModel {
    /// Wraps any loaded backbone. A discriminative checkpoint gives the
    /// untrained metric; a metric checkpoint gives the trained one.
    pub fn new(model: LoadedModel) -> Self {
        let loss = model.meta().input.loss.clone().unwrap_or_default();
        Self {
            shared: Arc::new(model),
            loss,
        }
    }

    pub fn load(checkpoint: &Checkpoint) -> Result<Self> {
        Ok(Self::new(LoadedModel::load(checkpoint)?))
    }

    pub fn branches(&self) -> (&LoadedModel, &LoadedModel) {
        (&self.shared, &self.shared)
    }

    pub fn model(&self) -> &LoadedModel {
        &self.shared
    }

    pub fn loss(&self) -> &LossConfig {
        &self.loss
    }

    pub fn fingerprint(&self) -> &str {
        self.shared.fingerprint()
    }

    /// d̂(a, b). Each image is embedded on its own so the result does not
    /// depend on argument order.
    pub fn distance(&self, a: &ImageArray, b: &ImageArray) -> Result<f64> {
        let (left, right) = self.branches();
        let ea = left.embed(a, "a")?;
        let eb = right.embed(b, "b")?;
        pair_distance(&ea, &eb)
    }
}

pub fn metric_distance(image_a: &ImageArray, image_b: &ImageArray, model: &MetricModel) -> Result<f64> {
    model.distance(image_a, image_b)
}

const CACHE_FINGERPRINT: &str = "artprompt.fingerprint";
const CACHE_IDS: &str = "artprompt.ids";

/// Embeddings of reference records, keyed by record id and tied to the
/// fingerprint of the model that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    fingerprint: String,
    entries: BTreeMap<String, Vec<f32>>,
}

impl EmbeddingCache {
    pub fn new(fingerprint: impl Into<String>) -> Self {
        Self {
            fingerprint: fingerprint.into(),
            entries: BTreeMap::new(),
        }
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<EmbeddingVector> {
        self.entries.get(id).map(|v| EmbeddingVector {
            values: v.clone(),
            source_record_id: id.to_owned(),
        })
    }

    pub fn insert(&mut self, e: EmbeddingVector) {
        self.entries.insert(e.source_record_id, e.values);
    }

    /// Loads `path` if it exists and was written for `fingerprint`;
    /// anything else yields an empty cache.
    pub fn load_or_new(path: &Path, fingerprint: &str) -> Result<Self> {
        if !path.exists() {
            return Ok(Self::new(fingerprint));
        }
        let cache = Self::load(path)?;
        if cache.fingerprint != fingerprint {
            log::info!("discarding stale embedding cache {}", path.display());
            return Ok(Self::new(fingerprint));
        }
        Ok(cache)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)?;
        let meta = header
            .metadata()
            .as_ref()
            .ok_or_else(|| Error::MalformedInput(format!("{}: no cache metadata", path.display())))?;
        let fingerprint = meta
            .get(CACHE_FINGERPRINT)
            .ok_or_else(|| Error::MalformedInput(format!("{}: no fingerprint", path.display())))?
            .clone();
        let ids: Vec<String> = serde_json::from_str(meta.get(CACHE_IDS).map(String::as_str).unwrap_or("[]"))?;
        let mut cache = Self::new(fingerprint);
        if ids.is_empty() {
            return Ok(cache);
        }
        let st = safetensors::SafeTensors::deserialize(&bytes)?;
        let view = st.tensor("embeddings")?;
        let shape = view.shape();
        if view.dtype() != Dtype::F32 || shape.len() != 2 || shape[0] != ids.len() {
            return Err(Error::MalformedInput(format!("{}: bad embedding table", path.display())));
        }
        let values: Vec<f32> = view
            .data()
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        for (id, row) in ids.into_iter().zip(values.chunks_exact(shape[1])) {
            cache.entries.insert(id, row.to_vec());
        }
        Ok(cache)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ids: Vec<&String> = self.entries.keys().collect();
        let metadata = HashMap::from([
            (CACHE_FINGERPRINT.to_owned(), self.fingerprint.clone()),
            (CACHE_IDS.to_owned(), serde_json::to_string(&ids)?),
        ]);
        let dim = self.entries.values().next().map_or(0, Vec::len);
        if self.entries.values().any(|v| v.len() != dim) {
            return Err(Error::MalformedInput("embedding cache rows differ in length".into()));
        }
        let bytes: Vec<u8> = self
            .entries
            .values()
            .flat_map(|v| v.iter().flat_map(|x| x.to_le_bytes()))
            .collect();
        let blob = if ids.is_empty() {
            let none: Vec<(String, TensorView)> = Vec::new();
            safetensors::serialize(none, Some(metadata))?
        } else {
            let view = TensorView::new(Dtype::F32, vec![ids.len(), dim], &bytes)?;
            safetensors::serialize(vec![("embeddings".to_owned(), view)], Some(metadata))?
        };
        write_atomic(path, &blob)
    }

    /// Embeds the records missing from the cache and returns all of them
    /// in input order.
    pub fn embed_records(
        &mut self,
        model: &LoadedModel,
        records: &[&ArtworkRecord],
        images: &ImageStore,
        batch_size: usize,
    ) -> Result<Vec<EmbeddingVector>> {
        if model.fingerprint() != self.fingerprint {
            return Err(Error::IncompatibleCheckpoint(format!(
                "embedding cache belongs to {}, model is {}",
                self.fingerprint,
                model.fingerprint()
            )));
        }
        let missing: Vec<&ArtworkRecord> = records
            .iter()
            .copied()
            .filter(|r| !self.entries.contains_key(&r.id))
            .collect();
        for e in model.embed_records(&missing, images, batch_size)? {
            self.insert(e);
        }
        Ok(records.iter().map(|r| self.get(&r.id).expect("just embedded")).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(v: &[f32]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec(), "x").unwrap()
    }

    #[test]
    fn euclidean_basics() {
        assert_eq!(pair_distance(&ev(&[0.0, 0.0]), &ev(&[3.0, 4.0])).unwrap(), 5.0);
        assert_eq!(pair_distance(&ev(&[1.5, -2.0]), &ev(&[1.5, -2.0])).unwrap(), 0.0);
        assert!(matches!(
            pair_distance(&ev(&[0.0]), &ev(&[0.0, 1.0])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn cache_round_trip_and_staleness() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("refs.safetensors");
        let mut c = EmbeddingCache::new("abc");
        c.insert(EmbeddingVector::new(vec![1.0, 2.0, 3.0], "r1").unwrap());
        c.insert(EmbeddingVector::new(vec![-1.0, 0.5, 9.0], "r0").unwrap());
        c.save(&path).unwrap();
        let back = EmbeddingCache::load_or_new(&path, "abc").unwrap();
        assert_eq!(back, c);
        assert_eq!(back.get("r0").unwrap().values, vec![-1.0, 0.5, 9.0]);
        assert!(EmbeddingCache::load_or_new(&path, "other").unwrap().is_empty());

        let empty = EmbeddingCache::new("e");
        empty.save(&path).unwrap();
        assert_eq!(EmbeddingCache::load(&path).unwrap(), empty);
    }
}
