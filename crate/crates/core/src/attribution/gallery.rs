use std::collections::HashMap;
use std::path::Path;

use super::{attribute, ArtistDistances, AttributionReport, ReferenceSet};
use crate::backbone::{preprocess_file, EmbeddingVector, ImageArray, ImageStore};
use crate::corpus::{ArtworkRecord, DatasetManifest};
use crate::error::{Error, Result};
use crate::siamese::{EmbeddingCache, MetricModel};

/// Reference sets with their embeddings computed once.
#[derive(Debug, Clone)]
pub struct ReferenceGallery {
    sets: Vec<ReferenceSet>,
    embeddings: HashMap<String, Vec<f32>>,
}

impl ReferenceGallery {
    /// Embeds every reference with `model`, reusing `cache` entries when given.
    pub fn build(
        model: &MetricModel,
        sets: Vec<ReferenceSet>,
        manifest: &DatasetManifest,
        images: &ImageStore,
        cache: Option<&mut EmbeddingCache>,
        batch_size: usize,
    ) -> Result<Self> {
        for s in &sets {
            s.validate(manifest)?;
        }
        let index = manifest.index();
        let records: Vec<&ArtworkRecord> = sets
            .iter()
            .flat_map(|s| s.records.iter())
            .map(|id| &manifest.records[index[id.as_str()]])
            .collect();
        let vectors = match cache {
            Some(c) => c.embed_records(model.model(), &records, images, batch_size)?,
            None => model.model().embed_records(&records, images, batch_size)?,
        };
        Self::from_embeddings(sets, vectors)
    }

    /// Gallery over embeddings computed elsewhere.
    pub fn from_embeddings(sets: Vec<ReferenceSet>, vectors: Vec<EmbeddingVector>) -> Result<Self> {
        if sets.is_empty() {
            return Err(Error::Empty("reference sets"));
        }
        let embeddings: HashMap<String, Vec<f32>> =
            vectors.into_iter().map(|e| (e.source_record_id, e.values)).collect();
        for s in &sets {
            if s.records.is_empty() {
                return Err(Error::Empty("reference set"));
            }
            if let Some(missing) = s.records.iter().find(|id| !embeddings.contains_key(*id)) {
                return Err(Error::UnknownRecord(missing.clone()));
            }
        }
        Ok(Self { sets, embeddings })
    }

    pub fn sets(&self) -> &[ReferenceSet] {
        &self.sets
    }

    pub fn embedding(&self, id: &str) -> Option<EmbeddingVector> {
        self.embeddings.get(id).map(|v| EmbeddingVector {
            values: v.clone(),
            source_record_id: id.to_owned(),
        })
    }

    /// d̂ from `query` to every reference, grouped by artist.
    pub fn distances(&self, query: &EmbeddingVector) -> Result<Vec<ArtistDistances>> {
        self.sets
            .iter()
            .map(|s| {
                let distances = s
                    .records
                    .iter()
                    .map(|id| Ok((id.clone(), crate::siamese::euclidean(&query.values, &self.embeddings[id])?)))
                    .collect::<Result<Vec<_>>>()?;
                Ok(ArtistDistances {
                    artist: s.artist.clone(),
                    distances,
                })
            })
            .collect()
    }
}

/// A metric model, a reference gallery and a vote threshold.
pub struct Attributor {
    pub model: MetricModel,
    pub gallery: ReferenceGallery,
    pub threshold: f64,
}

impl Attributor {
    pub fn attribute_embedding(&self, query: &EmbeddingVector) -> Result<AttributionReport> {
        attribute(&query.source_record_id, &self.gallery.distances(query)?, self.threshold)
    }

    pub fn attribute_array(&self, array: &ImageArray, query: &str) -> Result<AttributionReport> {
        self.attribute_embedding(&self.model.model().embed(array, query)?)
    }

    /// A record that is itself a reference reuses its gallery embedding,
    /// so its distance to itself is exactly zero.
    pub fn attribute_record(&self, record: &ArtworkRecord, images: &ImageStore) -> Result<AttributionReport> {
        match self.gallery.embedding(&record.id) {
            Some(e) => self.attribute_embedding(&e),
            None => self.attribute_array(&*images.load(record)?, &record.id),
        }
    }

    pub fn attribute_file(&self, path: &Path) -> Result<AttributionReport> {
        let id = path.to_string_lossy().into_owned();
        let array = preprocess_file(path, &id, self.model.model().config())?;
        self.attribute_array(&array, &id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::{Decision, ReferenceKind};
    use crate::corpus::ArtistLabel;

    fn emb(id: &str, values: &[f32]) -> EmbeddingVector {
        EmbeddingVector {
            values: values.to_vec(),
            source_record_id: id.into(),
        }
    }

    fn set(artist: &str, id: u32, ids: &[&str]) -> ReferenceSet {
        ReferenceSet {
            artist: ArtistLabel::new(artist, id),
            records: ids.iter().map(|s| s.to_string()).collect(),
            kind: ReferenceKind::Original,
        }
    }

    fn gallery() -> ReferenceGallery {
        ReferenceGallery::from_embeddings(
            vec![set("A", 0, &["a1", "a2"]), set("B", 1, &["b1"])],
            vec![emb("a1", &[0.0, 0.0]), emb("a2", &[3.0, 4.0]), emb("b1", &[0.0, 2.0])],
        )
        .unwrap()
    }

    #[test]
    fn distances_grouped_by_artist() {
        let d = gallery().distances(&emb("q", &[0.0, 0.5])).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d[0].artist.name, "A");
        assert_eq!(d[0].distances, vec![("a1".to_string(), 0.5), ("a2".to_string(), (9.0f64 + 12.25).sqrt())]);
        assert_eq!(d[1].distances, vec![("b1".to_string(), 1.5)]);

        let report = attribute("q", &d, 0.4).unwrap();
        assert_eq!(report.evidence_for("A").unwrap().probability, Some(0.5));
        assert_eq!(report.evidence_for("B").unwrap().probability, None);
        assert!(matches!(report.decision, Decision::Artist(ref a) if a.name == "A"), "{:?}", report.decision);
    }

    #[test]
    fn reference_embedding_round_trips() {
        let g = gallery();
        assert_eq!(g.embedding("b1").unwrap(), emb("b1", &[0.0, 2.0]));
        assert!(g.embedding("zz").is_none());
        let d = g.distances(&g.embedding("a2").unwrap()).unwrap();
        assert_eq!(d[0].distances[1].1, 0.0);
    }

    #[test]
    fn construction_errors() {
        assert!(matches!(ReferenceGallery::from_embeddings(vec![], vec![]), Err(Error::Empty(_))));
        let err = ReferenceGallery::from_embeddings(vec![set("A", 0, &["a1", "a9"])], vec![emb("a1", &[0.0])]).unwrap_err();
        assert!(matches!(err, Error::UnknownRecord(ref id) if id == "a9"), "{err}");
        assert!(matches!(
            ReferenceGallery::from_embeddings(vec![set("A", 0, &[])], vec![]),
            Err(Error::Empty(_))
        ));
        let err = gallery().distances(&emb("q", &[1.0, 2.0, 3.0])).unwrap_err();
        assert!(!err.to_string().is_empty());
    }
}
