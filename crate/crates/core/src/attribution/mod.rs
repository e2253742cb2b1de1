//! Turning distances to reference galleries into per-artist probabilities
//! and a thresholded vote.

mod gallery;

use std::fmt;
use std::str::FromStr;

use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use crate::corpus::{ArtistLabel, ArtworkRecord, DatasetManifest, Provenance, Split};
use crate::error::{Error, Result};

pub use gallery::{Attributor, ReferenceGallery};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceKind {
    Original,
    Synthetic,
    Both,
}

impl ReferenceKind {
    pub fn admits(self, p: Provenance) -> bool {
        match self {
            ReferenceKind::Original => p == Provenance::Original,
            ReferenceKind::Synthetic => p == Provenance::Synthetic,
            ReferenceKind::Both => true,
        }
    }
}

impl FromStr for ReferenceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(ReferenceKind::Original),
            "synthetic" => Ok(ReferenceKind::Synthetic),
            "both" => Ok(ReferenceKind::Both),
            other => Err(Error::InvalidConfig(format!(
                "unknown reference kind {other:?} (original, synthetic or both)"
            ))),
        }
    }
}

impl fmt::Display for ReferenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReferenceKind::Original => "original",
            ReferenceKind::Synthetic => "synthetic",
            ReferenceKind::Both => "both",
        })
    }
}

/// Reference images of one artist.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceSet {
    pub artist: ArtistLabel,
    pub records: Vec<String>,
    pub kind: ReferenceKind,
}

impl ReferenceSet {
    /// Collects the active records of `artist` admitted by `kind`,
    /// optionally restricted to one split.
    pub fn from_manifest(
        manifest: &DatasetManifest,
        artist: &ArtistLabel,
        kind: ReferenceKind,
        split: Option<Split>,
    ) -> Result<Self> {
        let records: Vec<String> = manifest
            .records
            .iter()
            .filter(|r| r.is_active() && r.artist == artist.name && kind.admits(r.provenance))
            .filter(|r| split.map_or(true, |s| r.split == s))
            .map(|r| r.id.clone())
            .collect();
        if records.is_empty() {
            return Err(Error::EmptyGroup {
                artist: artist.name.clone(),
                provenance: kind.to_string(),
            });
        }
        Ok(Self {
            artist: artist.clone(),
            records,
            kind,
        })
    }

    /// One set per manifest artist, in artist order.
    pub fn all_from_manifest(
        manifest: &DatasetManifest,
        kind: ReferenceKind,
        split: Option<Split>,
    ) -> Result<Vec<Self>> {
        manifest
            .artists
            .iter()
            .map(|a| Self::from_manifest(manifest, a, kind, split))
            .collect()
    }

    /// Checks the set against the manifest: non-empty, right artist, right kind.
    pub fn validate(&self, manifest: &DatasetManifest) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::EmptyGroup {
                artist: self.artist.name.clone(),
                provenance: self.kind.to_string(),
            });
        }
        let index = manifest.index();
        for id in &self.records {
            let r: &ArtworkRecord = index
                .get(id.as_str())
                .map(|&i| &manifest.records[i])
                .ok_or_else(|| Error::UnknownRecord(id.clone()))?;
            if r.artist != self.artist.name || !self.kind.admits(r.provenance) {
                return Err(Error::MalformedInput(format!(
                    "reference {id} is not a {} image of {}",
                    self.kind, self.artist
                )));
            }
        }
        Ok(())
    }
}

/// Distances from one query to every reference of one artist.
#[derive(Debug, Clone, PartialEq)]
pub struct ArtistDistances {
    pub artist: ArtistLabel,
    /// `(reference id, d̂)` in any order.
    pub distances: Vec<(String, f64)>,
}

/// Closest reference of an artist.
#[derive(Debug, Clone, PartialEq)]
pub struct Nearest {
    pub distance: f64,
    pub record: String,
}

/// Exact minimum over `distances`; the smallest id wins ties.
pub fn min_distance(distances: &[(String, f64)]) -> Result<Nearest> {
    let mut best: Option<&(String, f64)> = None;
    for entry in distances {
        if entry.1.is_nan() || entry.1 < 0.0 {
            return Err(Error::NegativeDistance(entry.1));
        }
        best = match best {
            Some(b) if (b.1, &b.0) <= (entry.1, &entry.0) => Some(b),
            _ => Some(entry),
        };
    }
    best.map(|(id, d)| Nearest {
        distance: *d,
        record: id.clone(),
    })
    .ok_or(Error::Empty("reference set"))
}

/// `1 - min_d` when `min_d <= 1`; `None` ("no support") above 1.
pub fn attribution_probability(min_d: f64) -> Result<Option<f64>> {
    if min_d.is_nan() || min_d < 0.0 {
        return Err(Error::NegativeDistance(min_d));
    }
    Ok((min_d <= 1.0).then(|| 1.0 - min_d))
}

/// `S = 1 - min(d, 1)`.
pub fn similarity(d: f64) -> f64 {
    1.0 - d.min(1.0)
}

/// References whose similarity exceeds `threshold`.
pub fn vote_count(distances: &[(String, f64)], threshold: f64) -> usize {
    distances.iter().filter(|(_, d)| similarity(*d) > threshold).count()
}

fn check_threshold(t: f64) -> Result<()> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("similarity threshold {t} outside (0, 1)")))
    }
}

/// Attribution outcome: an artist, or no artist received a vote.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    Artist(ArtistLabel),
    None,
}

impl Serialize for Decision {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Decision::Artist(a) => a.serialize(s),
            Decision::None => s.serialize_str("none"),
        }
    }
}

impl<'de> Deserialize<'de> for Decision {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Tag(String),
            Artist(ArtistLabel),
        }
        match Raw::deserialize(d)? {
            Raw::Tag(t) if t == "none" => Ok(Decision::None),
            Raw::Tag(t) => Err(de::Error::custom(format!("expected \"none\" or an artist, got {t:?}"))),
            Raw::Artist(a) => Ok(Decision::Artist(a)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtistEvidence {
    pub artist: ArtistLabel,
    pub min_distance: f64,
    /// `null` when the nearest reference is farther than 1.
    pub probability: Option<f64>,
    pub vote_count: usize,
    pub nearest_reference: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributionReport {
    /// Record id or file path of the query.
    pub query: String,
    pub per_artist: Vec<ArtistEvidence>,
    pub decision: Decision,
    pub threshold_used: f64,
}

impl AttributionReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn evidence_for(&self, artist: &str) -> Option<&ArtistEvidence> {
        self.per_artist.iter().find(|e| e.artist.name == artist)
    }
}

/// Most votes wins; ties go to the smaller minimum distance, then the
/// smaller artist id. No votes at all gives [`Decision::None`].
pub fn decide(evidence: &[ArtistEvidence]) -> Decision {
    evidence
        .iter()
        .filter(|e| e.vote_count > 0)
        .min_by(|a, b| {
            b.vote_count
                .cmp(&a.vote_count)
                .then(a.min_distance.total_cmp(&b.min_distance))
                .then(a.artist.id.cmp(&b.artist.id))
        })
        .map_or(Decision::None, |e| Decision::Artist(e.artist.clone()))
}

/// Full report (probabilities, votes, nearest evidence) from precomputed
/// distances.
pub fn attribute(query: &str, per_artist: &[ArtistDistances], threshold: f64) -> Result<AttributionReport> {
    check_threshold(threshold)?;
    if per_artist.is_empty() {
        return Err(Error::Empty("reference sets"));
    }
    let mut evidence = Vec::with_capacity(per_artist.len());
    for a in per_artist {
        let nearest = min_distance(&a.distances)?;
        evidence.push(ArtistEvidence {
            artist: a.artist.clone(),
            min_distance: nearest.distance,
            probability: attribution_probability(nearest.distance)?,
            vote_count: vote_count(&a.distances, threshold),
            nearest_reference: nearest.record,
        });
    }
    Ok(AttributionReport {
        query: query.to_owned(),
        decision: decide(&evidence),
        per_artist: evidence,
        threshold_used: threshold,
    })
}

/// Same as [`attribute`]; named after the voting rule it applies.
pub fn vote_attribute(query: &str, per_artist: &[ArtistDistances], threshold: f64) -> Result<AttributionReport> {
    attribute(query, per_artist, threshold)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dists(artist: ArtistLabel, ds: &[f64]) -> ArtistDistances {
        ArtistDistances {
            distances: ds
                .iter()
                .enumerate()
                .map(|(i, d)| (format!("{}-{i}", artist.slug()), *d))
                .collect(),
            artist,
        }
    }

    fn a() -> ArtistLabel {
        ArtistLabel::new("A", 0)
    }

    fn b() -> ArtistLabel {
        ArtistLabel::new("B", 1)
    }

    #[test]
    fn probability_contract() {
        assert_eq!(attribution_probability(0.0).unwrap(), Some(1.0));
        assert!((attribution_probability(0.3).unwrap().unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(attribution_probability(1.0).unwrap(), Some(0.0));
        assert_eq!(attribution_probability(1.2).unwrap(), None);
        assert!(attribution_probability(-0.01).is_err());
    }

    #[test]
    fn min_distance_ties_and_errors() {
        let d = vec![("r2".to_string(), 0.4), ("r1".to_string(), 0.4), ("r0".to_string(), 0.9)];
        let n = min_distance(&d).unwrap();
        assert_eq!((n.distance, n.record.as_str()), (0.4, "r1"));
        assert!(min_distance(&[]).is_err());
        assert!(min_distance(&[("x".into(), -1.0)]).is_err());
    }

    #[test]
    fn two_artist_fixture() {
        let r = attribute("q", &[dists(a(), &[0.1, 0.2, 0.9]), dists(b(), &[0.8, 0.85, 0.9])], 0.5).unwrap();
        assert_eq!(r.per_artist[0].vote_count, 2);
        assert_eq!(r.per_artist[1].vote_count, 0);
        assert_eq!(r.decision, Decision::Artist(a()));
        assert_eq!(r.per_artist[0].nearest_reference, "a-0");
    }

    #[test]
    fn ties_go_to_smaller_distance_then_id() {
        let r = attribute("q", &[dists(a(), &[0.2, 0.9]), dists(b(), &[0.3, 0.9])], 0.5).unwrap();
        assert_eq!(r.decision, Decision::Artist(a()));
        let r = attribute("q", &[dists(b(), &[0.25]), dists(a(), &[0.25])], 0.5).unwrap();
        assert_eq!(r.decision, Decision::Artist(a()));
    }

    #[test]
    fn far_query_decides_none() {
        let r = attribute("q", &[dists(a(), &[1.0, 3.0]), dists(b(), &[1.5])], 0.1).unwrap();
        assert!(r.per_artist.iter().all(|e| e.vote_count == 0));
        assert_eq!(r.decision, Decision::None);
        assert_eq!(r.per_artist[1].probability, None);
        let json = r.to_json().unwrap();
        assert!(json.contains("\"decision\": \"none\""));
        assert!(json.contains("\"probability\": null"));
    }

    #[test]
    fn report_round_trips() {
        let r = attribute("q.png", &[dists(a(), &[0.1234567891, 1.7]), dists(b(), &[0.3333333333333333])], 0.3).unwrap();
        assert_eq!(AttributionReport::from_json(&r.to_json().unwrap()).unwrap(), r);
        assert!(AttributionReport::from_json(&r.to_json().unwrap().replace("\"threshold_used\"", "\"extra\": 1, \"threshold_used\"")).is_err());
    }

    #[test]
    fn threshold_domain() {
        assert!(attribute("q", &[dists(a(), &[0.1])], 0.0).is_err());
        assert!(attribute("q", &[dists(a(), &[0.1])], 1.0).is_err());
    }

    #[test]
    fn reference_sets_from_manifest() {
        let mut m = DatasetManifest::new(vec![a(), b()], 0);
        m.records.push(ArtworkRecord::original("a1", "a1.png", &a()));
        m.records.push(ArtworkRecord::synthetic("a2", "a2.png", &a(), "x, by A"));
        m.records.push(ArtworkRecord::original("b1", "b1.png", &b()));
        let sets = ReferenceSet::all_from_manifest(&m, ReferenceKind::Original, None).unwrap();
        assert_eq!(sets[0].records, vec!["a1"]);
        assert_eq!(ReferenceSet::from_manifest(&m, &a(), ReferenceKind::Both, None).unwrap().records.len(), 2);
        assert!(ReferenceSet::from_manifest(&m, &b(), ReferenceKind::Synthetic, None).is_err());
        sets[0].validate(&m).unwrap();
        let bad = ReferenceSet {
            artist: a(),
            records: vec!["b1".into()],
            kind: ReferenceKind::Original,
        };
        assert!(bad.validate(&m).is_err());
    }
}
