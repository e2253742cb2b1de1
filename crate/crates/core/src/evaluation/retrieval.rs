use std::collections::BTreeMap;
use std::io::Read;

use rand::seq::IndexedRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::ImageStore;
use crate::corpus::{ArtworkRecord, DatasetManifest, Provenance};
use crate::error::{Error, Result};
use crate::seed::{rng_for, sha256_hex};
use crate::siamese::{euclidean, MetricModel};

pub const DEFAULT_THRESHOLDS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
pub const DEFAULT_N_MAX: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelledId {
    pub id: String,
    pub artist: String,
}

impl LabelledId {
    pub fn new(id: impl Into<String>, artist: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            artist: artist.into(),
        }
    }

    fn of(r: &ArtworkRecord) -> Self {
        Self::new(&r.id, &r.artist)
    }
}

/// d̂ from every query (rows) to every gallery item (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub queries: Vec<LabelledId>,
    pub gallery: Vec<LabelledId>,
    pub values: Vec<Vec<f64>>,
}

impl DistanceMatrix {
    pub fn new(queries: Vec<LabelledId>, gallery: Vec<LabelledId>, values: Vec<Vec<f64>>) -> Result<Self> {
        if values.len() != queries.len() {
            return Err(Error::DimensionMismatch {
                expected: queries.len(),
                actual: values.len(),
            });
        }
        for row in &values {
            if row.len() != gallery.len() {
                return Err(Error::DimensionMismatch {
                    expected: gallery.len(),
                    actual: row.len(),
                });
            }
            if let Some(bad) = row.iter().find(|d| d.is_nan() || **d < 0.0) {
                return Err(Error::NegativeDistance(*bad));
            }
        }
        Ok(Self {
            queries,
            gallery,
            values,
        })
    }

    /// Embeds queries and gallery with `model` and fills the matrix.
    pub fn compute(
        model: &MetricModel,
        queries: &[&ArtworkRecord],
        gallery: &[&ArtworkRecord],
        images: &ImageStore,
        batch_size: usize,
    ) -> Result<Self> {
        let q = model.model().embed_records(queries, images, batch_size)?;
        let g = model.model().embed_records(gallery, images, batch_size)?;
        let values = q
            .par_iter()
            .map(|qe| g.iter().map(|ge| euclidean(&qe.values, &ge.values)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            queries.iter().map(|r| LabelledId::of(r)).collect(),
            gallery.iter().map(|r| LabelledId::of(r)).collect(),
            values,
        )
    }

    /// Hash of the query ids and artists, identifying the query draw.
    pub fn query_fingerprint(&self) -> String {
        let mut text = String::new();
        for q in &self.queries {
            text.push_str(&q.id);
            text.push('\t');
            text.push_str(&q.artist);
            text.push('\n');
        }
        sha256_hex(text.as_bytes())
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            queries: rows.iter().map(|&i| self.queries[i].clone()).collect(),
            gallery: self.gallery.clone(),
            values: rows.iter().map(|&i| self.values[i].clone()).collect(),
        }
    }

    /// CSV: a header of gallery ids, a second row of gallery artists, then
    /// one row per query (`id, artist, distances...`).
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["query".to_owned(), "artist".to_owned()];
        header.extend(self.gallery.iter().map(|g| g.id.clone()));
        w.write_record(&header)?;
        let mut artists = vec![String::new(), String::new()];
        artists.extend(self.gallery.iter().map(|g| g.artist.clone()));
        w.write_record(&artists)?;
        for (q, row) in self.queries.iter().zip(&self.values) {
            let mut rec = vec![q.id.clone(), q.artist.clone()];
            rec.extend(row.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.into_inner().map_err(|e| Error::Plot(e.to_string()))
    }

    pub fn from_csv(reader: impl Read) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(reader);
        let mut rows = r.records();
        let mut next = |what: &str| -> Result<csv::StringRecord> {
            rows.next()
                .ok_or_else(|| Error::MalformedInput(format!("distance matrix CSV lacks {what}")))?
                .map_err(Error::from)
        };
        let header = next("a header")?;
        let artists = next("the gallery artist row")?;
        let gallery: Vec<LabelledId> = header
            .iter()
            .skip(2)
            .zip(artists.iter().skip(2))
            .map(|(id, a)| LabelledId::new(id, a))
            .collect();
        let mut queries = Vec::new();
        let mut values = Vec::new();
        for rec in rows {
            let rec = rec?;
            let mut it = rec.iter();
            let id = it.next().unwrap_or_default();
            let artist = it.next().unwrap_or_default();
            queries.push(LabelledId::new(id, artist));
            values.push(
                it.map(|v| {
                    v.parse::<f64>()
                        .map_err(|e| Error::MalformedInput(format!("distance {v:?}: {e}")))
                })
                .collect::<Result<Vec<_>>>()?,
            );
        }
        Self::new(queries, gallery, values)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalPoint {
    pub n: usize,
    pub q_n: usize,
    pub q: usize,
    /// `Q_n / Q`; `None` when no query is answerable.
    pub p_n: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSummary {
    pub threshold: f64,
    pub per_n: Vec<RetrievalPoint>,
    /// Queries without any gallery item within the threshold.
    pub unanswerable: Vec<String>,
    pub query_fingerprint: String,
}

impl RetrievalSummary {
    pub fn p(&self, n: usize) -> Option<f64> {
        self.per_n.get(n.checked_sub(1)?).and_then(|p| p.p_n)
    }
}

fn check_thresholds(thresholds: &[f64], n_max: usize) -> Result<()> {
    if thresholds.is_empty() {
        return Err(Error::InvalidConfig("no retrieval thresholds".into()));
    }
    if let Some(t) = thresholds.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
        return Err(Error::InvalidConfig(format!("retrieval threshold {t} outside (0, 1]")));
    }
    if n_max == 0 {
        return Err(Error::InvalidConfig("n_max must be at least 1".into()));
    }
    Ok(())
}

/// Rank (1-based) of the first same-artist item among gallery items with
/// d̂ <= `t`, ordered by distance then id. `Err(())` when nothing passes.
fn first_hit(matrix: &DistanceMatrix, row: usize, t: f64) -> std::result::Result<Option<usize>, ()> {
    let mut passing: Vec<(f64, &str, &str)> = matrix.values[row]
        .iter()
        .zip(&matrix.gallery)
        .filter(|(d, _)| **d <= t)
        .map(|(d, g)| (*d, g.id.as_str(), g.artist.as_str()))
        .collect();
    if passing.is_empty() {
        return Err(());
    }
    passing.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)));
    let artist = matrix.queries[row].artist.as_str();
    Ok(passing.iter().position(|p| p.2 == artist).map(|i| i + 1))
}

/// P(n) = Q_n / Q for every threshold and n in `1..=n_max`.
pub fn retrieval_test(matrix: &DistanceMatrix, thresholds: &[f64], n_max: usize) -> Result<Vec<RetrievalSummary>> {
    check_thresholds(thresholds, n_max)?;
    if matrix.gallery.is_empty() {
        return Err(Error::Empty("retrieval gallery"));
    }
    for q in &matrix.queries {
        if !matrix.gallery.iter().any(|g| g.artist == q.artist) {
            return Err(Error::MalformedInput(format!(
                "query {} has no gallery image of {}",
                q.id, q.artist
            )));
        }
    }
    let fingerprint = matrix.query_fingerprint();
    Ok(thresholds
        .iter()
        .map(|&t| {
            let mut hits = Vec::new();
            let mut unanswerable = Vec::new();
            for (i, q) in matrix.queries.iter().enumerate() {
                match first_hit(matrix, i, t) {
                    Ok(h) => hits.push(h),
                    Err(()) => unanswerable.push(q.id.clone()),
                }
            }
            let q = hits.len();
            let per_n = (1..=n_max)
                .map(|n| {
                    let q_n = hits.iter().filter(|h| h.is_some_and(|r| r <= n)).count();
                    RetrievalPoint {
                        n,
                        q_n,
                        q,
                        p_n: (q > 0).then(|| q_n as f64 / q as f64),
                    }
                })
                .collect();
            RetrievalSummary {
                threshold: t,
                per_n,
                unanswerable,
                query_fingerprint: fingerprint.clone(),
            }
        })
        .collect())
}

/// Draws `per_artist` active synthetic records of every artist as queries.
pub fn select_queries<'m>(
    manifest: &'m DatasetManifest,
    per_artist: usize,
    seed: u64,
    repeat: usize,
) -> Result<Vec<&'m ArtworkRecord>> {
    let mut by_artist: BTreeMap<usize, Vec<&ArtworkRecord>> = BTreeMap::new();
    for r in manifest.records.iter().filter(|r| r.is_active() && r.provenance == Provenance::Synthetic) {
        by_artist.entry(manifest.class_of(r)?).or_default().push(r);
    }
    let mut rng = rng_for(seed, &format!("retrieval/queries/{repeat}"));
    let mut out = Vec::new();
    for (i, a) in manifest.artists.iter().enumerate() {
        let pool = by_artist.get_mut(&i).filter(|p| p.len() >= per_artist).ok_or_else(|| {
            Error::MalformedInput(format!("{a} has fewer than {per_artist} synthetic query candidates"))
        })?;
        pool.sort_by(|x, y| x.id.cmp(&y.id));
        out.extend(pool.choose_multiple(&mut rng, per_artist).copied());
    }
    Ok(out)
}

/// Mean and sample standard deviation of P(n) over repeated query draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalStat {
    pub threshold: f64,
    pub n: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// Draws in which P(n) was defined.
    pub repeats: usize,
}

/// Aggregates `retrieval_test` over several query subsets (row indices
/// into `matrix`).
pub fn retrieval_repeated(
    matrix: &DistanceMatrix,
    draws: &[Vec<usize>],
    thresholds: &[f64],
    n_max: usize,
) -> Result<Vec<RetrievalStat>> {
    if draws.is_empty() {
        return Err(Error::Empty("query draws"));
    }
    let runs = draws
        .iter()
        .map(|rows| retrieval_test(&matrix.select_rows(rows), thresholds, n_max))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for (ti, &t) in thresholds.iter().enumerate() {
        for n in 1..=n_max {
            let xs: Vec<f64> = runs.iter().filter_map(|r| r[ti].per_n[n - 1].p_n).collect();
            let k = xs.len();
            let mean = (k > 0).then(|| xs.iter().sum::<f64>() / k as f64);
            let std = mean.map(|m| {
                if k < 2 {
                    0.0
                } else {
                    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (k - 1) as f64).sqrt()
                }
            });
            out.push(RetrievalStat {
                threshold: t,
                n,
                mean,
                std,
                repeats: k,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DistanceMatrix {
        DistanceMatrix::new(
            vec![LabelledId::new("q0", "A"), LabelledId::new("q1", "B")],
            vec![
                LabelledId::new("g0", "A"),
                LabelledId::new("g1", "B"),
                LabelledId::new("g2", "B"),
            ],
            vec![vec![0.05, 0.3, 0.3], vec![0.2, 0.2, 0.9]],
        )
        .unwrap()
    }

    #[test]
    fn nearest_same_artist_succeeds_at_one() {
        let s = retrieval_test(&tiny(), &[0.1], 3).unwrap();
        assert_eq!(s[0].per_n[0].q, 1);
        assert_eq!(s[0].p(1), Some(1.0));
        assert_eq!(s[0].unanswerable, vec!["q1"]);
    }

    #[test]
    fn id_breaks_distance_ties() {
        // q1 sees g0 (A) and g1 (B) at 0.2; g0 sorts first, so the hit is at rank 2.
        let s = retrieval_test(&tiny(), &[0.25], 2).unwrap();
        assert_eq!(s[0].per_n[0].q_n, 1);
        assert_eq!(s[0].per_n[1].q_n, 2);
    }

    #[test]
    fn threshold_below_everything() {
        let s = retrieval_test(&tiny(), &[0.01], 2).unwrap();
        assert_eq!(s[0].per_n[0].q, 0);
        assert_eq!(s[0].p(1), None);
        assert_eq!(s[0].unanswerable.len(), 2);
    }

    #[test]
    fn preconditions() {
        assert!(retrieval_test(&tiny(), &[0.0], 2).is_err());
        assert!(retrieval_test(&tiny(), &[1.5], 2).is_err());
        assert!(retrieval_test(&tiny(), &[0.5], 0).is_err());
        let lonely = DistanceMatrix::new(
            vec![LabelledId::new("q", "C")],
            vec![LabelledId::new("g", "A")],
            vec![vec![0.1]],
        )
        .unwrap();
        assert!(retrieval_test(&lonely, &[0.5], 1).is_err());
        assert!(DistanceMatrix::new(vec![], vec![], vec![]).map(|m| retrieval_test(&m, &[0.5], 1)).unwrap().is_err());
    }

    #[test]
    fn csv_round_trip() {
        let m = tiny();
        let back = DistanceMatrix::from_csv(m.to_csv().unwrap().as_slice()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn repeated_draws_aggregate() {
        let stats = retrieval_repeated(&tiny(), &[vec![0], vec![1], vec![0, 1]], &[0.5], 1).unwrap();
        // Draw P(1): q0 alone 1.0, q1 alone 0.0 (g0 at 0.2 ranks first), both 0.5.
        assert_eq!(stats[0].mean, Some(0.5));
        assert!((stats[0].std.unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(stats[0].repeats, 3);
    }
}
