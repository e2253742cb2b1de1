use std::collections::HashSet;
use std::io::BufRead;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PairLabel;
use crate::corpus::DatasetManifest;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::seed::rng_for;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSample {
    pub first: String,
    pub second: String,
    pub y: PairLabel,
}

/// Draws `n_pairs` labelled pairs from the active records of `manifest`.
///
/// `round(positive_fraction * n_pairs)` pairs share an artist; the rest
/// do not. No unordered pair appears twice. Positive pairs pick an artist
/// uniformly, negative pairs pick two distinct artists uniformly, so small
/// artists are not drowned out by large ones.
pub fn sample_pairs(
    manifest: &DatasetManifest,
    n_pairs: usize,
    positive_fraction: f64,
    seed: u64,
    epoch: u64,
) -> Result<Vec<PairSample>> {
    sample_pairs_labelled(manifest, n_pairs, positive_fraction, seed, &format!("pairs/epoch/{epoch}"))
}

pub(crate) fn sample_pairs_labelled(
    manifest: &DatasetManifest,
    n_pairs: usize,
    positive_fraction: f64,
    seed: u64,
    label: &str,
) -> Result<Vec<PairSample>> {
    if !(0.0..=1.0).contains(&positive_fraction) {
        return Err(Error::PairSampling(format!(
            "positive fraction {positive_fraction} outside [0, 1]"
        )));
    }
    let groups = groups(manifest)?;
    let n_pos = (positive_fraction * n_pairs as f64).round() as usize;
    let n_neg = n_pairs - n_pos;

    if n_pos > 0 {
        if let Some((artist, _)) = groups.iter().find(|(_, ids)| ids.len() < 2) {
            return Err(Error::PairSampling(format!(
                "artist {artist} has fewer than 2 records, so positive pairs cannot be drawn"
            )));
        }
    }
    if n_neg > 0 && groups.len() < 2 {
        return Err(Error::PairSampling("negative pairs need at least 2 artists".into()));
    }
    let sizes: Vec<u128> = groups.iter().map(|(_, g)| g.len() as u128).collect();
    let pos_cap: u128 = sizes.iter().map(|n| n * (n - 1) / 2).sum();
    let total: u128 = sizes.iter().sum();
    let neg_cap = (total * total - sizes.iter().map(|n| n * n).sum::<u128>()) / 2;
    if n_pos as u128 > pos_cap || n_neg as u128 > neg_cap {
        return Err(Error::PairSampling(format!(
            "requested {n_pos} positive / {n_neg} negative pairs, only {pos_cap} / {neg_cap} distinct pairs exist"
        )));
    }

    let mut rng = rng_for(seed, label);
    let mut out = Vec::with_capacity(n_pairs);
    draw(&groups, n_pos, pos_cap, true, &mut rng, &mut out);
    draw(&groups, n_neg, neg_cap, false, &mut rng, &mut out);
    out.shuffle(&mut rng);
    Ok(out)
}

type Groups<'m> = Vec<(&'m str, Vec<&'m str>)>;

fn groups(manifest: &DatasetManifest) -> Result<Groups<'_>> {
    let mut groups: Groups = manifest.artists.iter().map(|a| (a.name.as_str(), Vec::new())).collect();
    for r in manifest.records.iter().filter(|r| r.is_active()) {
        let class = manifest.class_of(r)?;
        groups[class].1.push(r.id.as_str());
    }
    groups.retain(|(_, ids)| !ids.is_empty());
    for (_, ids) in &mut groups {
        ids.sort_unstable();
    }
    if groups.len() < 2 || groups.iter().filter(|(_, g)| g.len() >= 2).count() < 2 {
        return Err(Error::PairSampling(
            "need at least 2 artists with at least 2 records each".into(),
        ));
    }
    Ok(groups)
}

fn draw(
    groups: &Groups<'_>,
    count: usize,
    capacity: u128,
    positive: bool,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<PairSample>,
) {
    if count == 0 {
        return;
    }
    let label = PairLabel::of(positive);
    let push = |out: &mut Vec<PairSample>, a: &str, b: &str| {
        out.push(PairSample {
            first: a.to_owned(),
            second: b.to_owned(),
            y: label,
        })
    };
    // Dense requests enumerate the pool; sparse ones use rejection sampling.
    if count as u128 * 2 > capacity {
        let mut pool: Vec<(&str, &str)> = Vec::new();
        for (gi, (_, g)) in groups.iter().enumerate() {
            if positive {
                for i in 0..g.len() {
                    for j in i + 1..g.len() {
                        pool.push((g[i], g[j]));
                    }
                }
            } else {
                for (_, h) in &groups[gi + 1..] {
                    for a in g {
                        for b in h {
                            pool.push((a, b));
                        }
                    }
                }
            }
        }
        pool.shuffle(rng);
        for (a, b) in pool.into_iter().take(count) {
            push(out, a, b);
        }
        return;
    }
    let eligible: Vec<usize> = (0..groups.len()).filter(|&i| !positive || groups[i].1.len() >= 2).collect();
    let mut seen: HashSet<(&str, &str)> = HashSet::with_capacity(count);
    while seen.len() < count {
        let (a, b) = if positive {
            let g = &groups[eligible[rng.random_range(0..eligible.len())]].1;
            let i = rng.random_range(0..g.len());
            let mut j = rng.random_range(0..g.len() - 1);
            if j >= i {
                j += 1;
            }
            (g[i], g[j])
        } else {
            let gi = rng.random_range(0..groups.len());
            let mut gj = rng.random_range(0..groups.len() - 1);
            if gj >= gi {
                gj += 1;
            }
            let (g, h) = (&groups[gi].1, &groups[gj].1);
            (g[rng.random_range(0..g.len())], h[rng.random_range(0..h.len())])
        };
        let key = if a < b { (a, b) } else { (b, a) };
        if seen.insert(key) {
            push(out, a, b);
        }
    }
}

/// JSON Lines export, one `{"first", "second", "y"}` object per line.
pub fn write_pairs(path: impl AsRef<Path>, pairs: &[PairSample]) -> Result<()> {
    let mut text = String::new();
    for p in pairs {
        text.push_str(&serde_json::to_string(p)?);
        text.push('\n');
    }
    write_atomic(path.as_ref(), text.as_bytes())
}

pub fn read_pairs(path: impl AsRef<Path>) -> Result<Vec<PairSample>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: PairSample = serde_json::from_str(&line)
            .map_err(|e| Error::MalformedInput(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if pair.first == pair.second {
            return Err(Error::MalformedInput(format!(
                "{}:{}: pair of a record with itself",
                path.display(),
                n + 1
            )));
        }
        out.push(pair);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ArtistLabel, ArtworkRecord};

    fn manifest(sizes: &[usize]) -> DatasetManifest {
        let artists: Vec<ArtistLabel> = (0..sizes.len())
            .map(|i| ArtistLabel::new(format!("Artist {i}"), i as u32))
            .collect();
        let mut m = DatasetManifest::new(artists.clone(), 0);
        for (a, &n) in artists.iter().zip(sizes) {
            for k in 0..n {
                m.records.push(ArtworkRecord::original(
                    format!("{}-{k:03}", a.slug()),
                    format!("{}/{k}.png", a.slug()),
                    a,
                ));
            }
        }
        m
    }

    fn artist_of(m: &DatasetManifest, id: &str) -> String {
        m.record(id).unwrap().artist.clone()
    }

    #[test]
    fn two_by_two_gives_one_of_each() {
        let m = manifest(&[2, 2]);
        let pairs = sample_pairs(&m, 2, 0.5, 0, 0).unwrap();
        assert_eq!(pairs.iter().filter(|p| p.y == PairLabel::Similar).count(), 1);
        assert_eq!(pairs.iter().filter(|p| p.y == PairLabel::Dissimilar).count(), 1);
    }

    #[test]
    fn labels_and_uniqueness() {
        let m = manifest(&[5, 9, 3]);
        for epoch in 0..5 {
            let pairs = sample_pairs(&m, 60, 0.5, 11, epoch).unwrap();
            let mut seen = HashSet::new();
            for p in &pairs {
                assert_ne!(p.first, p.second);
                let same = artist_of(&m, &p.first) == artist_of(&m, &p.second);
                assert_eq!(p.y == PairLabel::Similar, same);
                let key = if p.first < p.second { (&p.first, &p.second) } else { (&p.second, &p.first) };
                assert!(seen.insert(key), "duplicate pair {key:?}");
            }
        }
    }

    #[test]
    fn ten_thousand_pairs_balanced() {
        let m = manifest(&[60, 60, 60, 60, 60]);
        let pairs = sample_pairs(&m, 10_000, 0.5, 3, 0).unwrap();
        let pos = pairs.iter().filter(|p| p.y == PairLabel::Similar).count();
        assert!((4_900..=5_100).contains(&pos), "{pos}");
    }

    #[test]
    fn deterministic_per_seed_and_epoch() {
        let m = manifest(&[10, 10, 10]);
        let a = sample_pairs(&m, 30, 0.5, 5, 2).unwrap();
        assert_eq!(a, sample_pairs(&m, 30, 0.5, 5, 2).unwrap());
        assert_ne!(a, sample_pairs(&m, 30, 0.5, 5, 3).unwrap());
        assert_ne!(a, sample_pairs(&m, 30, 0.5, 6, 2).unwrap());
    }

    #[test]
    fn exhausts_capacity_exactly() {
        let m = manifest(&[3, 3]);
        // 3 + 3 positive pairs and 9 negative pairs exist.
        let pairs = sample_pairs(&m, 12, 0.5, 0, 0).unwrap();
        assert_eq!(pairs.len(), 12);
        assert!(sample_pairs(&m, 14, 0.5, 0, 0).is_err());
    }

    #[test]
    fn singleton_artist_blocks_positives() {
        let m = manifest(&[1, 4, 4]);
        let err = sample_pairs(&m, 10, 0.5, 0, 0).unwrap_err();
        assert!(err.to_string().contains("Artist 0"), "{err}");
        assert!(sample_pairs(&m, 10, 0.0, 0, 0).is_ok());
        assert!(sample_pairs(&manifest(&[1, 4]), 4, 0.0, 0, 0).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let m = manifest(&[4, 4]);
        let pairs = sample_pairs(&m, 8, 0.5, 1, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        write_pairs(&path, &pairs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().next().unwrap().contains("\"y\":"));
        assert_eq!(read_pairs(&path).unwrap(), pairs);
        std::fs::write(&path, "{\"first\":\"a\",\"second\":\"b\",\"y\":2}\n").unwrap();
        assert!(read_pairs(&path).is_err());
    }
}
