use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{DatasetManifest, Provenance, Split};
use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Exact rational train fraction, so `floor(fraction * n)` never suffers
/// from binary rounding (0.29 * 100 is 28.999... in f64).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TrainFraction {
    numer: u64,
    denom: u64,
}

impl TrainFraction {
    pub fn new(numer: u64, denom: u64) -> Result<Self> {
        if denom == 0 || numer == 0 || numer >= denom {
            return Err(Error::InvalidConfig(format!(
                "train fraction {numer}/{denom} must lie strictly between 0 and 1"
            )));
        }
        let g = gcd(numer, denom);
        Ok(Self {
            numer: numer / g,
            denom: denom / g,
        })
    }

    /// Converts through the shortest decimal representation of `value`.
    pub fn from_f64(value: f64) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::InvalidConfig(format!("train fraction {value}")));
        }
        format!("{value}").parse()
    }

    pub fn train_count(self, group_size: usize) -> usize {
        ((group_size as u128 * self.numer as u128) / self.denom as u128) as usize
    }

    pub fn as_f64(self) -> f64 {
        self.numer as f64 / self.denom as f64
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl Default for TrainFraction {
    fn default() -> Self {
        Self { numer: 4, denom: 5 }
    }
}

impl fmt::Display for TrainFraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.numer, self.denom)
    }
}

impl FromStr for TrainFraction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::InvalidConfig(format!("cannot parse train fraction {s:?}"));
        if let Some((n, d)) = s.split_once('/') {
            let n = n.trim().parse().map_err(|_| bad())?;
            let d = d.trim().parse().map_err(|_| bad())?;
            return Self::new(n, d);
        }
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if !int.chars().all(|c| c.is_ascii_digit()) || !frac.chars().all(|c| c.is_ascii_digit()) {
            return Err(bad());
        }
        if frac.len() > 18 {
            return Err(bad());
        }
        let denom = 10u64.pow(frac.len() as u32);
        let int: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
        let frac: u64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
        let numer = int
            .checked_mul(denom)
            .and_then(|v| v.checked_add(frac))
            .ok_or_else(bad)?;
        Self::new(numer, denom)
    }
}

impl TryFrom<String> for TrainFraction {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TrainFraction> for String {
    fn from(f: TrainFraction) -> String {
        f.to_string()
    }
}

/// Stratified split per (artist, provenance) group: `floor(fraction * n)`
/// records go to train and the remainder to val. Excluded records are left
/// unassigned. Groups are shuffled with a seed derived from `seed` and the
/// group name, so the result depends only on the manifest and the seed.
pub fn split_dataset(
    manifest: &DatasetManifest,
    fraction: TrainFraction,
    seed: u64,
) -> Result<DatasetManifest> {
    let mut groups: BTreeMap<(String, Provenance), Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        if r.is_active() {
            groups.entry((r.artist.clone(), r.provenance)).or_default().push(i);
        }
    }

    // A provenance used anywhere must be present for every artist.
    let used: BTreeSet<Provenance> = groups.keys().map(|(_, p)| *p).collect();
    for artist in &manifest.artists {
        for &p in &used {
            if !groups.contains_key(&(artist.name.clone(), p)) {
                return Err(Error::EmptyGroup {
                    artist: artist.name.clone(),
                    provenance: p.to_string(),
                });
            }
        }
    }

    let mut out = manifest.clone();
    out.seed = seed;
    for r in &mut out.records {
        r.split = Split::Unassigned;
    }
    for ((artist, provenance), mut members) in groups {
        members.sort_by(|&a, &b| manifest.records[a].id.cmp(&manifest.records[b].id));
        let mut rng = rng_for(seed, &format!("split/{artist}/{provenance}"));
        members.shuffle(&mut rng);
        let n_train = fraction.train_count(members.len());
        for (rank, idx) in members.into_iter().enumerate() {
            out.records[idx].split = if rank < n_train {
                Split::Train
            } else {
                Split::Val
            };
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{reference_artists, ArtworkRecord};

    fn group(n: usize) -> DatasetManifest {
        let artists = reference_artists()[..1].to_vec();
        let mut m = DatasetManifest::new(artists.clone(), 0);
        for i in 0..n {
            m.records
                .push(ArtworkRecord::original(format!("r{i:03}"), format!("{i}.png"), &artists[0]));
        }
        m
    }

    fn counts(m: &DatasetManifest) -> (usize, usize) {
        let t = m.records.iter().filter(|r| r.split == Split::Train).count();
        let v = m.records.iter().filter(|r| r.split == Split::Val).count();
        (t, v)
    }

    #[test]
    fn parses_fractions_exactly() {
        assert_eq!("0.8".parse::<TrainFraction>().unwrap(), TrainFraction::new(4, 5).unwrap());
        assert_eq!("4/5".parse::<TrainFraction>().unwrap(), TrainFraction::default());
        assert_eq!(TrainFraction::from_f64(0.29).unwrap().train_count(100), 29);
        assert!("1".parse::<TrainFraction>().is_err());
        assert!("0".parse::<TrainFraction>().is_err());
        assert!("1.5".parse::<TrainFraction>().is_err());
        assert!("-0.5".parse::<TrainFraction>().is_err());
    }

    #[test]
    fn hundred_records_split_80_20() {
        let m = split_dataset(&group(100), TrainFraction::default(), 1).unwrap();
        assert_eq!(counts(&m), (80, 20));
    }

    #[test]
    fn five_records_floor_rule() {
        let m = split_dataset(&group(5), TrainFraction::default(), 1).unwrap();
        assert_eq!(counts(&m), (4, 1));
    }

    #[test]
    fn excluded_records_get_no_split() {
        let mut m = group(6);
        m.records[0].excluded = true;
        m.records[0].split = Split::Train;
        let m = split_dataset(&m, TrainFraction::default(), 1).unwrap();
        assert_eq!(m.records[0].split, Split::Unassigned);
        assert_eq!(counts(&m), (4, 1));
    }

    #[test]
    fn missing_group_is_named() {
        let artists = reference_artists()[..2].to_vec();
        let mut m = DatasetManifest::new(artists.clone(), 0);
        m.records.push(ArtworkRecord::original("a", "a.png", &artists[0]));
        match split_dataset(&m, TrainFraction::default(), 0) {
            Err(Error::EmptyGroup { artist, provenance }) => {
                assert_eq!(artist, "Claude Monet");
                assert_eq!(provenance, "original");
            }
            other => panic!("expected EmptyGroup, got {other:?}"),
        }
    }

    #[test]
    fn assignments_enumerated_on_four_record_fixture() {
        // All C(4,2) = 6 ways of choosing the train pair.
        let base = group(4);
        let half = TrainFraction::new(1, 2).unwrap();
        let mut possible = BTreeSet::new();
        for a in 0..4 {
            for b in (a + 1)..4 {
                possible.insert(vec![a, b]);
            }
        }
        let mut observed = BTreeSet::new();
        for seed in 0..64u64 {
            let once = split_dataset(&base, half, seed).unwrap();
            let twice = split_dataset(&base, half, seed).unwrap();
            assert_eq!(once.to_jsonl().unwrap(), twice.to_jsonl().unwrap());
            let train: Vec<usize> = once
                .records
                .iter()
                .enumerate()
                .filter(|(_, r)| r.split == Split::Train)
                .map(|(i, _)| i)
                .collect();
            assert!(possible.contains(&train));
            observed.insert(train);
        }
        assert_eq!(observed, possible);
        let splits = |seed| -> Vec<Split> {
            split_dataset(&base, half, seed)
                .unwrap()
                .records
                .iter()
                .map(|r| r.split)
                .collect()
        };
        assert_ne!(splits(1), splits(2));
    }
}
