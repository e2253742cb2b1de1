use rand::seq::SliceRandom;

use super::{DatasetManifest, Provenance, Split};
use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Draws exactly `quota` originals and `quota` synthetics per artist,
/// without replacement. Output records keep their manifest order and have
/// their split reset so the mixed set can be split on its own.
pub fn build_mixed_dataset(
    manifest: &DatasetManifest,
    quota: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    if quota == 0 {
        return Err(Error::InvalidConfig("per-class quota must be positive".into()));
    }
    let mut chosen = vec![false; manifest.records.len()];
    for artist in &manifest.artists {
        for provenance in Provenance::ALL {
            let mut pool: Vec<usize> = manifest
                .records
                .iter()
                .enumerate()
                .filter(|(_, r)| r.is_active() && r.artist == artist.name && r.provenance == provenance)
                .map(|(i, _)| i)
                .collect();
            if pool.len() < quota {
                return Err(Error::QuotaUnmet {
                    artist: artist.name.clone(),
                    provenance: provenance.to_string(),
                    available: pool.len(),
                    quota,
                });
            }
            pool.sort_by(|&a, &b| manifest.records[a].id.cmp(&manifest.records[b].id));
            let mut rng = rng_for(seed, &format!("mix/{}/{provenance}", artist.name));
            pool.shuffle(&mut rng);
            for &i in &pool[..quota] {
                chosen[i] = true;
            }
        }
    }
    let records = manifest
        .records
        .iter()
        .zip(&chosen)
        .filter(|(_, &keep)| keep)
        .map(|(r, _)| {
            let mut r = r.clone();
            r.split = Split::Unassigned;
            r
        })
        .collect();
    Ok(DatasetManifest {
        artists: manifest.artists.clone(),
        records,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{reference_artists, ArtworkRecord};

    fn toy(originals: usize, synthetics: usize) -> DatasetManifest {
        let artists = reference_artists()[..2].to_vec();
        let mut m = DatasetManifest::new(artists.clone(), 0);
        for a in &artists {
            for i in 0..originals {
                m.records.push(ArtworkRecord::original(format!("{}-o{i}", a.id), "x", a));
            }
            for i in 0..synthetics {
                m.records.push(ArtworkRecord::synthetic(
                    format!("{}-s{i}", a.id),
                    "x",
                    a,
                    format!("scene, by {}", a.name),
                ));
            }
        }
        m
    }

    #[test]
    fn quota_one_on_two_artists() {
        let mixed = build_mixed_dataset(&toy(3, 3), 1, 5).unwrap();
        assert_eq!(mixed.records.len(), 4);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let m = toy(10, 10);
        let a = build_mixed_dataset(&m, 4, 1).unwrap();
        assert_eq!(a, build_mixed_dataset(&m, 4, 1).unwrap());
        let ids = |m: &DatasetManifest| m.records.iter().map(|r| r.id.clone()).collect::<Vec<_>>();
        assert_ne!(ids(&a), ids(&build_mixed_dataset(&m, 4, 2).unwrap()));
    }

    #[test]
    fn excluded_records_not_drawn() {
        let mut m = toy(2, 2);
        m.records[0].excluded = true;
        match build_mixed_dataset(&m, 2, 0) {
            Err(Error::QuotaUnmet { artist, available, .. }) => {
                assert_eq!(artist, "Alfred Sisley");
                assert_eq!(available, 1);
            }
            other => panic!("{other:?}"),
        }
    }
}
