//! Metadata-only fixture with the per-artist counts of the released
//! dataset: 1,722 / 470, 1,702 / 1,044, 1,515 / 1,019, 1,734 / 588 and
//! 1,846 / 1,008 synthetic / original images.

use artprompt::corpus::{
    build_mixed_dataset, reference_artists, split_dataset, validate_manifest, ArtworkRecord, DatasetManifest,
    Provenance, Split, TrainFraction,
};
use artprompt::Error;

const COUNTS: [(&str, usize, usize); 5] = [
    ("Alfred Sisley", 1722, 470),
    ("Claude Monet", 1702, 1044),
    ("Pablo Picasso", 1515, 1019),
    ("Paul Cezanne", 1734, 588),
    ("Pierre-Auguste Renoir", 1846, 1008),
];

fn fixture() -> DatasetManifest {
    let artists = reference_artists();
    let mut m = DatasetManifest::new(artists.clone(), 0);
    for (name, synthetic, original) in COUNTS {
        let a = artists.iter().find(|a| a.name == name).unwrap();
        let slug = a.slug();
        for i in 0..original {
            m.records.push(ArtworkRecord::original(
                format!("{slug}/original/{i:04}"),
                format!("original/{slug}/{i:04}.jpg"),
                a,
            ));
        }
        for i in 0..synthetic {
            m.records.push(ArtworkRecord::synthetic(
                format!("{slug}/synthetic/{i:04}"),
                format!("synthetic/{slug}/{i:04}.png"),
                a,
                format!("Scene number {i}, by {name}"),
            ));
        }
    }
    m
}

#[test]
fn validate_reports_table_counts() {
    let report = validate_manifest(&fixture(), None);
    assert!(report.is_valid(), "{:?}", report.violations);
    for (name, synthetic, original) in COUNTS {
        let c = report.counts_for(name).unwrap();
        assert_eq!((c.synthetic, c.original, c.excluded), (synthetic, original, 0), "{name}");
    }
}

#[test]
fn mix_at_quota_470_is_balanced() {
    let mixed = build_mixed_dataset(&fixture(), 470, 7).unwrap();
    assert_eq!(mixed.records.len(), 4700);
    for c in validate_manifest(&mixed, None).counts {
        assert_eq!((c.original, c.synthetic), (470, 470), "{}", c.artist);
    }
    assert_eq!(mixed, build_mixed_dataset(&fixture(), 470, 7).unwrap());
    assert_ne!(mixed, build_mixed_dataset(&fixture(), 470, 8).unwrap());
}

#[test]
fn mix_at_quota_471_names_the_short_artist() {
    let err = build_mixed_dataset(&fixture(), 471, 7).unwrap_err();
    assert!(
        matches!(&err, Error::QuotaUnmet { artist, available: 470, quota: 471, .. } if artist == "Alfred Sisley"),
        "{err}"
    );
    assert!(err.to_string().contains("Alfred Sisley"));
}

#[test]
fn split_of_released_counts_is_floor_80_percent() {
    let split = split_dataset(&fixture(), TrainFraction::default(), 1).unwrap();
    for (name, synthetic, original) in COUNTS {
        for (prov, n) in [(Provenance::Synthetic, synthetic), (Provenance::Original, original)] {
            let train = split
                .records
                .iter()
                .filter(|r| r.artist == name && r.provenance == prov && r.split == Split::Train)
                .count();
            let val = split
                .records
                .iter()
                .filter(|r| r.artist == name && r.provenance == prov && r.split == Split::Val)
                .count();
            assert_eq!(train, n * 4 / 5, "{name} {prov}");
            assert_eq!(train + val, n);
        }
    }
    let other = split_dataset(&fixture(), TrainFraction::default(), 2).unwrap();
    assert_ne!(split, other, "different seeds must give different assignments");
}
