//! Procedurally generated stand-in corpus: each "artist" is a style with
//! its own palette and stripe texture, and "synthetic" images are the same
//! styles pushed through a fixed domain shift.

use std::f32::consts::PI;
use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, Rgb, RgbImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{ArtistLabel, ArtworkRecord, DatasetManifest, ARTIST_SUFFIX_SEPARATOR};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::seed::{rng_for, sha256_hex};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub styles: usize,
    pub originals_per_style: usize,
    pub synthetics_per_style: usize,
    pub edge: u32,
    /// Strength of the synthetic-domain shift in [0, 1].
    pub shift: f32,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            styles: 5,
            originals_per_style: 40,
            synthetics_per_style: 40,
            edge: 32,
            shift: 0.6,
            seed: 0,
        }
    }
}

/// Base colours, one per style, spaced around the hue circle.
const PALETTE: [[f32; 3]; 8] = [
    [200.0, 60.0, 50.0],
    [60.0, 170.0, 70.0],
    [50.0, 80.0, 200.0],
    [210.0, 190.0, 60.0],
    [160.0, 60.0, 190.0],
    [50.0, 180.0, 190.0],
    [220.0, 130.0, 40.0],
    [120.0, 120.0, 120.0],
];

pub fn toy_artists(styles: usize) -> Vec<ArtistLabel> {
    (0..styles)
        .map(|i| ArtistLabel::new(format!("Toy Style {}", (b'A' + i as u8) as char), i as u32))
        .collect()
}

/// One image of `style`: a stripe pattern at the style's angle and
/// frequency, tinted with the style's colour, with per-image jitter.
pub fn render_style(style: usize, edge: u32, rng: &mut ChaCha8Rng) -> RgbImage {
    let base = PALETTE[style % PALETTE.len()];
    let angle = style as f32 * PI / 5.0 + rng.random_range(-0.15..0.15);
    let freq = 0.25 + 0.12 * (style % 4) as f32 + rng.random_range(-0.02..0.02);
    let phase = rng.random_range(0.0..2.0 * PI);
    let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(-18.0..18.0));
    let noise = Normal::new(0.0f32, 14.0).expect("valid sigma");
    let (c, s) = (angle.cos(), angle.sin());
    RgbImage::from_fn(edge, edge, |x, y| {
        let t = (x as f32 * c + y as f32 * s) * freq + phase;
        let stripe = 0.65 + 0.35 * t.sin();
        Rgb(std::array::from_fn(|k| {
            (base[k] * stripe + tint[k] + noise.sample(rng)).clamp(0.0, 255.0) as u8
        }))
    })
}

/// Domain shift applied to make "synthetic" images: a partial rotation of
/// the colour channels plus a fine diagonal grating.
pub fn perturb(img: &RgbImage, shift: f32) -> RgbImage {
    RgbImage::from_fn(img.width(), img.height(), |x, y| {
        let p = img.get_pixel(x, y).0.map(f32::from);
        let grating = shift * if (x + y) % 2 == 0 { 30.0 } else { -30.0 };
        Rgb(std::array::from_fn(|k| {
            let rotated = p[(k + 1) % 3];
            ((1.0 - shift) * p[k] + shift * rotated + grating).clamp(0.0, 255.0) as u8
        }))
    })
}

fn png_bytes(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::MalformedInput(format!("png encoding failed: {e}")))?;
    Ok(out.into_inner())
}

/// Writes the corpus under `root` and returns its manifest (unsplit).
pub fn generate_toy_corpus(root: &Path, cfg: &ToyConfig) -> Result<DatasetManifest> {
    if cfg.styles < 2 || cfg.styles > PALETTE.len() {
        return Err(Error::InvalidConfig(format!("toy corpus needs 2..={} styles", PALETTE.len())));
    }
    if cfg.edge < 32 || !(0.0..=1.0).contains(&cfg.shift) {
        return Err(Error::InvalidConfig("toy edge must be >= 32 and shift within [0, 1]".into()));
    }
    let artists = toy_artists(cfg.styles);
    let mut manifest = DatasetManifest::new(artists.clone(), cfg.seed);
    for (style, artist) in artists.iter().enumerate() {
        let slug = artist.slug();
        let mut rng = rng_for(cfg.seed, &format!("toy/{slug}"));
        for i in 0..cfg.originals_per_style {
            let img = render_style(style, cfg.edge, &mut rng);
            let path = format!("original/{slug}/{i:03}.png");
            let mut rec = ArtworkRecord::original(format!("{slug}/original/{i:03}"), &path, artist);
            rec.checksum = write_image(root, &path, &img)?;
            manifest.records.push(rec);
        }
        for i in 0..cfg.synthetics_per_style {
            let img = perturb(&render_style(style, cfg.edge, &mut rng), cfg.shift);
            let path = format!("synthetic/{slug}/{i:03}.png");
            let prompt = format!("Procedural scene {i}{ARTIST_SUFFIX_SEPARATOR}{}", artist.name);
            let mut rec = ArtworkRecord::synthetic(format!("{slug}/synthetic/{i:03}"), &path, artist, prompt);
            rec.checksum = write_image(root, &path, &img)?;
            manifest.records.push(rec);
        }
    }
    Ok(manifest)
}

fn write_image(root: &Path, rel: &str, img: &RgbImage) -> Result<String> {
    let bytes = png_bytes(img)?;
    write_atomic(&root.join(rel), &bytes)?;
    Ok(sha256_hex(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::validate_manifest;

    #[test]
    fn corpus_is_valid_and_deterministic() {
        let cfg = ToyConfig {
            styles: 3,
            originals_per_style: 4,
            synthetics_per_style: 2,
            ..Default::default()
        };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ma = generate_toy_corpus(a.path(), &cfg).unwrap();
        let mb = generate_toy_corpus(b.path(), &cfg).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(ma.records.len(), 18);
        let report = validate_manifest(&ma, Some(a.path()));
        assert!(report.is_valid(), "{:?}", report.violations);
        assert_eq!(report.counts_for("Toy Style B").unwrap().synthetic, 2);
    }

    #[test]
    fn perturbation_changes_pixels() {
        let mut rng = rng_for(0, "t");
        let img = render_style(0, 32, &mut rng);
        assert_ne!(perturb(&img, 0.6), img);
        assert_eq!(perturb(&img, 0.0), img);
    }
}
