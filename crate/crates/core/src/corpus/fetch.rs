use std::fs;
use std::path::{Path, PathBuf};

use super::{ArtistLabel, ArtworkRecord};
use crate::error::{Error, Result};
use crate::seed::sha256_hex;

pub const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp", "webp"];

/// Where gallery images come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GallerySource {
    /// A local directory of image files (non-recursive).
    LocalDir(PathBuf),
    /// Direct image URLs. Requires the `net` feature.
    Urls(Vec<String>),
}

#[derive(Debug, Clone, Default)]
pub struct FetchOutcome {
    pub records: Vec<ArtworkRecord>,
    /// Files written to the destination during this call.
    pub downloaded: usize,
    /// Files already present with a matching checksum.
    pub skipped: usize,
    /// Items that could not be retrieved at all.
    pub errors: Vec<String>,
}

impl FetchOutcome {
    pub fn excluded(&self) -> usize {
        self.records.iter().filter(|r| r.excluded).count()
    }
}

/// Copies or downloads an artist's original artworks under
/// `<root>/original/<artist-slug>/` and returns one original-provenance
/// record per file. Files whose bytes do not decode as an image are kept
/// but flagged excluded. Re-running over the same source re-writes nothing.
pub fn fetch_gallery(
    artist: &ArtistLabel,
    root: &Path,
    source: &GallerySource,
) -> Result<FetchOutcome> {
    let rel_dir = PathBuf::from("original").join(artist.slug());
    let dest_dir = root.join(&rel_dir);
    fs::create_dir_all(&dest_dir).map_err(|e| Error::io(&dest_dir, e))?;

    let mut outcome = FetchOutcome::default();
    let items: Vec<(String, Result<Vec<u8>>)> = match source {
        GallerySource::LocalDir(dir) => list_images(dir)?
            .into_iter()
            .map(|p| {
                let name = p.file_name().unwrap().to_string_lossy().into_owned();
                let bytes = fs::read(&p).map_err(|e| Error::io(&p, e));
                (name, bytes)
            })
            .collect(),
        GallerySource::Urls(urls) => urls
            .iter()
            .map(|u| (url_file_name(u), download(u)))
            .collect(),
    };

    for (name, bytes) in items {
        let bytes = match bytes {
            Ok(b) => b,
            Err(e) => {
                outcome.errors.push(format!("{name}: {e}"));
                continue;
            }
        };
        let checksum = sha256_hex(&bytes);
        let dest = dest_dir.join(&name);
        let already = fs::read(&dest)
            .map(|existing| sha256_hex(&existing) == checksum)
            .unwrap_or(false);
        if already {
            outcome.skipped += 1;
        } else {
            fs::write(&dest, &bytes).map_err(|e| Error::io(&dest, e))?;
            outcome.downloaded += 1;
        }
        let stem = Path::new(&name)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| name.clone());
        let rel_path = rel_dir.join(&name);
        let mut record = ArtworkRecord::original(
            format!("{}/original/{stem}", artist.slug()),
            rel_path.to_string_lossy().replace('\\', "/"),
            artist,
        );
        record.checksum = checksum;
        if image::load_from_memory(&bytes).is_err() {
            log::warn!("{name}: not a decodable image, flagged excluded");
            record.excluded = true;
        }
        outcome.records.push(record);
    }
    Ok(outcome)
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            .unwrap_or(false);
        if path.is_file() && is_image {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn url_file_name(url: &str) -> String {
    let trimmed = url.split(['?', '#']).next().unwrap_or(url);
    let last = trimmed.rsplit('/').next().unwrap_or("");
    if last.is_empty() {
        format!("{}.img", &sha256_hex(url.as_bytes())[..16])
    } else {
        last.to_owned()
    }
}

#[cfg(feature = "net")]
fn download(url: &str) -> Result<Vec<u8>> {
    let mut response = ureq::get(url)
        .call()
        .map_err(|e| Error::MalformedInput(format!("{url}: {e}")))?;
    response
        .body_mut()
        .read_to_vec()
        .map_err(|e| Error::MalformedInput(format!("{url}: {e}")))
}

#[cfg(not(feature = "net"))]
fn download(url: &str) -> Result<Vec<u8>> {
    Err(Error::MalformedInput(format!(
        "{url}: built without the `net` feature; use a local directory source"
    )))
}
