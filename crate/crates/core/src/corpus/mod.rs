//! Dataset contract: artists, artwork records and the JSON Lines manifest
//! that ties image files to labels, provenance and split assignment.

mod fetch;
mod manifest;
mod mix;
mod prompts;
mod split;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

pub use fetch::{fetch_gallery, FetchOutcome, GallerySource, IMAGE_EXTENSIONS};
pub use manifest::{
    validate_manifest, ArtistCounts, DatasetManifest, ManifestHeader, ValidationReport,
    Violation, ViolationKind, MANIFEST_VERSION,
};
pub use mix::build_mixed_dataset;
pub use prompts::{build_prompts, write_prompts, PromptBatch, PromptLine, DEFAULT_IMAGES_PER_PROMPT};
pub use split::{split_dataset, TrainFraction};

/// Separator inserted between a descriptive context and the artist name.
pub const ARTIST_SUFFIX_SEPARATOR: &str = ", by ";

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ArtistLabel {
    pub name: String,
    pub id: u32,
}

impl ArtistLabel {
    pub fn new(name: impl Into<String>, id: u32) -> Self {
        Self {
            name: name.into(),
            id,
        }
    }

    /// Lowercase ascii slug used for directory names.
    pub fn slug(&self) -> String {
        let mut out = String::with_capacity(self.name.len());
        for c in self.name.chars() {
            if c.is_ascii_alphanumeric() {
                out.push(c.to_ascii_lowercase());
            } else if !out.ends_with('-') && !out.is_empty() {
                out.push('-');
            }
        }
        while out.ends_with('-') {
            out.pop();
        }
        out
    }
}

impl fmt::Display for ArtistLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

/// The five artists of the reference dataset, in id order.
pub fn reference_artists() -> Vec<ArtistLabel> {
    [
        "Alfred Sisley",
        "Claude Monet",
        "Pablo Picasso",
        "Paul Cezanne",
        "Pierre-Auguste Renoir",
    ]
    .iter()
    .enumerate()
    .map(|(i, n)| ArtistLabel::new(*n, i as u32))
    .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Original,
    Synthetic,
}

impl Provenance {
    pub const ALL: [Provenance; 2] = [Provenance::Original, Provenance::Synthetic];

    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Original => "original",
            Provenance::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "original" => Ok(Provenance::Original),
            "synthetic" => Ok(Provenance::Synthetic),
            other => Err(Error::MalformedInput(format!("unknown provenance {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    #[default]
    Unassigned,
}

/// One image of the corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtworkRecord {
    pub id: String,
    /// Path relative to the corpus root.
    pub path: String,
    /// Artist name; must match an entry of the manifest's artist list.
    pub artist: String,
    pub provenance: Provenance,
    pub prompt: Option<String>,
    #[serde(default)]
    pub split: Split,
    #[serde(default)]
    pub excluded: bool,
    pub checksum: String,
}

impl ArtworkRecord {
    pub fn original(id: impl Into<String>, path: impl Into<String>, artist: &ArtistLabel) -> Self {
        Self {
            id: id.into(),
            path: path.into(),
            artist: artist.name.clone(),
            provenance: Provenance::Original,
            prompt: None,
            split: Split::Unassigned,
            excluded: false,
            checksum: String::new(),
        }
    }

    pub fn synthetic(
        id: impl Into<String>,
        path: impl Into<String>,
        artist: &ArtistLabel,
        prompt: impl Into<String>,
    ) -> Self {
        Self {
            prompt: Some(prompt.into()),
            provenance: Provenance::Synthetic,
            ..Self::original(id, path, artist)
        }
    }

    /// Records that take part in training and evaluation.
    pub fn is_active(&self) -> bool {
        !self.excluded
    }
}
