use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArtistLabel, ArtworkRecord, Provenance, Split, ARTIST_SUFFIX_SEPARATOR};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::seed::sha256_hex;

pub const MANIFEST_VERSION: u32 = 1;

/// First line of a manifest file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub artists: Vec<ArtistLabel>,
    pub seed: u64,
    pub version: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub artists: Vec<ArtistLabel>,
    pub records: Vec<ArtworkRecord>,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn new(artists: Vec<ArtistLabel>, seed: u64) -> Self {
        Self {
            artists,
            records: Vec::new(),
            seed,
        }
    }

    pub fn artist(&self, name: &str) -> Option<&ArtistLabel> {
        self.artists.iter().find(|a| a.name == name)
    }

    pub fn record(&self, id: &str) -> Option<&ArtworkRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Maps record id to its index in `records`.
    pub fn index(&self) -> HashMap<&str, usize> {
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.as_str(), i))
            .collect()
    }

    /// Position of the record's artist in `artists`, used as a class index.
    pub fn class_of(&self, record: &ArtworkRecord) -> Result<usize> {
        self.artists
            .iter()
            .position(|a| a.name == record.artist)
            .ok_or_else(|| Error::UnknownArtist(record.artist.clone()))
    }

    /// Copy of the manifest holding only records accepted by `keep`.
    pub fn filtered(&self, keep: impl Fn(&ArtworkRecord) -> bool) -> Self {
        Self {
            artists: self.artists.clone(),
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
            seed: self.seed,
        }
    }

    pub fn active_in_split(&self, split: Split) -> Self {
        self.filtered(|r| r.is_active() && r.split == split)
    }

    pub fn with_provenance(&self, provenance: Provenance) -> Self {
        self.filtered(|r| r.provenance == provenance)
    }

    pub fn header(&self) -> ManifestHeader {
        ManifestHeader {
            artists: self.artists.clone(),
            seed: self.seed,
            version: MANIFEST_VERSION,
        }
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header())?;
        out.push('\n');
        for record in &self.records {
            out.push_str(&serde_json::to_string(record)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl_reader(reader: impl BufRead) -> Result<Self> {
        let mut lines = reader.lines().enumerate();
        let header: ManifestHeader = loop {
            match lines.next() {
                None => return Err(Error::MalformedInput("manifest has no header line".into())),
                Some((_, line)) => {
                    let line = line.map_err(|e| Error::MalformedInput(e.to_string()))?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    break serde_json::from_str(&line).map_err(|e| {
                        Error::MalformedInput(format!("manifest header: {e}"))
                    })?;
                }
            }
        };
        if header.version != MANIFEST_VERSION {
            return Err(Error::MalformedInput(format!(
                "unsupported manifest version {}",
                header.version
            )));
        }
        let mut records = Vec::new();
        for (lineno, line) in lines {
            let line = line.map_err(|e| Error::MalformedInput(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: ArtworkRecord = serde_json::from_str(&line).map_err(|e| {
                Error::MalformedInput(format!("manifest line {}: {e}", lineno + 1))
            })?;
            records.push(record);
        }
        Ok(Self {
            artists: header.artists,
            records,
            seed: header.seed,
        })
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        Self::from_jsonl_reader(text.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl_reader(BufReader::new(file))
    }

    /// Writes the manifest atomically (temp file in the same directory, then rename).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_jsonl()?.as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    EmptyArtistName,
    DuplicateArtistName,
    DuplicateArtistId,
    EmptyRecordId,
    DuplicateRecordId,
    UnknownArtist,
    MissingPrompt,
    PromptMissingArtistSuffix,
    PromptOnOriginal,
    ChecksumMismatch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    /// Offending record id, or `None` for artist-list problems.
    pub record: Option<String>,
    pub kind: ViolationKind,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtistCounts {
    pub artist: String,
    pub original: usize,
    pub synthetic: usize,
    pub excluded: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    /// Non-excluded record counts per artist, in artist-list order.
    pub counts: Vec<ArtistCounts>,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn counts_for(&self, artist: &str) -> Option<&ArtistCounts> {
        self.counts.iter().find(|c| c.artist == artist)
    }
}

/// Counts records per artist and provenance and lists every broken record
/// invariant. When `root` is given, checksums of files present under it are
/// verified as well.
pub fn validate_manifest(manifest: &DatasetManifest, root: Option<&Path>) -> ValidationReport {
    let mut violations = Vec::new();
    let mut push = |record: Option<&str>, kind, detail: String| {
        violations.push(Violation {
            record: record.map(str::to_owned),
            kind,
            detail,
        })
    };

    let mut names = HashSet::new();
    let mut ids = HashSet::new();
    for artist in &manifest.artists {
        if artist.name.trim().is_empty() {
            push(None, ViolationKind::EmptyArtistName, format!("artist id {}", artist.id));
        }
        if !names.insert(artist.name.as_str()) {
            push(None, ViolationKind::DuplicateArtistName, artist.name.clone());
        }
        if !ids.insert(artist.id) {
            push(None, ViolationKind::DuplicateArtistId, format!("id {}", artist.id));
        }
    }

    let mut counts: BTreeMap<&str, ArtistCounts> = BTreeMap::new();
    let mut seen = HashSet::new();
    for record in &manifest.records {
        let rid = Some(record.id.as_str());
        if record.id.is_empty() {
            push(rid, ViolationKind::EmptyRecordId, format!("path {}", record.path));
        }
        if !seen.insert(record.id.as_str()) {
            push(rid, ViolationKind::DuplicateRecordId, record.id.clone());
        }
        if manifest.artist(&record.artist).is_none() {
            push(rid, ViolationKind::UnknownArtist, record.artist.clone());
        }
        match (record.provenance, &record.prompt) {
            (Provenance::Synthetic, None) => {
                push(rid, ViolationKind::MissingPrompt, "synthetic record without prompt".into())
            }
            (Provenance::Synthetic, Some(prompt)) => {
                let suffix = format!("{ARTIST_SUFFIX_SEPARATOR}{}", record.artist);
                if !prompt.contains(&suffix) {
                    push(
                        rid,
                        ViolationKind::PromptMissingArtistSuffix,
                        format!("prompt lacks {suffix:?}"),
                    );
                }
            }
            (Provenance::Original, Some(_)) => {
                push(rid, ViolationKind::PromptOnOriginal, "original record carries a prompt".into())
            }
            (Provenance::Original, None) => {}
        }
        if let Some(root) = root {
            let path = root.join(&record.path);
            if let Ok(bytes) = fs::read(&path) {
                let actual = sha256_hex(&bytes);
                if actual != record.checksum {
                    push(
                        rid,
                        ViolationKind::ChecksumMismatch,
                        format!("expected {}, file has {actual}", record.checksum),
                    );
                }
            }
        }

        let entry = counts
            .entry(record.artist.as_str())
            .or_insert_with(|| ArtistCounts {
                artist: record.artist.clone(),
                ..Default::default()
            });
        if record.excluded {
            entry.excluded += 1;
        } else {
            match record.provenance {
                Provenance::Original => entry.original += 1,
                Provenance::Synthetic => entry.synthetic += 1,
            }
        }
    }

    // Artist-list order first, then any unknown artists alphabetically.
    let mut ordered = Vec::with_capacity(counts.len());
    for artist in &manifest.artists {
        let c = counts.remove(artist.name.as_str()).unwrap_or_else(|| ArtistCounts {
            artist: artist.name.clone(),
            ..Default::default()
        });
        ordered.push(c);
    }
    ordered.extend(counts.into_values());

    ValidationReport {
        counts: ordered,
        violations,
    }
}
