use std::collections::HashMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{BackboneConfig, TrainRunConfig};
use crate::corpus::ArtistLabel;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::seed::sha256_hex;
use crate::siamese::{LossConfig, SiameseOptions};

/// Header key under which the metadata document is stored.
const META_KEY: &str = "artprompt.checkpoint";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    /// Artist classifier (backbone + softmax head).
    Discriminative,
    /// Siamese-trained backbone used as a distance.
    Metric,
}

/// Everything that determines how a checkpoint was produced, apart from
/// the training trajectory itself. Hashed into the fingerprint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FingerprintInput {
    pub kind: CheckpointKind,
    pub backbone: BackboneConfig,
    pub run: TrainRunConfig,
    pub artists: Vec<ArtistLabel>,
    /// Fingerprint of the checkpoint training started from, if any.
    pub parent: Option<String>,
    pub loss: Option<LossConfig>,
    #[serde(default)]
    pub normalize_embeddings: bool,
    /// Which layers were updated: "all" or "none" (untrained).
    pub fine_tune: String,
    /// Pair-sampling settings of a metric run.
    #[serde(default)]
    pub siamese: Option<SiameseOptions>,
}

impl FingerprintInput {
    pub fn fingerprint(&self) -> String {
        let doc = serde_json::to_vec(self).expect("fingerprint input serializes");
        sha256_hex(&doc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    #[serde(flatten)]
    pub input: FingerprintInput,
    pub fingerprint: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: Option<f64>,
}

impl CheckpointMeta {
    pub fn new(input: FingerprintInput, epoch: usize, train_loss: f64, val_loss: f64) -> Self {
        Self {
            fingerprint: input.fingerprint(),
            input,
            epoch,
            train_loss,
            val_loss,
            val_accuracy: None,
        }
    }

    pub fn kind(&self) -> CheckpointKind {
        self.input.kind
    }

    pub fn backbone(&self) -> &BackboneConfig {
        &self.input.backbone
    }

    pub fn artists(&self) -> &[ArtistLabel] {
        &self.input.artists
    }

    /// The stored fingerprint must hash back from the stored configs.
    pub fn verify(&self) -> Result<()> {
        let expected = self.input.fingerprint();
        if expected != self.fingerprint {
            return Err(Error::IncompatibleCheckpoint(format!(
                "fingerprint {} does not match its configuration ({expected})",
                self.fingerprint
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Weights {
    Memory(Arc<Vec<u8>>),
    File(PathBuf),
}

/// Weights plus metadata. The on-disk form is one safetensors file whose
/// header carries the metadata document.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    weights: Weights,
}

impl Checkpoint {
    pub(crate) fn from_safetensors(meta: CheckpointMeta, blob: Vec<u8>) -> Self {
        Self {
            meta,
            weights: Weights::Memory(Arc::new(blob)),
        }
    }

    pub(crate) fn metadata_map(meta: &CheckpointMeta) -> Result<HashMap<String, String>> {
        Ok(HashMap::from([(META_KEY.to_owned(), serde_json::to_string(meta)?)]))
    }

    /// Full safetensors bytes (metadata header included).
    pub fn bytes(&self) -> Result<Arc<Vec<u8>>> {
        match &self.weights {
            Weights::Memory(b) => Ok(b.clone()),
            Weights::File(p) => Ok(Arc::new(fs::read(p).map_err(|e| Error::io(p, e))?)),
        }
    }

    pub fn path(&self) -> Option<&Path> {
        match &self.weights {
            Weights::File(p) => Some(p),
            Weights::Memory(_) => None,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.bytes()?)
    }

    /// Opens a checkpoint file. Only the header is read; weights are read
    /// when a model is built from it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let meta = read_checkpoint_meta(path)?;
        meta.verify()?;
        Ok(Self {
            meta,
            weights: Weights::File(path.to_path_buf()),
        })
    }

    /// Loads the whole file into memory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let meta = meta_from_header(&bytes)?;
        meta.verify()?;
        Ok(Self::from_safetensors(meta, bytes))
    }
}

/// Reads only the metadata document of a checkpoint file.
pub fn read_checkpoint_meta(path: impl AsRef<Path>) -> Result<CheckpointMeta> {
    let path = path.as_ref();
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut len = [0u8; 8];
    file.read_exact(&mut len).map_err(|e| Error::io(path, e))?;
    let n = u64::from_le_bytes(len);
    if n > 100_000_000 {
        return Err(Error::MalformedInput(format!("{}: implausible header size {n}", path.display())));
    }
    let mut header = vec![0u8; n as usize];
    file.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
    parse_header(&header)
}

fn meta_from_header(bytes: &[u8]) -> Result<CheckpointMeta> {
    if bytes.len() < 8 {
        return Err(Error::MalformedInput("checkpoint too short".into()));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let header = bytes
        .get(8..8 + n)
        .ok_or_else(|| Error::MalformedInput("checkpoint header truncated".into()))?;
    parse_header(header)
}

fn parse_header(header: &[u8]) -> Result<CheckpointMeta> {
    #[derive(Deserialize)]
    struct Header {
        #[serde(rename = "__metadata__")]
        metadata: Option<HashMap<String, String>>,
    }
    let h: Header = serde_json::from_slice(header)?;
    let doc = h
        .metadata
        .and_then(|mut m| m.remove(META_KEY))
        .ok_or_else(|| Error::MalformedInput("not an artprompt checkpoint (no metadata)".into()))?;
    Ok(serde_json::from_str(&doc)?)
}

/// Where per-epoch checkpoints of a training run are kept.
#[derive(Debug, Clone, Default)]
pub enum CheckpointStore {
    #[default]
    Memory,
    /// One `epoch_NNNN.safetensors` file per epoch.
    Directory(PathBuf),
}

impl CheckpointStore {
    pub(crate) fn put(&self, meta: CheckpointMeta, blob: Vec<u8>) -> Result<Checkpoint> {
        match self {
            CheckpointStore::Memory => Ok(Checkpoint::from_safetensors(meta, blob)),
            CheckpointStore::Directory(dir) => {
                let path = dir.join(format!("epoch_{:04}.safetensors", meta.epoch));
                write_atomic(&path, &blob)?;
                Ok(Checkpoint {
                    meta,
                    weights: Weights::File(path),
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::net::Network;
    use crate::backbone::Architecture;

    fn input() -> FingerprintInput {
        FingerprintInput {
            kind: CheckpointKind::Discriminative,
            backbone: BackboneConfig {
                architecture: Architecture::ResnetMini,
                embedding_dim: 64,
                input_edge: 32,
                ..Default::default()
            },
            run: TrainRunConfig::baseline(),
            artists: crate::corpus::reference_artists(),
            parent: None,
            loss: None,
            normalize_embeddings: false,
            fine_tune: "all".into(),
            siamese: None,
        }
    }

    #[test]
    fn fingerprint_binds_configs() {
        let a = input();
        let mut b = input();
        b.run.learning_rate = 2e-4;
        assert_ne!(a.fingerprint(), b.fingerprint());
        let mut c = input();
        c.backbone.input_edge = 48;
        assert_ne!(a.fingerprint(), c.fingerprint());
        assert_eq!(a.fingerprint(), input().fingerprint());
    }

    #[test]
    fn metadata_readable_without_weights() {
        let dir = tempfile::tempdir().unwrap();
        let net = Network::new(&input().backbone, 5, 0).unwrap();
        let mut meta = CheckpointMeta::new(input(), 3, 1.5, 1.25);
        meta.val_accuracy = Some(0.5);
        let blob = net.to_safetensors(Checkpoint::metadata_map(&meta).unwrap()).unwrap();
        let store = CheckpointStore::Directory(dir.path().to_path_buf());
        let ckpt = store.put(meta.clone(), blob).unwrap();
        let path = ckpt.path().unwrap().to_path_buf();
        assert!(path.ends_with("epoch_0003.safetensors"));
        assert_eq!(read_checkpoint_meta(&path).unwrap(), meta);
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.meta, meta);
        assert_eq!(*loaded.bytes().unwrap(), *ckpt.bytes().unwrap());
    }

    #[test]
    fn tampered_fingerprint_rejected() {
        let mut meta = CheckpointMeta::new(input(), 0, 0.0, 0.0);
        meta.input.run.epochs = 7;
        assert!(meta.verify().is_err());
    }
}
