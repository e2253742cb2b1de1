use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::Tensor;
use rand::seq::SliceRandom;

use super::checkpoint::{Checkpoint, CheckpointKind, CheckpointMeta, CheckpointStore, FingerprintInput};
use super::images::ImageStore;
use super::net::Network;
use super::optim::Adam;
use super::{BackboneConfig, InitMode, TrainRunConfig};
use crate::corpus::{ArtworkRecord, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::seed::{derive_seed, rng_for, sha256_hex};

/// Per-epoch checkpoints of one training run, in epoch order.
#[derive(Debug, Clone)]
pub struct TrainHistory {
    pub checkpoints: Vec<Checkpoint>,
    /// Validation loss of the starting weights, before any update.
    pub initial_val_loss: Option<f64>,
}

impl TrainHistory {
    /// Epoch with the highest validation accuracy (earliest on ties).
    pub fn best_by_accuracy(&self) -> Option<&Checkpoint> {
        let mut best: Option<&Checkpoint> = None;
        for c in &self.checkpoints {
            let acc = c.meta.val_accuracy.unwrap_or(f64::NEG_INFINITY);
            let better = match best {
                None => true,
                Some(b) => acc > b.meta.val_accuracy.unwrap_or(f64::NEG_INFINITY),
            };
            if better {
                best = Some(c);
            }
        }
        best
    }

    pub fn last(&self) -> Option<&Checkpoint> {
        self.checkpoints.last()
    }

    pub fn val_losses(&self) -> Vec<f64> {
        self.checkpoints.iter().map(|c| c.meta.val_loss).collect()
    }
}

/// CSV with columns `epoch,train_loss,val_loss,val_accuracy`.
pub fn write_metrics_csv(path: &Path, history: &TrainHistory) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "train_loss", "val_loss", "val_accuracy"])?;
    for c in &history.checkpoints {
        let m = &c.meta;
        w.write_record([
            m.epoch.to_string(),
            m.train_loss.to_string(),
            m.val_loss.to_string(),
            m.val_accuracy.map(|a| a.to_string()).unwrap_or_default(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

pub(crate) fn init_network(
    backbone: &BackboneConfig,
    n_classes: usize,
    seed: u64,
) -> Result<Network> {
    let net = Network::new(backbone, n_classes, seed)?;
    if let InitMode::Pretrained { path, sha256 } = &backbone.init {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if let Some(expected) = sha256 {
            let actual = sha256_hex(&bytes);
            if &actual != expected {
                return Err(Error::InvalidConfig(format!(
                    "pretrained weights {path} have sha256 {actual}, expected {expected}"
                )));
            }
        }
        let copied = net.load_safetensors(&bytes, false)?;
        log::info!("initialized {copied} tensors from {path}");
    }
    Ok(net)
}

pub(crate) fn check_store_matches(images: &ImageStore, backbone: &BackboneConfig) -> Result<()> {
    let c = images.config();
    if c.input_edge != backbone.input_edge || c.mean != backbone.mean || c.std != backbone.std {
        return Err(Error::InvalidConfig(
            "image store preprocessing differs from the backbone configuration".into(),
        ));
    }
    Ok(())
}

fn labelled<'m>(manifest: &'m DatasetManifest, split: Split) -> Result<Vec<(&'m ArtworkRecord, u32)>> {
    manifest
        .records
        .iter()
        .filter(|r| r.is_active() && r.split == split)
        .map(|r| Ok((r, manifest.class_of(r)? as u32)))
        .collect()
}

/// Trains the artist classifier on the manifest's train split and
/// evaluates on its val split after every epoch.
pub fn train_discriminative(
    manifest: &DatasetManifest,
    images: &ImageStore,
    backbone: &BackboneConfig,
    run: &TrainRunConfig,
    store: &CheckpointStore,
) -> Result<TrainHistory> {
    backbone.validate()?;
    run.validate()?;
    check_store_matches(images, backbone)?;
    let train = labelled(manifest, Split::Train)?;
    let val = labelled(manifest, Split::Val)?;

    let mut per_class: BTreeMap<u32, usize> = BTreeMap::new();
    for (_, c) in &train {
        *per_class.entry(*c).or_default() += 1;
    }
    let usable = per_class.values().filter(|n| **n >= 2).count();
    if usable < 2 {
        return Err(Error::MalformedInput(format!(
            "degenerate training subset: {usable} artist(s) with at least 2 train records, need 2"
        )));
    }
    if val.is_empty() {
        return Err(Error::Empty("validation split"));
    }

    let n_classes = manifest.artists.len();
    let net = init_network(backbone, n_classes, derive_seed(run.seed, "baseline/init"))?;
    let mut opt = Adam::new(run.optimizer, net.trainable_vars(), run.learning_rate, run.weight_decay)?;
    let input = FingerprintInput {
        kind: CheckpointKind::Discriminative,
        backbone: backbone.clone(),
        run: run.clone(),
        artists: manifest.artists.clone(),
        parent: None,
        loss: None,
        normalize_embeddings: false,
        fine_tune: "all".into(),
        siamese: None,
    };

    let initial = evaluate(&net, &val, images, run.batch_size)?;
    let mut checkpoints = Vec::with_capacity(run.epochs);
    for epoch in 0..run.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng_for(run.seed, &format!("baseline/epoch/{epoch}")));
        let mut loss_sum = 0.0;
        for chunk in order.chunks(run.batch_size) {
            let records: Vec<&ArtworkRecord> = chunk.iter().map(|&i| train[i].0).collect();
            let labels: Vec<u32> = chunk.iter().map(|&i| train[i].1).collect();
            let x = images.batch(&records, net.device())?;
            let y = Tensor::new(labels.as_slice(), net.device())?;
            let loss = candle_nn::loss::cross_entropy(&net.logits(&x, true)?, &y)?;
            opt.backward_step(&loss)?;
            loss_sum += loss.to_scalar::<f32>()? as f64 * chunk.len() as f64;
        }
        let train_loss = loss_sum / train.len() as f64;
        let (val_loss, val_accuracy) = evaluate(&net, &val, images, run.batch_size)?;
        log::info!(
            "baseline epoch {epoch}: train_loss {train_loss:.5} val_loss {val_loss:.5} val_acc {val_accuracy:.4}"
        );
        let mut meta = CheckpointMeta::new(input.clone(), epoch, train_loss, val_loss);
        meta.val_accuracy = Some(val_accuracy);
        let blob = net.to_safetensors(Checkpoint::metadata_map(&meta)?)?;
        checkpoints.push(store.put(meta, blob)?);
    }
    Ok(TrainHistory {
        checkpoints,
        initial_val_loss: Some(initial.0),
    })
}

/// Mean cross-entropy and accuracy in inference mode.
fn evaluate(
    net: &Network,
    set: &[(&ArtworkRecord, u32)],
    images: &ImageStore,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for chunk in set.chunks(batch_size) {
        let records: Vec<&ArtworkRecord> = chunk.iter().map(|(r, _)| *r).collect();
        let labels: Vec<u32> = chunk.iter().map(|(_, c)| *c).collect();
        let x = images.batch(&records, net.device())?;
        let y = Tensor::new(labels.as_slice(), net.device())?;
        let logits = net.logits(&x, false)?;
        let loss = candle_nn::loss::cross_entropy(&logits, &y)?.to_scalar::<f32>()? as f64;
        loss_sum += loss * chunk.len() as f64;
        let pred: Vec<u32> = logits.argmax(candle_core::D::Minus1)?.to_vec1()?;
        correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    let n = set.len() as f64;
    Ok((loss_sum / n, correct as f64 / n))
}
