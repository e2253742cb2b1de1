use std::collections::HashMap;
use std::path::Path;

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use super::loss::{contrastive_loss, contrastive_loss_tensor, LossConfig};
use super::metric::euclidean;
use super::pairs::{sample_pairs, sample_pairs_labelled, PairSample};
use crate::backbone::model::l2_normalize;
use crate::backbone::net::Network;
use crate::backbone::optim::Adam;
use crate::backbone::train::check_store_matches;
use crate::backbone::{
    Checkpoint, CheckpointKind, CheckpointMeta, CheckpointStore, FingerprintInput, ImageStore,
    TrainHistory, TrainRunConfig,
};
use crate::corpus::{ArtworkRecord, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

/// Pair-sampling and embedding settings of a Siamese run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SiameseOptions {
    pub pairs_per_epoch: usize,
    pub positive_fraction: f64,
    /// Size of the frozen validation pair list drawn from the val split.
    pub val_pairs: usize,
    pub normalize_embeddings: bool,
}

impl Default for SiameseOptions {
    fn default() -> Self {
        Self {
            pairs_per_epoch: 2048,
            positive_fraction: 0.5,
            val_pairs: 512,
            normalize_embeddings: false,
        }
    }
}

/// Result of [`train_siamese`].
#[derive(Debug, Clone)]
pub struct SiameseRun {
    pub history: TrainHistory,
    /// The frozen validation pairs every epoch was scored on.
    pub val_pairs: Vec<PairSample>,
}

/// Fine-tunes the backbone of a discriminative checkpoint as a twin
/// network on pairs from the mixed manifest's train split. Validation
/// pairs are drawn once from the val split (or supplied) and reused for
/// every epoch.
pub fn train_siamese(
    mixed: &DatasetManifest,
    images: &ImageStore,
    base: &Checkpoint,
    loss: &LossConfig,
    run: &TrainRunConfig,
    options: &SiameseOptions,
    frozen_val_pairs: Option<Vec<PairSample>>,
    store: &CheckpointStore,
) -> Result<SiameseRun> {
    loss.validate()?;
    run.validate()?;
    base.meta.verify()?;
    if base.meta.kind() != CheckpointKind::Discriminative {
        return Err(Error::IncompatibleCheckpoint(format!(
            "base checkpoint {} is not a discriminative checkpoint",
            base.meta.fingerprint
        )));
    }
    if base.meta.artists() != mixed.artists.as_slice() {
        return Err(Error::IncompatibleCheckpoint(
            "base checkpoint was trained on a different artist list".into(),
        ));
    }
    let backbone = base.meta.backbone().clone();
    check_store_matches(images, &backbone)?;

    let train_set = mixed.active_in_split(Split::Train);
    let val_set = mixed.active_in_split(Split::Val);
    if val_set.records.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    let val_pairs = match frozen_val_pairs {
        Some(p) => {
            for pair in &p {
                for id in [&pair.first, &pair.second] {
                    if val_set.record(id).is_none() {
                        return Err(Error::UnknownRecord(id.clone()));
                    }
                }
            }
            p
        }
        None => sample_pairs_labelled(&val_set, options.val_pairs, options.positive_fraction, run.seed, "pairs/val")?,
    };
    if val_pairs.is_empty() {
        return Err(Error::Empty("validation pairs"));
    }
    // Fail on an impossible sampling request before any work is done.
    sample_pairs(&train_set, options.pairs_per_epoch, options.positive_fraction, run.seed, 0)?;

    let net = Network::new(&backbone, mixed.artists.len(), 0)?;
    net.load_safetensors(&base.bytes()?, true)?;
    let mut opt = Adam::new(run.optimizer, net.backbone_vars(), run.learning_rate, run.weight_decay)?;
    let input = FingerprintInput {
        kind: CheckpointKind::Metric,
        backbone,
        run: run.clone(),
        artists: mixed.artists.clone(),
        parent: Some(base.meta.fingerprint.clone()),
        loss: Some(loss.clone()),
        normalize_embeddings: options.normalize_embeddings,
        fine_tune: "all".into(),
        siamese: Some(options.clone()),
    };

    let val_records = pair_records(&val_set, &val_pairs)?;
    let initial = val_loss(&net, &val_records, &val_pairs, images, run.batch_size, loss, options)?;
    log::info!("siamese initial val_loss {initial:.5}");

    let train_index = train_set.index();
    let mut checkpoints = Vec::with_capacity(run.epochs);
    for epoch in 0..run.epochs {
        let pairs = sample_pairs(&train_set, options.pairs_per_epoch, options.positive_fraction, run.seed, epoch as u64)?;
        let mut loss_sum = 0.0;
        for chunk in pairs.chunks(run.batch_size) {
            let mut records: Vec<&ArtworkRecord> = Vec::with_capacity(chunk.len() * 2);
            for id in chunk.iter().map(|p| &p.first).chain(chunk.iter().map(|p| &p.second)) {
                let i = *train_index.get(id.as_str()).ok_or_else(|| Error::UnknownRecord(id.clone()))?;
                records.push(&train_set.records[i]);
            }
            let x = images.batch(&records, net.device())?;
            let mut feats = net.features(&x, true)?;
            if options.normalize_embeddings {
                feats = l2_normalize(&feats)?;
            }
            let b = chunk.len();
            let diff = (feats.narrow(0, 0, b)? - feats.narrow(0, b, b)?)?;
            let sq = diff.sqr()?.sum(D::Minus1)?;
            let labels: Vec<f32> = chunk.iter().map(|p| p.y.as_f64() as f32).collect();
            let y = Tensor::new(labels.as_slice(), net.device())?;
            let batch_loss = contrastive_loss_tensor(&sq, &y, loss)?.mean_all()?;
            opt.backward_step(&batch_loss)?;
            loss_sum += batch_loss.to_scalar::<f32>()? as f64 * b as f64;
        }
        let train_loss = loss_sum / pairs.len() as f64;
        let v = val_loss(&net, &val_records, &val_pairs, images, run.batch_size, loss, options)?;
        log::info!("siamese epoch {epoch}: train_loss {train_loss:.5} val_loss {v:.5}");
        let meta = CheckpointMeta::new(input.clone(), epoch, train_loss, v);
        let blob = net.to_safetensors(Checkpoint::metadata_map(&meta)?)?;
        checkpoints.push(store.put(meta, blob)?);
    }
    Ok(SiameseRun {
        history: TrainHistory {
            checkpoints,
            initial_val_loss: Some(initial),
        },
        val_pairs,
    })
}

fn pair_records<'m>(set: &'m DatasetManifest, pairs: &[PairSample]) -> Result<Vec<&'m ArtworkRecord>> {
    let mut seen = std::collections::BTreeSet::new();
    for p in pairs {
        seen.insert(p.first.as_str());
        seen.insert(p.second.as_str());
    }
    seen.into_iter()
        .map(|id| set.record(id).ok_or_else(|| Error::UnknownRecord(id.to_owned())))
        .collect()
}

/// Mean pair loss over `pairs` with the network in inference mode.
fn val_loss(
    net: &Network,
    records: &[&ArtworkRecord],
    pairs: &[PairSample],
    images: &ImageStore,
    batch_size: usize,
    loss: &LossConfig,
    options: &SiameseOptions,
) -> Result<f64> {
    let mut emb: HashMap<&str, Vec<f32>> = HashMap::with_capacity(records.len());
    for chunk in records.chunks(batch_size.max(1)) {
        let x = images.batch(chunk, net.device())?;
        let mut feats = net.features(&x, false)?;
        if options.normalize_embeddings {
            feats = l2_normalize(&feats)?;
        }
        let rows: Vec<Vec<f32>> = feats.to_vec2()?;
        for (r, row) in chunk.iter().zip(rows) {
            emb.insert(r.id.as_str(), row);
        }
    }
    let mut sum = 0.0;
    for p in pairs {
        let d = euclidean(&emb[p.first.as_str()], &emb[p.second.as_str()])?;
        sum += contrastive_loss(d, p.y, loss)?;
    }
    Ok(sum / pairs.len() as f64)
}

/// CSV with columns `epoch,train_loss,val_loss`.
pub fn write_loss_curve_csv(path: &Path, history: &TrainHistory) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "train_loss", "val_loss"])?;
    for c in &history.checkpoints {
        w.write_record([
            c.meta.epoch.to_string(),
            c.meta.train_loss.to_string(),
            c.meta.val_loss.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}
