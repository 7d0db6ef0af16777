//! Training and evaluation loops.

use std::path::{Path, PathBuf};

use mjp_core::aux_loss::{model_aux_loss, total_loss};
use mjp_core::mjp::{mjp_input_layer, shuffle_batch, ShuffleSpec};
use mjp_core::model::{is_no_decay, save_checkpoint, Bound, InputBatch, Mode, TransformerModel};
use mjp_core::optim::{clip_global_norm, warmup_cosine, AdamW};
use mjp_core::{RngKey, Tape, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{Dataset, Splits};
use crate::error::{LabError, LabResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    /// Whether the shuffle / masked-PE input layer was active.
    pub mjp: bool,
    pub epochs: Vec<EpochRecord>,
    /// Checkpoint directories, relative to the run directory.
    pub checkpoints: Vec<String>,
}

impl RunRecord {
    pub fn final_val_acc(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.val_acc)
    }
}

/// Which input layer a pass uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputPath {
    Plain,
    Mjp,
}

impl InputPath {
    /// MJP when compiled in and the config asks for shuffling or a localization loss.
    pub fn for_config(cfg: &ExperimentConfig) -> Self {
        let wanted = cfg.shuffle.gamma > 0.0 || cfg.aux.kind != mjp_core::aux_loss::AuxKind::None;
        if cfg!(feature = "mjp") && wanted {
            InputPath::Mjp
        } else {
            InputPath::Plain
        }
    }
}

fn grid(model: &TransformerModel) -> Option<usize> {
    (model.config.mode == Mode::Vision).then_some(model.config.grid_side)
}

fn argmax_hits(logits: &Tensor, labels: &[usize]) -> usize {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &y)| row.iter().enumerate().fold(0, |b, (i, &v)| if v > row[b] { i } else { b }) == y)
        .count()
}

/// Taped logits and masks for one batch.
fn logits(tape: &mut Tape, bound: &Bound, batch: &InputBatch, path: InputPath, spec: &ShuffleSpec, stream: RngKey) -> LabResult<(Tensor, Vec<Vec<bool>>)> {
    match path {
        InputPath::Mjp => {
            let (z, sb) = mjp_input_layer(tape, bound, batch, spec, stream)?;
            let enc = bound.encode(tape, &z)?;
            Ok((bound.classify(tape, &enc.hidden)?, sb.masks))
        }
        InputPath::Plain => {
            let masks = vec![vec![false; batch.seq_len()]; batch.batch_size()];
            Ok((bound.forward(tape, batch.as_input(), None)?, masks))
        }
    }
}

/// Mean loss and accuracy over `data`. With `gamma > 0` every batch is shuffled
/// under `spec` (ratio replaced) from a stream keyed by `seed`.
pub fn evaluate(model: &TransformerModel, data: &Dataset, spec: &ShuffleSpec, gamma: f64, seed: u64, batch_size: usize) -> LabResult<(f64, f64)> {
    if data.is_empty() {
        return Ok((0.0, 0.0));
    }
    let spec = ShuffleSpec { gamma, ..spec.clone() };
    let key = RngKey::new(seed).fold_str("eval");
    let (mut loss, mut hits) = (0.0, 0usize);
    let idx: Vec<usize> = (0..data.len()).collect();
    for (b, chunk) in idx.chunks(batch_size).enumerate() {
        let batch = data.batch(chunk)?;
        let labels = data.labels_of(chunk);
        let mut tape = Tape::new();
        let bound = model.bind_frozen(&mut tape);
        let masks = if gamma > 0.0 { Some(shuffle_batch(&batch, &spec, grid(model), key.fold(b as u64))?) } else { None };
        let out = match &masks {
            Some(sb) => bound.forward(&mut tape, sb.input.as_input(), Some(&sb.masks))?,
            None => bound.forward(&mut tape, batch.as_input(), None)?,
        };
        let ce = tape.cross_entropy(&out, &labels)?;
        loss += ce.item()? * chunk.len() as f64;
        hits += argmax_hits(&out, &labels);
    }
    Ok((loss / data.len() as f64, hits as f64 / data.len() as f64))
}

pub struct Trained {
    pub model: TransformerModel,
    pub record: RunRecord,
}

/// Train from `cfg`. Checkpoints go to `<out>/checkpoints/epoch-NNN` and the
/// final one to `<out>/checkpoint` when `out` is given.
pub fn train(cfg: &ExperimentConfig, data: &Splits, out: Option<&Path>) -> LabResult<Trained> {
    train_with(cfg, data, out, InputPath::for_config(cfg))
}

pub fn train_with(cfg: &ExperimentConfig, data: &Splits, out: Option<&Path>, path: InputPath) -> LabResult<Trained> {
    cfg.validate()?;
    data.train.check(&cfg.model)?;
    data.val.check(&cfg.model)?;
    if data.train.is_empty() {
        return Err(LabError::Config("training split is empty".into()));
    }
    let root = RngKey::new(cfg.seed);
    let mut model = TransformerModel::init(cfg.model.clone(), root)?;
    let mut opt = AdamW::new(cfg.train.weight_decay);
    let t = &cfg.train;
    let steps_per_epoch = data.train.len().div_ceil(t.batch_size);
    let total = steps_per_epoch * t.epochs;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut record = RunRecord {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        mjp: path == InputPath::Mjp,
        epochs: Vec::with_capacity(t.epochs),
        checkpoints: Vec::new(),
    };
    let mut step = 0usize;
    for epoch in 0..t.epochs {
        order.shuffle(&mut root.fold_str("order").fold(epoch as u64).rng());
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for chunk in order.chunks(t.batch_size) {
            let batch = data.train.batch(chunk)?;
            let labels = data.train.labels_of(chunk);
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let diverged = |e: LabError| match e {
                LabError::Core(mjp_core::Error::NonFinite(_)) => LabError::Diverged { epoch, step, loss: f64::NAN },
                e => e,
            };
            let (out, masks) = logits(&mut tape, &bound, &batch, path, &cfg.shuffle, cfg.shuffle.step_key(step as u64)).map_err(diverged)?;
            let ce = tape.cross_entropy(&out, &labels)?;
            let loss = match path {
                InputPath::Mjp => {
                    let mut rng = root.fold_str("aux").fold(step as u64).rng();
                    match model_aux_loss(&mut tape, &bound, &masks, &cfg.aux, &mut rng)? {
                        Some(aux) => total_loss(&mut tape, &ce, &aux, cfg.aux.lambda)?,
                        None => ce,
                    }
                }
                InputPath::Plain => ce,
            };
            let value = loss.item()?;
            if !value.is_finite() {
                return Err(LabError::Diverged { epoch, step, loss: value });
            }
            let mut grads = tape.backward(&loss)?;
            clip_global_norm(&mut grads, t.clip_norm);
            let lr = warmup_cosine(step, total, t.lr, t.warmup_frac);
            model.update(|p| opt.step(p, &grads, lr, |n| !is_no_decay(n)))?;
            loss_sum += value * chunk.len() as f64;
            hits += argmax_hits(&out, &labels);
            step += 1;
        }
        let (val_loss, val_acc) = evaluate(&model, &data.val, &cfg.shuffle, 0.0, cfg.eval.seed, cfg.eval.batch_size)?;
        let n = data.train.len() as f64;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            train_acc: hits as f64 / n,
            val_loss,
            val_acc,
        };
        log::info!(
            "epoch {epoch}: train loss {:.4} acc {:.3}, val loss {:.4} acc {:.3}",
            rec.train_loss,
            rec.train_acc,
            rec.val_loss,
            rec.val_acc
        );
        record.epochs.push(rec);
        if let Some(dir) = out {
            let rel = format!("checkpoints/epoch-{epoch:03}");
            save_checkpoint(&model, &dir.join(&rel))?;
            record.checkpoints.push(rel);
        }
    }
    if let Some(dir) = out {
        save_checkpoint(&model, &dir.join("checkpoint"))?;
        record.checkpoints.push("checkpoint".into());
        let mut json = serde_json::to_string_pretty(&record).map_err(mjp_core::Error::from)?;
        json.push('\n');
        let p: PathBuf = dir.join("run.json");
        std::fs::write(&p, json).map_err(|e| LabError::io(&p, e))?;
    }
    Ok(Trained { model, record })
}
