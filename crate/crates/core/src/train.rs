//! Deterministic from-scratch training.
//!
//! The shuffle order of each epoch is a keyed permutation of the full id
//! universe `0..n`, chunked into batches before removed ids are filtered
//! out. A leave-K-out run therefore sees exactly the same batches as the
//! base run, minus the removed examples, with the same per-example
//! timestep, noise and flip draws.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::Checkpoint;
use crate::data::{leave_out, Dataset};
use crate::diffusion::model::{Architecture, Reduction, Weights};
use crate::diffusion::{DiffusionConfig, ParamVector};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Cosine decay of the learning rate to zero over the run.
    pub cosine_decay: bool,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub flip_augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            learning_rate: 0.5,
            momentum: 0.9,
            cosine_decay: true,
            clip_norm: 1.0,
            flip_augment: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Validation("epochs and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Validation("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Validation("momentum must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

impl Trained {
    pub fn params(&self) -> &ParamVector {
        &self.checkpoint.params
    }

    pub fn log_csv(&self) -> String {
        let mut s = String::from("epoch,mean_loss\n");
        for e in &self.log {
            s.push_str(&format!("{},{}\n", e.epoch, e.mean_loss));
        }
        s
    }
}

/// Batches of universe ids for one epoch, before filtering.
pub fn epoch_batches(universe: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<u64>> {
    let mut order: Vec<u64> = (0..universe as u64).collect();
    order.sort_by_key(|&id| (rng::mix(seed, Stream::Shuffle, epoch as u64, id), id));
    order.chunks(batch_size).map(<[u64]>::to_vec).collect()
}

/// `θ = A(D)`.
pub fn train(ds: &Dataset, cfg: &TrainConfig, dcfg: &DiffusionConfig) -> Result<Trained> {
    cfg.validate()?;
    dcfg.validate()?;
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if ds.spec.num_classes > dcfg.num_classes || ds.image_shape() != dcfg.image_shape {
        return Err(Error::Validation("dataset does not match the diffusion config".into()));
    }
    let arch = Architecture::for_config(dcfg);
    let sched = dcfg.schedule();
    let pixels = dcfg.pixels();
    let universe = ds.universe().max(ds.examples.last().map_or(0, |e| e.id as usize + 1));
    let mut slot: Vec<Option<usize>> = vec![None; universe];
    for (i, e) in ds.examples.iter().enumerate() {
        slot[e.id as usize] = Some(i);
    }

    let mut theta = arch.init(cfg.seed);
    let mut velocity = vec![0.0f32; theta.len()];
    // the lr schedule is indexed by nominal batch position so that it does
    // not depend on which examples were removed
    let batches_per_epoch = universe.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mu = cfg.momentum as f32;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut eps = vec![0.0f64; pixels];

    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0f64;
        let mut epoch_rows = 0usize;
        for (b, batch) in epoch_batches(universe, cfg.batch_size, cfg.seed, epoch).iter().enumerate() {
            let members: Vec<usize> = batch.iter().filter_map(|&id| slot[id as usize]).collect();
            if members.is_empty() {
                continue;
            }
            let n = members.len();
            let mut x_t = Array2::<f32>::zeros((n, pixels));
            let mut target = Array2::<f32>::zeros((n, pixels));
            let mut ts = Vec::with_capacity(n);
            let mut cs = Vec::with_capacity(n);
            for (r, &i) in members.iter().enumerate() {
                let e = &ds.examples[i];
                let key = (epoch as u64, e.id);
                let t = 1 + rng::below(cfg.seed, Stream::TrainTimestep, key.0, key.1, dcfg.steps as u64) as usize;
                rng::fill_normal(cfg.seed, Stream::TrainNoise, key.0, key.1, &mut eps);
                let flip = cfg.flip_augment && rng::unit(cfg.seed, Stream::TrainFlip, key.0, key.1) < 0.5;
                let flipped;
                let x0 = if flip {
                    flipped = e.flip();
                    &flipped.x
                } else {
                    &e.x
                };
                let ab = sched.alpha_bars[t];
                let (ca, cb) = (ab.sqrt(), (1.0 - ab).sqrt());
                for j in 0..pixels {
                    x_t[[r, j]] = (ca * x0[j] as f64 + cb * eps[j]) as f32;
                    target[[r, j]] = eps[j] as f32;
                }
                ts.push(t);
                cs.push(e.class);
            }

            let w = Weights::<f32>::from_params(arch, &theta);
            let (out, cache) = w.forward(x_t.view(), &ts, &cs);
            let diff = out - &target;
            let scale = 2.0 / (n * pixels) as f32;
            let batch_loss = diff.iter().map(|&d| (d as f64) * (d as f64)).sum::<f64>() / pixels as f64;
            if !batch_loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    loss: batch_loss,
                });
            }
            epoch_loss += batch_loss;
            epoch_rows += n;
            let mut grad = w.backward(&cache, &diff.mapv(|d| d * scale), Reduction::Sum);
            if cfg.clip_norm > 0.0 {
                let norm = grad.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
                if norm > cfg.clip_norm {
                    let k = (cfg.clip_norm / norm) as f32;
                    grad.iter_mut().for_each(|g| *g *= k);
                }
            }
            let lr = if cfg.cosine_decay {
                let frac = (epoch * batches_per_epoch + b) as f64 / total_steps as f64;
                cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            } else {
                cfg.learning_rate
            } as f32;
            for ((p, v), g) in theta.values_mut().iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                *v = mu * *v + g;
                *p -= lr * *v;
            }
        }
        let mean_loss = epoch_loss / epoch_rows.max(1) as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                batch: 0,
                loss: mean_loss,
            });
        }
        log.push(EpochLog { epoch, mean_loss });
    }
    theta.check_finite("train")?;

    let removed = ds.removed_ids();
    let provenance = json!({
        "dataset_hash": ds.content_hash(),
        "dataset_size": ds.len(),
        "universe": universe,
        "removed_count": removed.len(),
        "removed_ids": removed,
        "train": cfg,
        "final_loss": log.last().map(|l| l.mean_loss),
    });
    Ok(Trained {
        checkpoint: Checkpoint::new("trained", dcfg, theta, provenance),
        log,
    })
}

/// `θ₋K = A(D \ removed)`.
pub fn retrain_leave_k(ds: &Dataset, removed: &BTreeSet<u64>, cfg: &TrainConfig, dcfg: &DiffusionConfig) -> Result<Trained> {
    train(&leave_out(ds, removed)?, cfg, dcfg)
}

/// Writes `checkpoint.bin`, `manifest.json` and `train_log.csv` under `dir`.
pub fn write_run(dir: &Path, trained: &Trained, extra: serde_json::Value) -> Result<String> {
    std::fs::create_dir_all(dir)?;
    trained.checkpoint.write(&dir.join("checkpoint.bin"))?;
    let hash = trained.checkpoint.file_hash()?;
    let manifest = json!({
        "checkpoint": "checkpoint.bin",
        "checkpoint_hash": hash,
        "provenance": trained.checkpoint.header.provenance,
        "inputs": extra,
    });
    crate::container::write_atomic(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    crate::container::write_atomic(&dir.join("train_log.csv"), trained.log_csv().as_bytes())?;
    Ok(hash)
}
