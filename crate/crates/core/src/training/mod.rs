//! End-to-end objective, optimisation loop and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod model;
pub mod optim;

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::moldata::Molecule;
use crate::tensor::Tensor;

pub use checkpoint::{Checkpoint, Progress, RngState};
pub use config::TrainConfig;
pub use model::{forward_loss, forward_loss_on, loss_and_grads, LossParts, LossVars, Model};
pub use optim::{clip_grad_norm, Adam, Plateau};

const SHUFFLE_STREAM: u64 = 1 << 32;
const EVAL_STREAM: u64 = 2;
const TRAIN_STREAM: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub loss: LossParts,
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: LossParts,
    pub val: Option<LossParts>,
    pub lr: f64,
}

/// Mutable optimisation state around a [`Model`].
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub plateau: Plateau,
    pub rng: ChaCha8Rng,
    pub progress: Progress,
    /// Worker threads for per-molecule gradients; results are reduced in batch order.
    pub threads: usize,
}

impl Trainer {
    pub fn new(model: Model) -> Self {
        let c = &model.config;
        let adam = Adam::new(model.store.tensors(), c.lr, c.adam_beta1, c.adam_beta2, c.weight_decay);
        let plateau = Plateau::new(c.plateau_factor, c.plateau_patience, c.min_lr);
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        rng.set_stream(TRAIN_STREAM);
        Trainer {
            model,
            adam,
            plateau,
            rng,
            progress: Progress::default(),
            threads: 1,
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Self {
        Trainer {
            rng: ck.rng.restore(),
            model: ck.model,
            adam: ck.adam,
            plateau: ck.plateau,
            progress: ck.progress,
            threads: 1,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            adam: self.adam.clone(),
            plateau: self.plateau.clone(),
            rng: RngState::capture(&self.rng),
            progress: self.progress,
        }
    }

    /// Mean loss and gradient over `batch`, one independent RNG stream per molecule.
    fn batch_grads(&self, batch: &[&Molecule], seeds: &[u64]) -> Result<(LossParts, Vec<Tensor>)> {
        let work = |i: usize| {
            let mut rng = ChaCha8Rng::seed_from_u64(seeds[i]);
            loss_and_grads(&self.model, batch[i], &mut rng)
        };
        let results: Vec<Result<(LossParts, Vec<Tensor>)>> = if self.threads <= 1 || batch.len() == 1 {
            (0..batch.len()).map(work).collect()
        } else {
            let chunk = batch.len().div_ceil(self.threads);
            std::thread::scope(|s| {
                let handles: Vec<_> = (0..batch.len())
                    .collect::<Vec<_>>()
                    .chunks(chunk)
                    .map(|ids| {
                        let ids = ids.to_vec();
                        s.spawn(move || ids.into_iter().map(work).collect::<Vec<_>>())
                    })
                    .collect();
                handles
                    .into_iter()
                    .flat_map(|h| h.join().expect("gradient worker panicked"))
                    .collect()
            })
        };
        let inv = 1.0 / batch.len() as f64;
        let mut loss = LossParts::default();
        let mut grads: Option<Vec<Tensor>> = None;
        for r in results {
            let (l, g) = r?;
            loss.add(&l);
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
            }
        }
        let mut grads = grads.expect("non-empty batch");
        for g in &mut grads {
            g.data.iter_mut().for_each(|v| *v *= inv);
        }
        Ok((loss.scaled(inv), grads))
    }

    /// One optimiser step on `batch`.
    pub fn step(&mut self, batch: &[&Molecule]) -> Result<StepLog> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let seeds: Vec<u64> = batch.iter().map(|_| self.rng.next_u64()).collect();
        let (loss, mut grads) = self
            .batch_grads(batch, &seeds)
            .map_err(|e| Error::NonFinite(format!("step {}: {e}", self.progress.step)))?;
        let grad_norm = clip_grad_norm(&mut grads, self.model.config.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient at step {}", self.progress.step)));
        }
        self.adam.update(self.model.store.tensors_mut(), &grads);
        self.progress.step += 1;
        Ok(StepLog {
            step: self.progress.step,
            loss,
            grad_norm,
            lr: self.adam.lr,
        })
    }

    fn epoch_order(&self, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.model.config.seed);
        rng.set_stream(SHUFFLE_STREAM + self.progress.epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Mean loss over `data` with a fixed noise stream, so repeated evaluations are comparable.
    pub fn evaluate(&self, data: &[Molecule]) -> Result<LossParts> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.model.config.seed);
        rng.set_stream(EVAL_STREAM);
        let mut sum = LossParts::default();
        for m in data {
            sum.add(&forward_loss(&self.model, m, &mut rng)?);
        }
        Ok(sum.scaled(1.0 / data.len() as f64))
    }

    /// Continues the current epoch until it ends or `max_steps` is reached.
    /// Returns the epoch summary when the epoch completed.
    pub fn run_epoch(
        &mut self,
        train: &[Molecule],
        val: &[Molecule],
        mut on_step: impl FnMut(&StepLog),
    ) -> Result<Option<EpochLog>> {
        if train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let order = self.epoch_order(train.len());
        let bs = self.model.config.batch_size;
        let max_steps = self.model.config.max_steps as u64;
        while self.progress.position < order.len() {
            if max_steps > 0 && self.progress.step >= max_steps {
                return Ok(None);
            }
            let end = (self.progress.position + bs).min(order.len());
            let batch: Vec<&Molecule> = order[self.progress.position..end].iter().map(|&i| &train[i]).collect();
            let log = self.step(&batch)?;
            self.progress.epoch_sum.add(&log.loss.scaled(batch.len() as f64));
            self.progress.epoch_count += batch.len();
            self.progress.position = end;
            on_step(&log);
        }
        let train_mean = self.progress.epoch_sum.scaled(1.0 / self.progress.epoch_count as f64);
        let val_loss = if val.is_empty() { None } else { Some(self.evaluate(val)?) };
        let monitored = val_loss.map_or(train_mean.total, |v| v.total);
        self.adam.lr = self.plateau.observe(monitored, self.adam.lr);
        let log = EpochLog {
            epoch: self.progress.epoch,
            train: train_mean,
            val: val_loss,
            lr: self.adam.lr,
        };
        self.progress.epoch += 1;
        self.progress.position = 0;
        self.progress.epoch_sum = LossParts::default();
        self.progress.epoch_count = 0;
        Ok(Some(log))
    }

    pub fn finished(&self) -> bool {
        let c = &self.model.config;
        self.progress.epoch >= c.epochs || (c.max_steps > 0 && self.progress.step >= c.max_steps as u64)
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory receiving `last.ckpt` after every epoch.
    pub checkpoint_dir: Option<PathBuf>,
    pub threads: usize,
}

/// Trains until `epochs` or `max_steps` is exhausted. On divergence the error is
/// returned and the last checkpoint written to disk is left untouched.
pub fn train(
    trainer: &mut Trainer,
    train_set: &[Molecule],
    val_set: &[Molecule],
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<()> {
    trainer.threads = opts.threads.max(1);
    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    while !trainer.finished() {
        let done = trainer.run_epoch(train_set, val_set, |_| {})?;
        if let Some(dir) = &opts.checkpoint_dir {
            trainer.checkpoint().save(dir.join("last.ckpt"))?;
        }
        match done {
            Some(log) => on_epoch(&log),
            None => break,
        }
    }
    Ok(())
}
