//! Pretext-task training: sample puzzles, minimize cross-entropy over the
//! permutation index with momentum SGD, log, checkpoint, resume.
//!
//! The sample stream is a pure function of the master seed and a cursor
//! counting consumed samples. Sample `s` comes from epoch `s / N` at
//! position `s % N` of that epoch's shuffled order, and its puzzle seed is
//! derived from `(epoch, record)`. Resuming from a checkpoint therefore
//! reproduces the uninterrupted run exactly.

mod checkpoint;
mod metrics;

use std::time::Instant;

use rand::seq::SliceRandom;

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use metrics::{MetricsLog, MetricsRow, METRICS_HEADER};

use crate::cfn::{CfnGrads, CfnModel};
use crate::error::{invalid, Error, Result};
use crate::imagepipe::{make_puzzle, sample_seed, Dataset, PuzzleConfig, PuzzleSample};
use crate::permset::PermutationSet;
use crate::rng::{derived_rng, stream};
use crate::tensornet::{sgd_step, softmax_cross_entropy, ParamSet};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub iterations: u64,
    /// Iterations at which the learning rate is multiplied by 0.1.
    pub lr_decay_at: Vec<u64>,
    /// Rows are written every `log_every` iterations, averaging the interval.
    pub log_every: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub seed: u64,
    /// Zero the wall-clock column so logs from equal runs are byte-identical.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 256,
            iterations: 350_000,
            lr_decay_at: Vec::new(),
            log_every: 1,
            checkpoint_every: 0,
            seed: 0,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("learning rate {} is not a non-negative number", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        Ok(())
    }

    /// Learning rate in effect for the update that completes iteration `iter + 1`.
    pub fn lr_at(&self, iter: u64) -> f32 {
        let decays = self.lr_decay_at.iter().filter(|&&at| at <= iter).count();
        self.learning_rate * 0.1f32.powi(decays as i32)
    }
}

/// Average number of distinct puzzles drawn per training image.
pub fn puzzles_per_image(iterations: u64, batch_size: usize, dataset_size: usize) -> Result<f64> {
    if dataset_size == 0 {
        return Err(invalid!("dataset size must be positive"));
    }
    Ok(iterations as f64 * batch_size as f64 / dataset_size as f64)
}

/// Indices `i >= burn_in` where `losses[i] > losses[i - 1]`.
pub fn loss_increases(losses: &[f64], burn_in: usize) -> Vec<usize> {
    (burn_in.max(1)..losses.len()).filter(|&i| losses[i] > losses[i - 1]).collect()
}

/// Where a sample comes from in the deterministic stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleRef {
    pub epoch: u64,
    pub record: usize,
    pub seed: u64,
}

/// Maps the global sample cursor to `(epoch, record, seed)`.
#[derive(Clone, Debug)]
pub struct Sampler {
    seed: u64,
    len: usize,
    epoch: Option<u64>,
    order: Vec<usize>,
}

impl Sampler {
    pub fn new(seed: u64, dataset_len: usize) -> Result<Self> {
        if dataset_len == 0 {
            return Err(invalid!("cannot sample from an empty dataset"));
        }
        Ok(Self { seed, len: dataset_len, epoch: None, order: Vec::new() })
    }

    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len).collect();
        order.shuffle(&mut derived_rng(self.seed, &[stream::EPOCH_ORDER, epoch]));
        order
    }

    pub fn at(&mut self, cursor: u64) -> SampleRef {
        let epoch = cursor / self.len as u64;
        if self.epoch != Some(epoch) {
            self.order = self.epoch_order(epoch);
            self.epoch = Some(epoch);
        }
        let record = self.order[(cursor % self.len as u64) as usize];
        SampleRef { epoch, record, seed: sample_seed(self.seed, epoch, record as u64) }
    }
}

/// Loss and accuracy of one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub acc: f64,
}

/// Mean gradient of the cross-entropy over `samples`.
pub fn batch_gradients(model: &CfnModel<f32>, samples: &[PuzzleSample]) -> Result<(CfnGrads<f32>, StepStats)> {
    if samples.is_empty() {
        return Err(invalid!("empty batch"));
    }
    let mut grads = model.zero_grads();
    let (mut loss, mut correct) = (0.0f64, 0usize);
    for s in samples {
        let (logits, trace) = model.forward_traced(&s.tiles)?;
        let (l, dlogits) = softmax_cross_entropy(&logits, s.label)?;
        loss += l;
        correct += usize::from(logits.argmax() == Some(s.label));
        grads.add_assign(&model.backward_shared(&trace, &dlogits)?)?;
    }
    let n = samples.len() as f64;
    grads.scale(1.0 / samples.len() as f32);
    Ok((grads, StepStats { loss: loss / n, acc: correct as f64 / n }))
}

fn momentum_update(
    params: &mut ParamSet<f32>,
    grads: &ParamSet<f32>,
    velocity: &mut ParamSet<f32>,
    lr: f32,
    momentum: f32,
) -> Result<()> {
    if params.0.len() != grads.0.len() || params.0.len() != velocity.0.len() {
        return Err(invalid!("optimizer state does not match the parameter layout"));
    }
    for ((p, g), v) in params.tensors_mut().zip(grads.tensors()).zip(velocity.tensors_mut()) {
        sgd_step(p.data_mut(), g.data(), v.data_mut(), lr, momentum)?;
    }
    Ok(())
}

/// One SGD update on a fixed batch. The iteration counter advances; the
/// sample cursor does not.
pub fn train_step(state: &mut Checkpoint, samples: &[PuzzleSample], lr: f32, momentum: f32) -> Result<StepStats> {
    let (grads, stats) = batch_gradients(&state.model, samples)?;
    if !stats.loss.is_finite() || !grads.is_finite() {
        return Err(Error::NonFiniteLoss { iteration: state.iteration + 1, loss: stats.loss });
    }
    momentum_update(state.model.branch_mut().params_mut(), &grads.branch, &mut state.velocity_branch, lr, momentum)?;
    momentum_update(state.model.head_mut().params_mut(), &grads.head, &mut state.velocity_head, lr, momentum)?;
    state.iteration += 1;
    Ok(stats)
}

/// Drives training over a dataset and records what it did.
pub struct Trainer<'a> {
    dataset: &'a Dataset,
    permset: &'a PermutationSet,
    puzzle: &'a PuzzleConfig,
    cfg: TrainConfig,
    state: Checkpoint,
    sampler: Sampler,
    trace: Option<Vec<(SampleRef, usize)>>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: CfnModel<f32>,
        dataset: &'a Dataset,
        permset: &'a PermutationSet,
        puzzle: &'a PuzzleConfig,
        cfg: TrainConfig,
    ) -> Result<Self> {
        let state = Checkpoint::fresh(model, cfg.seed);
        Self::resume(state, dataset, permset, puzzle, cfg)
    }

    /// Continue from `state`. The sample stream follows the seed stored in
    /// the checkpoint, not `cfg.seed`.
    pub fn resume(
        state: Checkpoint,
        dataset: &'a Dataset,
        permset: &'a PermutationSet,
        puzzle: &'a PuzzleConfig,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        puzzle.validate()?;
        let mc = state.model.config();
        if mc.num_classes != permset.len() {
            return Err(Error::Config(format!(
                "network has {} classes, permutation set {}",
                mc.num_classes,
                permset.len()
            )));
        }
        if mc.num_branches != puzzle.cells() || permset.grid() != puzzle.grid {
            return Err(Error::Config(format!(
                "network has {} branches, puzzle grid {}x{} and permutation grid {}",
                mc.num_branches,
                puzzle.grid,
                puzzle.grid,
                permset.grid()
            )));
        }
        if mc.tile_side != puzzle.tile || mc.channels != puzzle.norm.channels() {
            return Err(Error::Config(format!(
                "network expects {}x{}x{} tiles, puzzle produces {}x{}x{}",
                mc.channels,
                mc.tile_side,
                mc.tile_side,
                puzzle.norm.channels(),
                puzzle.tile,
                puzzle.tile
            )));
        }
        let sampler = Sampler::new(state.seed, dataset.len())?;
        Ok(Self { dataset, permset, puzzle, cfg, state, sampler, trace: None })
    }

    /// Record `(sample, label)` for every puzzle drawn from now on.
    pub fn record_samples(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn sample_trace(&self) -> &[(SampleRef, usize)] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn state(&self) -> &Checkpoint {
        &self.state
    }

    pub fn into_state(self) -> Checkpoint {
        self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// The next `batch_size` puzzles of the stream; advances the cursor.
    pub fn next_batch(&mut self) -> Result<Vec<PuzzleSample>> {
        let mut batch = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            let r = self.sampler.at(self.state.cursor);
            let sample = make_puzzle(
                self.dataset.image(r.record),
                self.permset,
                self.puzzle,
                self.dataset.id(r.record),
                r.seed,
            )?;
            if let Some(t) = self.trace.as_mut() {
                t.push((r, sample.label));
            }
            batch.push(sample);
            self.state.cursor += 1;
        }
        Ok(batch)
    }

    pub fn step(&mut self) -> Result<StepStats> {
        let lr = self.cfg.lr_at(self.state.iteration);
        let batch = self.next_batch()?;
        train_step(&mut self.state, &batch, lr, self.cfg.momentum)
    }

    /// Train until `cfg.iterations`, calling `on_checkpoint` every
    /// `checkpoint_every` iterations and once at the end. Rows hold the
    /// logged step's own batch loss and accuracy, so a resumed run logs
    /// exactly what an uninterrupted one would.
    pub fn run(&mut self, mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>) -> Result<MetricsLog> {
        let start = Instant::now();
        let mut log = MetricsLog::new();
        while self.state.iteration < self.cfg.iterations {
            let s = self.step()?;
            let it = self.state.iteration;
            if it.is_multiple_of(self.cfg.log_every) || it == self.cfg.iterations {
                let seconds = if self.cfg.deterministic { 0.0 } else { start.elapsed().as_secs_f64() };
                log.push(MetricsRow { iter: it, loss: s.loss, acc: s.acc, seconds })?;
            }
            if self.cfg.checkpoint_every > 0
                && it.is_multiple_of(self.cfg.checkpoint_every)
                && it != self.cfg.iterations
            {
                on_checkpoint(&self.state)?;
            }
        }
        on_checkpoint(&self.state)?;
        Ok(log)
    }
}

/// Train from scratch without intermediate checkpoints.
pub fn train(
    model: CfnModel<f32>,
    dataset: &Dataset,
    permset: &PermutationSet,
    puzzle: &PuzzleConfig,
    cfg: TrainConfig,
) -> Result<(Checkpoint, MetricsLog)> {
    let mut trainer = Trainer::new(model, dataset, permset, puzzle, cfg)?;
    let log = trainer.run(|_| Ok(()))?;
    Ok((trainer.into_state(), log))
}
