//! APG and behaviour-cloning training.
//!
//! Each epoch shuffles the dataset, splits it into batches, runs one
//! rollout per scenario in parallel, sums the gradients in batch order and
//! applies one Adam step per batch. Rollout RNG streams are derived from
//! `(seed, scenario index, epoch)`, so results do not depend on the number
//! of worker threads.

pub mod adam;
pub mod config;
pub mod loss;
pub mod rollout;

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use adam::{adam_step, clip_global_norm, global_norm, AdamState, StepInfo};
pub use config::{curriculum_tick, AdamConfig, HiddenReset, Mode, ResetPolicy, TrainConfig};
pub use loss::{state_loss, state_loss_tape, LossWeights};
pub use rollout::{
    bc_loss, detached_loss, expert_action, rollout_apg, rollout_bc_train, simulate, training_steps, BcRecord, PolicyNoise, ResetCause,
    ResetEvent, RolloutOptions, RolloutRecord,
};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::policy::checkpoint::{policy_from_tensors, policy_tensors};
use crate::policy::{PolicyParams, PARAM_NAMES};
use crate::types::Scenario;

/// SplitMix64 finalizer.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream seed for `(seed, a, b)`.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ a) ^ b)
}

/// RNG seed of the rollout of scenario `index` in `epoch`.
pub fn rollout_seed(seed: u64, index: usize, epoch: usize) -> u64 {
    mix_seed(seed, index as u64, epoch as u64)
}

fn shuffle_seed(seed: u64, epoch: usize) -> u64 {
    mix_seed(seed, u64::MAX, epoch as u64)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean rollout loss (APG state loss or BC action loss).
    pub mean_loss: f64,
    /// Mean pre-clip global gradient norm over the epoch's batches.
    pub grad_norm: f64,
    pub reset_count: usize,
    pub wall_ms: u128,
}

/// Header of the tab-separated training log.
pub const LOG_HEADER: &str = "# epoch\tmean_loss\tgrad_norm\treset_count\twall_ms";

impl EpochRecord {
    /// Tab-separated line; floats use the shortest exact representation.
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.epoch, self.mean_loss, self.grad_norm, self.reset_count, self.wall_ms
        )
    }

    /// The line without the wall-clock column, for reproducibility checks.
    pub fn deterministic_part(&self) -> String {
        format!("{}\t{}\t{}\t{}", self.epoch, self.mean_loss, self.grad_norm, self.reset_count)
    }
}

/// Writes the header and records.
pub fn write_log<W: Write>(w: &mut W, records: &[EpochRecord]) -> std::io::Result<()> {
    writeln!(w, "{LOG_HEADER}")?;
    for r in records {
        writeln!(w, "{}", r.to_line())?;
    }
    Ok(())
}

/// Parses a log written by [`write_log`].
pub fn parse_log(text: &str) -> Result<Vec<EpochRecord>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || Error::Parse(format!("training log line {}: `{line}`", n + 1));
        if f.len() != 5 {
            return Err(bad());
        }
        out.push(EpochRecord {
            epoch: f[0].parse().map_err(|_| bad())?,
            mean_loss: f[1].parse().map_err(|_| bad())?,
            grad_norm: f[2].parse().map_err(|_| bad())?,
            reset_count: f[3].parse().map_err(|_| bad())?,
            wall_ms: f[4].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

struct RolloutResult {
    loss: f64,
    resets: usize,
    grads: Vec<Tensor>,
}

/// Stateful training run; one call to [`Trainer::run_epoch`] per epoch.
pub struct Trainer<'d> {
    config: TrainConfig,
    dataset: &'d [Scenario],
    params: PolicyParams,
    adam: AdamState,
    epoch: usize,
    max_steps: usize,
}

impl<'d> Trainer<'d> {
    pub fn new(dataset: &'d [Scenario], config: TrainConfig, params: PolicyParams) -> Result<Self> {
        config.validate()?;
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for s in dataset {
            if s.dynamics != params.model {
                return Err(Error::ActionKind {
                    expected: s.dynamics,
                    found: params.model,
                });
            }
        }
        let max_steps = dataset.iter().map(|s| training_steps(&config, s)).max().unwrap_or(1);
        let adam = AdamState::new(&params);
        Ok(Self {
            config,
            dataset,
            params,
            adam,
            epoch: 0,
            max_steps,
        })
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn into_params(self) -> PolicyParams {
        self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Number of completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    /// Reset policy the curriculum prescribes for the next epoch.
    pub fn current_reset(&self) -> ResetPolicy {
        curriculum_tick(&self.config, self.epoch, self.max_steps, self.params.config.r_obs)
    }

    fn rollout(&self, index: usize, reset: ResetPolicy) -> Result<RolloutResult> {
        let s = &self.dataset[index];
        match self.config.mode {
            Mode::Apg => {
                let opts = RolloutOptions::for_training(&self.config, reset, s);
                let mut rng = ChaCha8Rng::seed_from_u64(rollout_seed(self.config.seed, index, self.epoch));
                let (rec, grads) = rollout_apg(s, &self.params, &opts, PolicyNoise::Sample(&mut rng))?;
                Ok(RolloutResult {
                    loss: rec.loss,
                    resets: rec.reset_count(),
                    grads,
                })
            }
            Mode::Bc => {
                let (rec, grads) = rollout_bc_train(s, &self.params, training_steps(&self.config, s))?;
                Ok(RolloutResult {
                    loss: rec.loss,
                    resets: 0,
                    grads,
                })
            }
        }
    }

    /// Runs one epoch and returns its log record.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let start = Instant::now();
        let reset = self.current_reset();
        let lr = self.config.lr_at(self.epoch);
        let mut order: Vec<usize> = (0..self.dataset.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed(self.config.seed, self.epoch)));

        let mut loss_sum = 0.0;
        let mut norm_sum = 0.0;
        let mut batches = 0usize;
        let mut resets = 0usize;
        for batch in order.chunks(self.config.batch_size) {
            let this = &*self;
            let results: Vec<Result<RolloutResult>> = batch.par_iter().map(|&i| this.rollout(i, reset)).collect();
            let mut total: Option<Vec<Tensor>> = None;
            for r in results {
                let r = r?;
                loss_sum += r.loss;
                resets += r.resets;
                match &mut total {
                    None => total = Some(r.grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&r.grads) {
                            a.add_assign(g);
                        }
                    }
                }
            }
            let grads = total.expect("batches are non-empty");
            let info = adam_step(
                &mut self.params,
                &grads,
                &mut self.adam,
                &self.config.adam,
                lr,
                self.config.grad_clip_norm,
            )?;
            norm_sum += info.grad_norm;
            batches += 1;
        }
        let record = EpochRecord {
            epoch: self.epoch,
            mean_loss: loss_sum / self.dataset.len() as f64,
            grad_norm: norm_sum / batches as f64,
            reset_count: resets,
            wall_ms: start.elapsed().as_millis(),
        };
        self.epoch += 1;
        Ok(record)
    }

    /// Everything needed to resume: parameters, Adam moments and counters.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = policy_tensors(&self.params);
        for (name, m) in PARAM_NAMES.iter().zip(&self.adam.m) {
            out.push((format!("adam.m.{name}"), m.clone()));
        }
        for (name, v) in PARAM_NAMES.iter().zip(&self.adam.v) {
            out.push((format!("adam.v.{name}"), v.clone()));
        }
        // counters are exact in f64 far beyond any practical run length
        out.push(("trainer.epoch".into(), Tensor::scalar(self.epoch as f64)));
        out.push(("adam.step".into(), Tensor::scalar(self.adam.step as f64)));
        out.push(("adam.skipped".into(), Tensor::scalar(self.adam.skipped as f64)));
        out
    }

    /// Restores a run saved with [`Trainer::state_tensors`].
    pub fn resume(dataset: &'d [Scenario], config: TrainConfig, tensors: &[(String, Tensor)]) -> Result<Self> {
        let params = policy_from_tensors(tensors)?;
        let mut t = Self::new(dataset, config, params)?;
        let find = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Checkpoint(format!("missing `{name}`: not a training checkpoint")))
        };
        let count = |name: &str| -> Result<u64> {
            let v = find(name)?;
            match v.data() {
                [x] if *x >= 0.0 && x.fract() == 0.0 => Ok(*x as u64),
                _ => Err(Error::Checkpoint(format!("`{name}` is not a counter"))),
            }
        };
        for (k, name) in PARAM_NAMES.iter().enumerate() {
            let m = find(&format!("adam.m.{name}"))?;
            let v = find(&format!("adam.v.{name}"))?;
            let shape = t.params.tensors()[k].shape();
            if m.shape() != shape || v.shape() != shape {
                return Err(Error::Checkpoint(format!("adam moments for {name} have the wrong shape")));
            }
            t.adam.m[k] = m.clone();
            t.adam.v[k] = v.clone();
        }
        t.epoch = count("trainer.epoch")? as usize;
        t.adam.step = count("adam.step")?;
        t.adam.skipped = count("adam.skipped")?;
        Ok(t)
    }
}

/// Output of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: PolicyParams,
    pub log: Vec<EpochRecord>,
    /// Optimizer steps skipped for non-finite gradients.
    pub skipped_steps: u64,
}

/// Trains `params` on `dataset` for `config.epochs` epochs.
pub fn train(dataset: &[Scenario], config: &TrainConfig, params: PolicyParams) -> Result<TrainOutput> {
    let mut t = Trainer::new(dataset, config.clone(), params)?;
    let mut log = Vec::with_capacity(config.epochs);
    while !t.is_done() {
        log.push(t.run_epoch()?);
    }
    let skipped_steps = t.adam.skipped;
    Ok(TrainOutput {
        params: t.into_params(),
        log,
        skipped_steps,
    })
}

#[cfg(test)]
mod tests;
