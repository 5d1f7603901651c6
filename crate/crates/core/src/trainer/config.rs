use serde::{Deserialize, Serialize};

use super::loss::LossWeights;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Apg,
    Bc,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "apg" => Ok(Mode::Apg),
            "bc" => Ok(Mode::Bc),
            other => Err(Error::Config(format!("unknown mode `{other}` (expected apg or bc)"))),
        }
    }
}

/// When the simulated controlled agents are snapped back to the log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ResetPolicy {
    /// Snap an agent once its position deviates by more than `xi` meters.
    Distance {
        xi: f64,
    },
    /// Snap every agent every `period` steps.
    Time {
        period: usize,
    },
    None,
}

/// What happens to an agent's GRU state when it is snapped to the log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HiddenReset {
    Zero,
    /// Keep the value, drop its gradient ancestry.
    Detach,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub lr: f64,
    /// Multiplies the learning rate every `lr_decay_every` epochs
    /// (0 disables decay).
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub adam: AdamConfig,
    /// Scenarios per optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    pub weights: LossWeights,
    pub reset: ResetPolicy,
    /// Reset thresholds double every this many epochs (0 disables).
    pub curriculum_every: usize,
    pub hidden_reset: HiddenReset,
    pub grad_clip_norm: f64,
    pub seed: u64,
    /// Train on the first ⌊horizon/2⌋ steps only.
    pub half_sequence: bool,
    /// Supervise only the last simulated state.
    pub final_state_only: bool,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Apg,
            lr: 1e-3,
            lr_decay: 1.0,
            lr_decay_every: 0,
            adam: AdamConfig::default(),
            batch_size: 8,
            epochs: 100,
            weights: LossWeights::default(),
            reset: ResetPolicy::Distance { xi: 1.0 },
            curriculum_every: 0,
            hidden_reset: HiddenReset::Zero,
            grad_clip_norm: 1.0,
            seed: 0,
            half_sequence: false,
            final_state_only: false,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay must be in (0, 1], got {}", self.lr_decay));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad(format!("invalid adam settings {a:?}"));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1".into());
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad(format!("grad_clip_norm must be positive, got {}", self.grad_clip_norm));
        }
        match self.reset {
            ResetPolicy::Distance { xi } if !(xi > 0.0 && xi.is_finite()) => {
                return bad(format!("distance reset needs xi > 0, got {xi}"));
            }
            ResetPolicy::Time { period: 0 } => return bad("time reset needs period ≥ 1".into()),
            _ => {}
        }
        self.weights.validate()
    }

    /// Learning rate in effect during `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.lr_decay_every == 0 {
            self.lr
        } else {
            self.lr * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
        }
    }
}

/// Reset policy in effect during `epoch`: thresholds double every
/// `curriculum_every` epochs, capped at `horizon` steps (time) and
/// `2·r_obs` meters (distance).
pub fn curriculum_tick(config: &TrainConfig, epoch: usize, horizon: usize, r_obs: f64) -> ResetPolicy {
    let doublings = if config.curriculum_every == 0 {
        0
    } else {
        (epoch / config.curriculum_every).min(62) as u32
    };
    match config.reset {
        ResetPolicy::Time { period } => ResetPolicy::Time {
            period: period.saturating_mul(1usize << doublings).min(horizon.max(1)),
        },
        ResetPolicy::Distance { xi } => ResetPolicy::Distance {
            xi: (xi * 2f64.powi(doublings as i32)).min((2.0 * r_obs).max(xi)),
        },
        ResetPolicy::None => ResetPolicy::None,
    }
}
