//! Dense state-matching loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::types::{yaw_diff, SimState};

/// Per-term weights of [`state_loss`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_xy: f64,
    pub w_v: f64,
    pub w_yaw: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_xy: 1.0,
            w_v: 0.2,
            w_yaw: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |w: f64| w >= 0.0 && w.is_finite();
        if !(ok(self.w_xy) && ok(self.w_v) && ok(self.w_yaw)) {
            return Err(Error::Config(format!("loss weights must be finite and ≥ 0: {self:?}")));
        }
        Ok(())
    }
}

/// Agents supervised at one step: controlled and valid in both states.
pub fn supervised_agents(s: &SimState, log: &SimState) -> Vec<usize> {
    (0..s.num_agents())
        .filter(|&i| s.controlled[i] && s.valid[i] && log.valid[i])
        .collect()
}

/// One agent's weighted error against its log state.
pub fn agent_loss(s: &crate::types::AgentState, log: &crate::types::AgentState, w: &LossWeights) -> Result<f64> {
    let xy = (s.x - log.x).hypot(s.y - log.y);
    let v = (s.vx - log.vx).hypot(s.vy - log.vy);
    let yaw = yaw_diff(s.yaw, log.yaw)?.abs();
    Ok(w.w_xy * xy + w.w_v * v + w.w_yaw * yaw)
}

/// Mean over supervised agents of
/// `w_xy·‖Δ(x,y)‖ + w_v·‖Δ(vx,vy)‖ + w_yaw·|yaw_diff|`.
///
/// Returns the loss and the number of supervised agents; a step with no
/// supervised agent has loss 0.
pub fn state_loss(s: &SimState, log: &SimState, w: &LossWeights) -> Result<(f64, usize)> {
    if s.num_agents() != log.num_agents() {
        return Err(Error::domain("state_loss", "sim and log agent counts differ"));
    }
    let sup = supervised_agents(s, log);
    if sup.is_empty() {
        return Ok((0.0, 0));
    }
    let mut total = 0.0;
    for &i in &sup {
        total += agent_loss(&s.agents[i], &log.agents[i], w)?;
    }
    Ok((total / sup.len() as f64, sup.len()))
}

/// Tape version of [`state_loss`].
///
/// `sim` is `N×5` (`x, y, yaw, vx, vy` per row), `target` the matching log
/// rows and `mask` marks supervised rows. Returns `None` when no row is
/// supervised.
pub fn state_loss_tape(tape: &mut Tape, sim: Var, target: &Tensor, mask: &[bool], w: &LossWeights) -> Result<Option<Var>> {
    let (n, c) = tape.shape(sim);
    if target.shape() != (n, c) || c != 5 || mask.len() != n {
        return Err(Error::Shape {
            op: "state_loss",
            lhs: (n, c),
            rhs: target.shape(),
        });
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Ok(None);
    }
    let tgt = tape.constant(target.clone());
    let diff = tape.sub(sim, tgt)?;
    let dxy = tape.slice(diff, 0, 2)?;
    let dxy = tape.l2_norm(dxy)?;
    let dv = tape.slice(diff, 3, 2)?;
    let dv = tape.l2_norm(dv)?;
    let dyaw = tape.slice(diff, 2, 1)?;
    let (s, co) = (tape.sin(dyaw)?, tape.cos(dyaw)?);
    let dyaw = tape.atan2(s, co)?;
    let dyaw = tape.abs(dyaw)?;

    let a = tape.scale(dxy, w.w_xy)?;
    let b = tape.scale(dv, w.w_v)?;
    let c = tape.scale(dyaw, w.w_yaw)?;
    let per = tape.add(a, b)?;
    let per = tape.add(per, c)?;
    let m = tape.constant(Tensor::column(mask.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()));
    let per = tape.mul(per, m)?;
    let total = tape.sum(per)?;
    Ok(Some(tape.scale(total, 1.0 / count as f64)?))
}
