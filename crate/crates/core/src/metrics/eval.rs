//! Multi-mode closed-loop evaluation and its CSV reports.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{ade, horizon_mask, trajectory_flags, TrajectoryFlags};
use crate::error::{Error, Result};
use crate::policy::PolicyParams;
use crate::trainer::{mix_seed, simulate, PolicyNoise, RolloutOptions};
use crate::types::{Scenario, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    /// Sampled rollouts per scenario.
    pub modes: usize,
    /// Std-dev of the position noise injected into the dynamics.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modes == 0 {
            return Err(Error::Config("modes must be ≥ 1".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise must be finite and ≥ 0, got {}", self.noise_sigma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeLabel {
    Sampled(usize),
    /// Rollout with the policy mean.
    Deterministic,
}

impl std::fmt::Display for ModeLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModeLabel::Sampled(k) => write!(f, "{k}"),
            ModeLabel::Deterministic => f.write_str("det"),
        }
    }
}

/// Metrics of one rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeRow {
    pub scenario_id: String,
    pub mode: ModeLabel,
    pub ade: f64,
    pub flags: TrajectoryFlags,
}

/// Per-scenario reduction over the sampled modes.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSummary {
    pub scenario_id: String,
    /// Sampled mode with the lowest ADE (first on ties).
    pub best_mode: usize,
    pub min_ade: f64,
    pub best: TrajectoryFlags,
    /// Lowest overlap / offroad flag over the modes (as 0 or 1).
    pub min_overlap: f64,
    pub min_offroad: f64,
    pub deterministic_ade: f64,
    pub deterministic: TrajectoryFlags,
}

/// Dataset means of the per-scenario numbers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub modes: usize,
    pub noise_sigma: f64,
    pub min_ade: f64,
    /// Mean of the per-metric minima.
    pub min_overlap: f64,
    pub min_offroad: f64,
    /// Rates of the best-ADE modes.
    pub best_mode_overlap: f64,
    pub best_mode_offroad: f64,
    pub best_mode_overlap_perc: f64,
    pub best_mode_offroad_perc: f64,
    pub deterministic_ade: f64,
    pub deterministic_overlap: f64,
    pub deterministic_offroad: f64,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub config: EvalConfig,
    /// Sampled modes in order, then the deterministic rollout, per scenario.
    pub rows: Vec<ModeRow>,
    pub scenarios: Vec<ScenarioSummary>,
    pub summary: Summary,
    /// Best-ADE trajectory per scenario.
    pub best_trajectories: Vec<Trajectory>,
}

/// Seed of sampled mode `k` of scenario `index`. Mode `k` does not depend
/// on the total mode count, so evaluations with more modes extend those
/// with fewer.
pub fn mode_seed(seed: u64, index: usize, k: usize) -> u64 {
    mix_seed(seed, index as u64, k as u64)
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

struct ModeOutcome {
    ade: f64,
    flags: TrajectoryFlags,
    trajectory: Trajectory,
}

fn run_mode(params: &PolicyParams, scenario: &Scenario, cfg: &EvalConfig, index: usize, mode: ModeLabel) -> Result<ModeOutcome> {
    let opts = RolloutOptions::eval(cfg.noise_sigma);
    let rec = match mode {
        ModeLabel::Sampled(k) => {
            let seed = mode_seed(cfg.seed, index, k);
            let (mut policy, mut env) = (rng(seed, 0), rng(seed, 1));
            simulate(scenario, params, &opts, PolicyNoise::Sample(&mut policy), Some(&mut env))?
        }
        ModeLabel::Deterministic => {
            let mut env = rng(mix_seed(cfg.seed, index as u64, u64::MAX), 1);
            simulate(scenario, params, &opts, PolicyNoise::Deterministic, Some(&mut env))?
        }
    };
    let mask = horizon_mask(&rec.trajectory, &scenario.log, scenario.history_len);
    Ok(ModeOutcome {
        ade: ade(&rec.trajectory, &scenario.log, &mask)?,
        flags: trajectory_flags(&rec.trajectory, scenario),
        trajectory: rec.trajectory,
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Evaluates `params` on every scenario with `cfg.modes` sampled rollouts
/// plus one deterministic rollout.
pub fn evaluate(params: &PolicyParams, dataset: &[Scenario], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let labels: Vec<ModeLabel> = (0..cfg.modes)
        .map(ModeLabel::Sampled)
        .chain(std::iter::once(ModeLabel::Deterministic))
        .collect();
    let jobs: Vec<(usize, ModeLabel)> = (0..dataset.len()).flat_map(|i| labels.iter().map(move |&m| (i, m))).collect();
    let outcomes: Vec<Result<ModeOutcome>> = jobs.par_iter().map(|&(i, m)| run_mode(params, &dataset[i], cfg, i, m)).collect();
    let mut outcomes = outcomes.into_iter();

    let mut rows = Vec::with_capacity(jobs.len());
    let mut scenarios = Vec::with_capacity(dataset.len());
    let mut best_trajectories = Vec::with_capacity(dataset.len());
    for s in dataset {
        let group: Vec<ModeOutcome> = outcomes.by_ref().take(labels.len()).collect::<Result<_>>()?;
        for (o, &mode) in group.iter().zip(&labels) {
            rows.push(ModeRow {
                scenario_id: s.id.clone(),
                mode,
                ade: o.ade,
                flags: o.flags,
            });
        }
        let (sampled, det) = group.split_at(cfg.modes);
        let best = (0..cfg.modes)
            .min_by(|&a, &b| sampled[a].ade.total_cmp(&sampled[b].ade))
            .expect("modes ≥ 1");
        scenarios.push(ScenarioSummary {
            scenario_id: s.id.clone(),
            best_mode: best,
            min_ade: sampled[best].ade,
            best: sampled[best].flags,
            min_overlap: sampled.iter().map(|o| flag(o.flags.overlap)).fold(1.0, f64::min),
            min_offroad: sampled.iter().map(|o| flag(o.flags.offroad)).fold(1.0, f64::min),
            deterministic_ade: det[0].ade,
            deterministic: det[0].flags,
        });
        best_trajectories.push(sampled[best].trajectory.clone());
    }

    let sc = &scenarios;
    let summary = Summary {
        modes: cfg.modes,
        noise_sigma: cfg.noise_sigma,
        min_ade: mean(sc.iter().map(|s| s.min_ade)),
        min_overlap: mean(sc.iter().map(|s| s.min_overlap)),
        min_offroad: mean(sc.iter().map(|s| s.min_offroad)),
        best_mode_overlap: mean(sc.iter().map(|s| flag(s.best.overlap))),
        best_mode_offroad: mean(sc.iter().map(|s| flag(s.best.offroad))),
        best_mode_overlap_perc: mean(sc.iter().map(|s| s.best.overlap_perc)),
        best_mode_offroad_perc: mean(sc.iter().map(|s| s.best.offroad_perc)),
        deterministic_ade: mean(sc.iter().map(|s| s.deterministic_ade)),
        deterministic_overlap: mean(sc.iter().map(|s| flag(s.deterministic.overlap))),
        deterministic_offroad: mean(sc.iter().map(|s| flag(s.deterministic.offroad))),
    };
    Ok(EvalReport {
        config: *cfg,
        rows,
        scenarios,
        summary,
        best_trajectories,
    })
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse(format!("{other:?}")),
    }
}

/// Writes the per-mode CSV.
pub fn write_modes_csv<W: Write>(w: W, rows: &[ModeRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "scenario_id",
        "mode",
        "ade",
        "overlap_flag",
        "offroad_flag",
        "overlap_perc",
        "offroad_perc",
    ])
    .map_err(csv_err)?;
    for r in rows {
        out.write_record([
            r.scenario_id.clone(),
            r.mode.to_string(),
            r.ade.to_string(),
            u8::from(r.flags.overlap).to_string(),
            u8::from(r.flags.offroad).to_string(),
            r.flags.overlap_perc.to_string(),
            r.flags.offroad_perc.to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub const SUMMARY_COLUMNS: [&str; 13] = [
    "K",
    "noise_sigma",
    "minADE",
    "min_overlap",
    "min_offroad",
    "best_mode_overlap",
    "best_mode_offroad",
    "best_mode_overlap_perc",
    "best_mode_offroad_perc",
    "det_ade",
    "det_overlap",
    "det_offroad",
    "scenarios",
];

/// Writes the one-row summary CSV.
pub fn write_summary_csv<W: Write>(w: W, report: &EvalReport) -> Result<()> {
    let s = &report.summary;
    let mut out = csv::Writer::from_writer(w);
    out.write_record(SUMMARY_COLUMNS).map_err(csv_err)?;
    out.write_record([
        s.modes.to_string(),
        s.noise_sigma.to_string(),
        s.min_ade.to_string(),
        s.min_overlap.to_string(),
        s.min_offroad.to_string(),
        s.best_mode_overlap.to_string(),
        s.best_mode_offroad.to_string(),
        s.best_mode_overlap_perc.to_string(),
        s.best_mode_offroad_perc.to_string(),
        s.deterministic_ade.to_string(),
        s.deterministic_overlap.to_string(),
        s.deterministic_offroad.to_string(),
        report.scenarios.len().to_string(),
    ])
    .map_err(csv_err)?;
    out.flush()?;
    Ok(())
}
