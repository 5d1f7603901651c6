//! Scenario files, dataset manifests and the synthetic scenario generator.
//!
//! Scenario JSON (format version 1):
//!
//! ```json
//! {
//!   "version": 1,
//!   "id": "s00000",
//!   "dt": 0.1,
//!   "history_len": 10,
//!   "horizon": 80,
//!   "dynamics": "bicycle",
//!   "roadgraph": [{ "points": [[0.0, 0.0], [1.0, 0.0]], "half_width": 2.0 }],
//!   "agents": [{
//!     "length": 4.5, "width": 2.0, "is_modeled": true, "controlled": true,
//!     "log": [[x, y, yaw, vx, vy, valid], ...]
//!   }]
//! }
//! ```
//!
//! Floats are written in shortest round-trip form, so `load(save(s)) == s`.

pub mod generate;

pub use generate::{generate, GenSpec, RoadShape};

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::types::{AgentState, DynamicsModel, Polyline, Scenario, SimState, Trajectory};

pub const FORMAT_VERSION: u32 = 1;

/// One log row: `x, y, yaw, vx, vy, valid`.
type LogRow = (f64, f64, f64, f64, f64, bool);

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentFile {
    length: f64,
    width: f64,
    is_modeled: bool,
    controlled: bool,
    log: Vec<LogRow>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    version: u32,
    id: String,
    dt: f64,
    history_len: usize,
    horizon: usize,
    dynamics: DynamicsModel,
    roadgraph: Vec<Polyline>,
    agents: Vec<AgentFile>,
}

fn to_file(s: &Scenario) -> ScenarioFile {
    let agents = (0..s.num_agents())
        .map(|i| {
            let first = &s.log.states[0].agents[i];
            AgentFile {
                length: first.length,
                width: first.width,
                is_modeled: s.is_modeled[i],
                controlled: s.init().controlled[i],
                log: s
                    .log
                    .states
                    .iter()
                    .map(|st| {
                        let a = &st.agents[i];
                        (a.x, a.y, a.yaw, a.vx, a.vy, st.valid[i])
                    })
                    .collect(),
            }
        })
        .collect();
    ScenarioFile {
        version: FORMAT_VERSION,
        id: s.id.clone(),
        dt: s.dt,
        history_len: s.history_len,
        horizon: s.horizon,
        dynamics: s.dynamics,
        roadgraph: s.roadgraph.clone(),
        agents,
    }
}

fn from_file(f: ScenarioFile) -> Result<Scenario> {
    if f.agents.is_empty() {
        return Err(Error::invariant("agents", "a scenario needs at least one agent"));
    }
    let expected = f.history_len + f.horizon + 1;
    for (i, a) in f.agents.iter().enumerate() {
        if a.log.len() != expected {
            return Err(Error::invariant(
                format!("agents[{i}].log"),
                format!("length {} != history_len + horizon + 1 = {expected}", a.log.len()),
            ));
        }
    }
    let states = (0..expected)
        .map(|t| SimState {
            t,
            agents: f
                .agents
                .iter()
                .map(|a| {
                    let (x, y, yaw, vx, vy, _) = a.log[t];
                    AgentState::new(x, y, yaw, vx, vy, a.length, a.width)
                })
                .collect(),
            valid: f.agents.iter().map(|a| a.log[t].5).collect(),
            controlled: f.agents.iter().map(|a| a.controlled).collect(),
        })
        .collect();
    let s = Scenario {
        id: f.id,
        roadgraph: f.roadgraph,
        log: Trajectory { states, dt: f.dt },
        is_modeled: f.agents.iter().map(|a| a.is_modeled).collect(),
        dynamics: f.dynamics,
        dt: f.dt,
        history_len: f.history_len,
        horizon: f.horizon,
    };
    s.validate()?;
    Ok(s)
}

fn json_err(e: serde_json::Error) -> Error {
    match e.classify() {
        serde_json::error::Category::Data => Error::Schema(e.to_string()),
        serde_json::error::Category::Io => Error::Io(e.into()),
        _ => Error::Parse(e.to_string()),
    }
}

/// Checks the `version` field before interpreting anything else.
fn check_version(v: &Value) -> Result<()> {
    let found = v
        .get("version")
        .ok_or_else(|| Error::Schema("missing field `version`".into()))?
        .as_u64()
        .ok_or_else(|| Error::Schema("`version` must be a non-negative integer".into()))?;
    if found != u64::from(FORMAT_VERSION) {
        return Err(Error::Version {
            expected: FORMAT_VERSION,
            found: u32::try_from(found).unwrap_or(u32::MAX),
        });
    }
    Ok(())
}

pub fn to_json(s: &Scenario) -> Result<String> {
    s.validate()?;
    serde_json::to_string(&to_file(s)).map_err(json_err)
}

pub fn from_json(text: &str) -> Result<Scenario> {
    let v: Value = serde_json::from_str(text).map_err(json_err)?;
    check_version(&v)?;
    from_file(serde_json::from_value(v).map_err(json_err)?)
}

pub fn save(s: &Scenario, path: &Path) -> Result<()> {
    fs::write(path, to_json(s)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Scenario> {
    from_json(&fs::read_to_string(path)?)
}

/// `scenario` with its log replaced by `traj`, for exporting rollouts in
/// the scenario format.
pub fn with_trajectory(scenario: &Scenario, traj: &Trajectory) -> Result<Scenario> {
    let mut out = scenario.clone();
    out.log = traj.clone();
    out.validate()?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub path: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

/// Writes each scenario to `dir/scenarios/<id>.json` plus `dir/manifest.json`.
pub fn write_dataset(dir: &Path, scenarios: &[(Scenario, Split)]) -> Result<PathBuf> {
    let sub = dir.join("scenarios");
    fs::create_dir_all(&sub)?;
    let mut entries = Vec::with_capacity(scenarios.len());
    for (s, split) in scenarios {
        let rel = format!("scenarios/{}.json", s.id);
        if entries.iter().any(|e: &ManifestEntry| e.path == rel) {
            return Err(Error::invariant("id", format!("duplicate scenario id `{}`", s.id)));
        }
        save(s, &dir.join(&rel))?;
        entries.push(ManifestEntry { path: rel, split: *split });
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        entries,
    };
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, serde_json::to_string_pretty(&manifest).map_err(json_err)? + "\n")?;
    Ok(path)
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let v: Value = serde_json::from_str(&fs::read_to_string(path)?).map_err(json_err)?;
    check_version(&v)?;
    serde_json::from_value(v).map_err(json_err)
}

/// Loads the scenarios of `split` (all when `None`) listed in a manifest.
pub fn load_dataset(manifest_path: &Path, split: Option<Split>) -> Result<Vec<Scenario>> {
    let m = load_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    m.entries
        .iter()
        .filter(|e| split.is_none_or(|s| s == e.split))
        .map(|e| {
            load(&base.join(&e.path)).map_err(|err| match err {
                Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", e.path))),
                other => other,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests;
