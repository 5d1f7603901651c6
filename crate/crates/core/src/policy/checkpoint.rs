//! Named-tensor checkpoint files.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic    8 bytes  "APGPOL1\0"
//! count    u32
//! count ×  { name_len u32, name bytes (UTF-8), ndim u32 (= 2), dims u64 × ndim }
//! data     f64 × Σ(rows·cols), tensors in table order
//! ```
//!
//! Policy checkpoints hold the parameters under their [`PARAM_NAMES`] plus
//! `meta.policy` (`hidden, queries, k_road, k_agent, r_obs`) and
//! `meta.dynamics` (0 = bicycle, 1 = delta). Other tensors may follow.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{PolicyConfig, PolicyParams, PARAM_NAMES};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::types::DynamicsModel;

pub const MAGIC: &[u8; 8] = b"APGPOL1\0";

const META_POLICY: &str = "meta.policy";
const META_DYNAMICS: &str = "meta.dynamics";

/// Writes named tensors.
pub fn write_tensors<W: Write>(w: &mut W, tensors: &[(String, Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&2u32.to_le_bytes())?;
        w.write_all(&(t.rows() as u64).to_le_bytes())?;
        w.write_all(&(t.cols() as u64).to_le_bytes())?;
    }
    for (_, t) in tensors {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Checkpoint(format!("truncated file while reading {what}: {e}")))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

/// Upper bound on any single count read from a header, to reject garbage
/// before allocating.
const MAX_ENTRIES: u64 = 1 << 28;

/// Reads named tensors written by [`write_tensors`].
pub fn read_tensors<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 8];
    read_exact(r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic: not a policy checkpoint".into()));
    }
    let count = read_u32(r, "tensor count")? as u64;
    if count > MAX_ENTRIES {
        return Err(Error::Checkpoint(format!("implausible tensor count {count}")));
    }
    let mut table = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = read_u32(r, "name length")? as u64;
        if len > 4096 {
            return Err(Error::Checkpoint(format!("implausible name length {len}")));
        }
        let mut name = vec![0u8; len as usize];
        read_exact(r, &mut name, "name")?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
        let ndim = read_u32(r, "ndim")?;
        if ndim != 2 {
            return Err(Error::Checkpoint(format!("{name}: expected 2 dimensions, found {ndim}")));
        }
        let rows = read_u64(r, "rows")?;
        let cols = read_u64(r, "cols")?;
        if rows.saturating_mul(cols) > MAX_ENTRIES {
            return Err(Error::Checkpoint(format!("{name}: implausible shape {rows}x{cols}")));
        }
        table.push((name, rows as usize, cols as usize));
    }
    let mut out = Vec::with_capacity(table.len());
    for (name, rows, cols) in table {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let mut b = [0u8; 8];
            read_exact(r, &mut b, &name)?;
            data.push(f64::from_le_bytes(b));
        }
        out.push((name, Tensor::new(rows, cols, data)));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after tensor data".into()));
    }
    Ok(out)
}

/// Named tensors describing a policy, header entries first.
pub fn policy_tensors(p: &PolicyParams) -> Vec<(String, Tensor)> {
    let c = &p.config;
    let mut out = vec![
        (
            META_POLICY.to_string(),
            Tensor::row(vec![c.hidden as f64, c.queries as f64, c.k_road as f64, c.k_agent as f64, c.r_obs]),
        ),
        (
            META_DYNAMICS.to_string(),
            Tensor::scalar(match p.model {
                DynamicsModel::Bicycle => 0.0,
                DynamicsModel::Delta => 1.0,
            }),
        ),
    ];
    out.extend(PARAM_NAMES.iter().zip(p.tensors()).map(|(n, t)| (n.to_string(), t.clone())));
    out
}

fn find<'a>(tensors: &'a [(String, Tensor)], name: &str) -> Result<&'a Tensor> {
    tensors
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
}

fn as_count(v: f64, what: &str) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v < 1e9 {
        Ok(v as usize)
    } else {
        Err(Error::Checkpoint(format!("{what} is not a count: {v}")))
    }
}

/// Rebuilds a policy from named tensors; extra tensors are ignored.
pub fn policy_from_tensors(tensors: &[(String, Tensor)]) -> Result<PolicyParams> {
    let meta = find(tensors, META_POLICY)?;
    if meta.shape() != (1, 5) {
        return Err(Error::Checkpoint(format!("{META_POLICY} has shape {:?}", meta.shape())));
    }
    let m = meta.data();
    let config = PolicyConfig {
        hidden: as_count(m[0], "hidden")?,
        queries: as_count(m[1], "queries")?,
        k_road: as_count(m[2], "k_road")?,
        k_agent: as_count(m[3], "k_agent")?,
        r_obs: m[4],
    };
    let model = match find(tensors, META_DYNAMICS)?.data() {
        [v] if *v == 0.0 => DynamicsModel::Bicycle,
        [v] if *v == 1.0 => DynamicsModel::Delta,
        other => return Err(Error::Checkpoint(format!("bad {META_DYNAMICS} value {other:?}"))),
    };
    let params = PARAM_NAMES.iter().map(|n| find(tensors, n).cloned()).collect::<Result<Vec<_>>>()?;
    let p = PolicyParams::from_tensors(config, model, params)?;
    if !p.is_finite() {
        return Err(Error::Checkpoint("non-finite parameter values".into()));
    }
    Ok(p)
}

/// Writes named tensors to `path`.
pub fn save_tensors(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensors(&mut w, tensors)?;
    w.flush()?;
    Ok(())
}

/// Reads named tensors from `path`.
pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    read_tensors(&mut BufReader::new(File::open(path)?))
}

pub fn save_policy(path: &Path, p: &PolicyParams) -> Result<()> {
    save_tensors(path, &policy_tensors(p))
}

pub fn load_policy(path: &Path) -> Result<PolicyParams> {
    policy_from_tensors(&load_tensors(path)?)
}
