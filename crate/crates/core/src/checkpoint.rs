//! Binary checkpoint of a [`TrainState`].
//!
//! Layout (little-endian):
//!
//! ```text
//! "GRDCK1"
//! u32 header length, header: canonical JSON {config, feature_dim, progress,
//!     optimizer_steps, history}
//! u32 group count
//! per group: u32 name length, name, u64 element count, f32 values
//! ```
//!
//! Groups appear in this order: every parameter group in
//! [`Params::groups`] order, then `optim.<group>.m` and `optim.<group>.v` for
//! each parameter group, then `clusters.centroids` once queries have been
//! clustered. All stored values are single-precision representable in
//! memory, so save/load is lossless.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::canonical_json;
use crate::cotrainer::{ClusterAssignment, EpochLog, Progress, TrainConfig, TrainState};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"GRDCK1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: TrainConfig,
    feature_dim: usize,
    progress: Progress,
    optimizer_steps: Vec<u64>,
    history: Vec<EpochLog>,
}

fn push_group(out: &mut Vec<u8>, name: &str, values: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Serializes a training state.
pub fn to_bytes(state: &TrainState) -> Vec<u8> {
    let header = Header {
        config: state.config.clone(),
        feature_dim: state.params.feature_dim(),
        progress: state.progress,
        optimizer_steps: state.optimizer.t.clone(),
        history: state.history.clone(),
    };
    let json = canonical_json(&header);
    let groups = state.params.groups();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(json.as_bytes());
    let count = groups.len() * 3 + usize::from(state.clusters.is_some());
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for (name, values) in &groups {
        push_group(&mut out, name, values);
    }
    for (g, (name, _)) in groups.iter().enumerate() {
        push_group(&mut out, &format!("optim.{name}.m"), &state.optimizer.m[g]);
        push_group(&mut out, &format!("optim.{name}.v"), &state.optimizer.v[g]);
    }
    if let Some(c) = &state.clusters {
        push_group(&mut out, "clusters.centroids", &c.centroids);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated {
                path: self.path.to_path_buf(),
                detail: format!("{what} at byte {}", self.pos),
            }),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn group(&mut self) -> Result<(String, Vec<f64>)> {
        let len = self.u32("group name length")? as usize;
        let name = std::str::from_utf8(self.take(len, "group name")?)
            .map_err(|_| malformed("group name is not UTF-8"))?
            .to_string();
        let count = self.u64("group size")? as usize;
        let raw = self.take(
            count.checked_mul(4).ok_or_else(|| malformed("group size overflow"))?,
            &name,
        )?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok((name, values))
    }
}

fn malformed(detail: impl Into<String>) -> Error {
    Error::Malformed {
        what: "checkpoint",
        detail: detail.into(),
    }
}

/// Parses a checkpoint. `path` is only used in error messages.
///
/// The cluster assignment is restored as centroids only; the per-query map
/// is rebuilt when training resumes against the query store.
pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<TrainState> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "GRDCK1",
        });
    }
    let mut r = Reader {
        bytes,
        pos: MAGIC.len(),
        path,
    };
    let len = r.u32("header length")? as usize;
    let header: Header =
        serde_json::from_slice(r.take(len, "header")?).map_err(|e| malformed(format!("header: {e}")))?;
    let mut state = TrainState::new(header.config, header.feature_dim)?;
    state.progress = header.progress;
    state.history = header.history;
    if header.optimizer_steps.len() != state.optimizer.t.len() {
        return Err(malformed("optimizer step count does not match the parameter groups"));
    }
    state.optimizer.t = header.optimizer_steps;

    let count = r.u32("group count")? as usize;
    let names: Vec<String> = state.params.groups().into_iter().map(|(n, _)| n).collect();
    let n = names.len();
    if count != 3 * n && count != 3 * n + 1 {
        return Err(malformed(format!(
            "{count} groups, expected {} or {}",
            3 * n,
            3 * n + 1
        )));
    }
    let mut read = |expected: &str, size: usize| -> Result<Vec<f64>> {
        let (name, values) = r.group()?;
        if name != expected || values.len() != size {
            return Err(malformed(format!(
                "group {name:?} with {} values where {expected:?} with {size} was expected",
                values.len()
            )));
        }
        Ok(values)
    };
    let sizes: Vec<usize> = state.params.groups().iter().map(|(_, g)| g.len()).collect();
    {
        let mut groups = state.params.groups_mut();
        for (g, (name, dst)) in groups.iter_mut().enumerate() {
            dst.copy_from_slice(&read(name, sizes[g])?);
        }
    }
    for (g, name) in names.iter().enumerate() {
        state.optimizer.m[g] = read(&format!("optim.{name}.m"), sizes[g])?;
        state.optimizer.v[g] = read(&format!("optim.{name}.v"), sizes[g])?;
    }
    if count == 3 * n + 1 {
        let (nv, d) = (state.config.num_views, header.feature_dim);
        let centroids = read("clusters.centroids", nv * d)?;
        state.clusters = Some(ClusterAssignment {
            num_views: nv,
            dim: d,
            centroids,
            views: Default::default(),
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::TrailingBytes {
            path: path.to_path_buf(),
            count: bytes.len() - r.pos,
        });
    }
    if !state.params.is_finite() {
        return Err(malformed("non-finite parameter values"));
    }
    Ok(state)
}

pub fn save(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(state)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<TrainState> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}
