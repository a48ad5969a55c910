//! Search checkpoints and step-log exports.
//!
//! State file layout, little-endian:
//!
//! ```text
//! magic          8 bytes  "PLNTSRCH"
//! version        u32      1
//! config_hash    u64
//! next_step      u32
//! finished       u8
//! current_loss   f64
//! initial_loss   f64
//! network_path   u32 length + UTF-8, relative to the state file's directory
//! records        u32 count, then per record:
//!   step u32, n u32, n x group u32, n x (present u8, loss f64),
//!   chosen i32 (-1 = none), accepted u8, 5 x channels u32,
//!   param_count u64, val_loss f64
//! ```

use std::path::{Path, PathBuf};

use super::{SearchState, StepRecord};
use crate::error::{Error, Result};
use crate::model::{checkpoint, CONV_LAYERS};

pub const STATE_MAGIC: &[u8; 8] = b"PLNTSRCH";
pub const STATE_VERSION: u32 = 1;

fn u32_of(v: usize) -> Result<[u8; 4]> {
    u32::try_from(v)
        .map(u32::to_le_bytes)
        .map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))
}

fn encode(state: &SearchState, network_path: &str, config_hash: u64) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(STATE_MAGIC);
    out.extend_from_slice(&STATE_VERSION.to_le_bytes());
    out.extend_from_slice(&config_hash.to_le_bytes());
    out.extend_from_slice(&u32_of(state.next_step)?);
    out.push(state.finished as u8);
    out.extend_from_slice(&state.current_loss.to_le_bytes());
    out.extend_from_slice(&state.initial_loss.to_le_bytes());
    out.extend_from_slice(&u32_of(network_path.len())?);
    out.extend_from_slice(network_path.as_bytes());
    out.extend_from_slice(&u32_of(state.step_log.len())?);
    for r in &state.step_log {
        out.extend_from_slice(&u32_of(r.step)?);
        out.extend_from_slice(&u32_of(r.evaluated_groups.len())?);
        for &g in &r.evaluated_groups {
            out.extend_from_slice(&u32_of(g)?);
        }
        for l in &r.candidate_losses {
            out.push(l.is_some() as u8);
            out.extend_from_slice(&l.unwrap_or(0.0).to_le_bytes());
        }
        let chosen = r.chosen_group.map_or(-1, |g| g as i32);
        out.extend_from_slice(&chosen.to_le_bytes());
        out.push(r.accepted as u8);
        for &c in &r.channels {
            out.extend_from_slice(&u32_of(c)?);
        }
        out.extend_from_slice(&(r.param_count as u64).to_le_bytes());
        out.extend_from_slice(&r.val_loss.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint("truncated search state".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
}

/// Writes the current network to `dir/network_file` and the state to
/// `dir/state.bin`, each atomically.
pub fn save_state(
    dir: &Path,
    state: &SearchState,
    network_file: &str,
    config_hash: u64,
) -> Result<PathBuf> {
    checkpoint::save(&dir.join(network_file), &state.current, config_hash)?;
    let path = dir.join("state.bin");
    crate::io::write_atomic(&path, &encode(state, network_file, config_hash)?)?;
    Ok(path)
}

/// Reads a state file and the network checkpoint it references.
pub fn load_state(path: &Path) -> Result<(SearchState, u64)> {
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    let mut r = Reader {
        buf: &bytes,
        pos: 0,
    };
    if r.take(8)? != STATE_MAGIC {
        return Err(Error::Checkpoint("bad search state magic".into()));
    }
    let version = r.u32()? as u32;
    if version != STATE_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported search state version {version}"
        )));
    }
    let config_hash = r.u64()?;
    let next_step = r.u32()?;
    let finished = r.u8()? != 0;
    let current_loss = r.f64()?;
    let initial_loss = r.f64()?;
    let len = r.u32()?;
    let network_file = std::str::from_utf8(r.take(len)?)
        .map_err(|_| Error::Checkpoint("network path is not UTF-8".into()))?
        .to_owned();
    let count = r.u32()?;
    let mut step_log = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let step = r.u32()?;
        let n = r.u32()?;
        let evaluated_groups = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let mut candidate_losses = Vec::with_capacity(n);
        for _ in 0..n {
            let present = r.u8()? != 0;
            let loss = r.f64()?;
            candidate_losses.push(present.then_some(loss));
        }
        let chosen = r.i32()?;
        let accepted = r.u8()? != 0;
        let mut channels = [0; CONV_LAYERS];
        for c in &mut channels {
            *c = r.u32()?;
        }
        let param_count = r.u64()? as usize;
        let val_loss = r.f64()?;
        step_log.push(StepRecord {
            step,
            evaluated_groups,
            candidate_losses,
            chosen_group: (chosen >= 0).then_some(chosen as usize),
            accepted,
            channels,
            param_count,
            val_loss,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes in search state".into()));
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    let current = checkpoint::load(&dir.join(&network_file))?.network;
    Ok((
        SearchState {
            current,
            current_loss,
            initial_loss,
            step_log,
            next_step,
            finished,
        },
        config_hash,
    ))
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items
        .into_iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(";")
}

/// CSV with one row per step; list-valued fields are `;`-separated.
pub fn step_log_csv(log: &[StepRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "step",
        "evaluated_groups",
        "candidate_val_losses",
        "chosen_group",
        "accepted",
        "channels",
        "param_count",
        "val_loss",
    ])?;
    for r in log {
        w.write_record([
            r.step.to_string(),
            join(&r.evaluated_groups),
            join(r.candidate_losses.iter().map(|l| match l {
                Some(v) => v.to_string(),
                None => "diverged".into(),
            })),
            r.chosen_group.map(|g| g.to_string()).unwrap_or_default(),
            r.accepted.to_string(),
            join(r.channels),
            r.param_count.to_string(),
            r.val_loss.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn step_log_json(log: &[StepRecord]) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(log)?;
    out.push(b'\n');
    Ok(out)
}
