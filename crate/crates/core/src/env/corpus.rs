//! Demonstration corpus: magic `MGPD`, u16 version, u32 record count, then
//! length-prefixed records, then a SHA-256 trailer.

use std::fmt::Write as _;
use std::path::Path;

use super::{Demonstration, TaskKind, ACTION_DIM, STATE_DIM};
use crate::binio::{read_file, verified_body, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::numeric::Tensor;

const MAGIC: &[u8; 4] = b"MGPD";
const VERSION: u16 = 1;

pub(crate) fn encode_corpus(demos: &[Demonstration]) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u16(VERSION);
    w.u32(demos.len() as u32);
    for d in demos {
        let len_at = w.len();
        w.u64(0);
        let start = w.len();
        w.u8(d.task.id());
        w.u64(d.seed);
        w.u32(d.horizon() as u32);
        w.u32(d.length as u32);
        w.u8(d.success as u8);
        w.u32(d.observations.cols() as u32);
        w.f64s(d.observations.data());
        w.f64s(d.states.data());
        w.f64s(d.actions.data());
        let n = w.len() - start;
        w.patch_u64(len_at, n as u64);
    }
    w.finish()
}

pub(crate) fn decode_corpus(bytes: &[u8]) -> Result<Vec<Demonstration>> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            reason: format!("unsupported corpus version {version}"),
        });
    }
    let body = verified_body(bytes)?;
    let mut r = Reader::new(body);
    r.take(6)?;
    let count = r.u32()? as usize;
    let mut demos = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let rec_len = r.u64()? as usize;
        let start = r.pos();
        let task_at = r.pos();
        let task = TaskKind::from_id(r.u8()?).ok_or_else(|| Error::Format {
            offset: task_at,
            reason: "unknown task id".into(),
        })?;
        let seed = r.u64()?;
        let h = r.u32()? as usize;
        let length = r.u32()? as usize;
        let success = r.u8()? != 0;
        let obs_dim = r.u32()? as usize;
        if h == 0 || obs_dim == 0 {
            return r.fail("empty demonstration arrays");
        }
        let obs = r.f64s(h * obs_dim)?;
        let states = r.f64s(h * STATE_DIM)?;
        let actions = r.f64s(h * ACTION_DIM)?;
        if r.pos() - start != rec_len {
            return r.fail(format!(
                "record length {} disagrees with header {rec_len}",
                r.pos() - start
            ));
        }
        demos.push(Demonstration {
            task,
            seed,
            observations: Tensor::new(vec![h, obs_dim], obs)?,
            states: Tensor::new(vec![h, STATE_DIM], states)?,
            actions: Tensor::new(vec![h, ACTION_DIM], actions)?,
            length,
            success,
        });
    }
    if r.remaining() != 0 {
        return r.fail("trailing bytes after last record");
    }
    Ok(demos)
}

pub fn write_corpus(path: &Path, demos: &[Demonstration]) -> Result<()> {
    write_file(path, &encode_corpus(demos))
}

pub fn read_corpus(path: &Path) -> Result<Vec<Demonstration>> {
    decode_corpus(&read_file(path)?)
}

/// One row per (demo, step): identifiers, observation, state and action.
pub fn export_csv(path: &Path, demos: &[Demonstration]) -> Result<()> {
    let mut out = String::new();
    let obs_dim = demos.first().map(|d| d.observations.cols()).unwrap_or(0);
    out.push_str("demo,task,seed,step,length,success");
    for i in 0..obs_dim {
        let _ = write!(out, ",obs{i}");
    }
    out.push_str(",state_x,state_y,action_x,action_y\n");
    for (i, d) in demos.iter().enumerate() {
        for t in 0..d.horizon() {
            let _ = write!(out, "{i},{},{},{t},{},{}", d.task, d.seed, d.length, d.success as u8);
            for v in d
                .observations
                .row(t)
                .iter()
                .chain(d.states.row(t))
                .chain(d.actions.row(t))
            {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
    }
    write_file(path, out.as_bytes())
}
