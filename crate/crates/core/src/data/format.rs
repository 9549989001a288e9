//! `IDT1` container: magic, `u32` header length, JSON header, then records.
//!
//! Each record is `u32` byte length followed by
//! `task_id: u32, len: u32, obs: [u16; 2] * len, actions: u16 * len,
//! rewards: f32 * len, dones: u8 * len, total_return: f32`, all little-endian.

use std::collections::HashSet;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CollectorConfig, Trajectory};
use crate::env::{EnvKind, GridTask, TaskEntry, TaskSet};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"IDT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub kind: EnvKind,
    pub grid_size: usize,
    pub episode_len: usize,
    pub n_tasks: usize,
    pub n_records: usize,
    pub tasks: Vec<TaskEntry>,
    pub collector: CollectorConfig,
    pub seed: u64,
}

impl DatasetHeader {
    pub fn new(tasks: &[GridTask], collector: CollectorConfig, seed: u64) -> Result<Self> {
        let set = TaskSet::from_tasks(tasks)?;
        Ok(Self {
            format_version: FORMAT_VERSION,
            kind: set.kind,
            grid_size: set.grid_size,
            episode_len: set.episode_len,
            n_tasks: set.tasks.len(),
            n_records: 0,
            tasks: set.tasks,
            collector,
            seed,
        })
    }

    pub fn task_set(&self) -> TaskSet {
        TaskSet { kind: self.kind, grid_size: self.grid_size, episode_len: self.episode_len, tasks: self.tasks.clone() }
    }

    pub fn grid_tasks(&self) -> Result<Vec<GridTask>> {
        self.task_set().to_tasks()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFile {
    pub header: DatasetHeader,
    pub records: Vec<Trajectory>,
}

impl DatasetFile {
    /// Records of one task in collection order.
    pub fn task_records(&self, task_id: usize) -> impl Iterator<Item = &Trajectory> {
        self.records.iter().filter(move |r| r.task_id == task_id)
    }

    fn validate(&self) -> Result<()> {
        let h = &self.header;
        if h.n_tasks != h.tasks.len() {
            return Err(Error::LengthMismatch(format!("header lists {} tasks but n_tasks = {}", h.tasks.len(), h.n_tasks)));
        }
        h.grid_tasks()?;
        let ids: HashSet<usize> = h.tasks.iter().map(|t| t.task_id).collect();
        for r in &self.records {
            r.validate()?;
            if !ids.contains(&r.task_id) {
                return Err(Error::InvalidDataset(format!("record task {} not in header", r.task_id)));
            }
            if r.len() != h.episode_len {
                return Err(Error::LengthMismatch(format!("record of {} steps, episode_len {}", r.len(), h.episode_len)));
            }
        }
        Ok(())
    }
}

fn encode_record(r: &Trajectory, out: &mut Vec<u8>) {
    let t = r.len();
    let body = 8 + t * (4 + 2 + 4 + 1) + 4;
    out.extend((body as u32).to_le_bytes());
    out.extend((r.task_id as u32).to_le_bytes());
    out.extend((t as u32).to_le_bytes());
    for [x, y] in &r.observations {
        out.extend(x.to_le_bytes());
        out.extend(y.to_le_bytes());
    }
    for a in &r.actions {
        out.extend(a.to_le_bytes());
    }
    for v in &r.rewards {
        out.extend(v.to_le_bytes());
    }
    out.extend(r.dones.iter().map(|&d| u8::from(d)));
    out.extend(r.total_return.to_le_bytes());
}

pub fn write_dataset(path: impl AsRef<Path>, file: &DatasetFile) -> Result<()> {
    file.validate()?;
    let header = DatasetHeader { n_records: file.records.len(), ..file.header.clone() };
    let json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::new();
    for r in &file.records {
        buf.clear();
        encode_record(r, &mut buf);
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::TruncatedRecord)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

fn decode_record(body: &[u8]) -> Result<Trajectory> {
    let mut c = Cursor { bytes: body, pos: 0 };
    let task_id = c.u32()? as usize;
    let t = c.u32()? as usize;
    let expected = t.checked_mul(11).and_then(|v| v.checked_add(4));
    if expected != Some(c.remaining()) {
        return Err(Error::LengthMismatch(format!("record claims {t} steps but holds {} bytes", c.remaining())));
    }
    let u16s = |b: &[u8]| -> Vec<u16> { b.chunks_exact(2).map(|p| u16::from_le_bytes([p[0], p[1]])).collect() };
    let obs = u16s(c.take(4 * t)?);
    let observations = obs.chunks_exact(2).map(|p| [p[0], p[1]]).collect();
    let actions = u16s(c.take(2 * t)?);
    let rewards = c.take(4 * t)?.chunks_exact(4).map(|p| f32::from_le_bytes(p.try_into().expect("4 bytes"))).collect();
    let dones = c
        .take(t)?
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(Error::InvalidDataset(format!("done byte {b}"))),
        })
        .collect::<Result<_>>()?;
    let total_return = f32::from_le_bytes(c.take(4)?.try_into().expect("4 bytes"));
    Ok(Trajectory { task_id, observations, actions, rewards, dones, total_return })
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<DatasetFile> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic { expected: "IDT1" });
    }
    let mut c = Cursor { bytes: &bytes, pos: 4 };
    let header_len = c.u32()? as usize;
    let value: serde_json::Value = serde_json::from_slice(c.take(header_len)?)?;
    let version = value.get("format_version").and_then(serde_json::Value::as_u64).unwrap_or(0);
    if version != u64::from(FORMAT_VERSION) {
        return Err(Error::UnsupportedVersion(u32::try_from(version).unwrap_or(u32::MAX)));
    }
    let header: DatasetHeader = serde_json::from_value(value)?;
    let mut records = Vec::with_capacity(header.n_records);
    while c.remaining() > 0 {
        let len = c.u32()? as usize;
        records.push(decode_record(c.take(len)?)?);
    }
    if records.len() != header.n_records {
        return Err(Error::TruncatedRecord);
    }
    let file = DatasetFile { header, records };
    file.validate()?;
    Ok(file)
}
