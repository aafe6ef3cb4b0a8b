//! `GDTRAJ01` trajectory files.
//!
//! ```text
//! "GDTRAJ01"
//! u8 state_kind (0 vector, 1 image)
//! u32 rank, u32 * rank dims        -- [dim] or [H, W, C]
//! u8 action_kind (0 discrete, 1 continuous)
//! u32 action dim or cardinality
//! u32 episode_count
//! u32 pairs, pairs * {u32 len, key, u32 len, value}   -- UTF-8 metadata
//! episode_count * {
//!     u32 T
//!     T state payloads (f32 for vectors, u8 for images)
//!     T actions (u32 ids, or f32 * dim)
//!     T rewards (f32)
//! }
//! ```
//!
//! All integers and floats are little-endian.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::{ActionKind, Actions, Dataset, DatasetHeader, StateKind, States, Trajectory};
use crate::error::{GdtError, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"GDTRAJ01";

pub fn encode_dataset(header: &DatasetHeader, episodes: &[Trajectory]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    match header.state {
        StateKind::Vector { .. } => out.write_u8(0).unwrap(),
        StateKind::Image { .. } => out.write_u8(1).unwrap(),
    }
    let shape = header.state.shape();
    out.write_u32::<LE>(shape.len() as u32).unwrap();
    for d in shape {
        out.write_u32::<LE>(d as u32).unwrap();
    }
    match header.action {
        ActionKind::Discrete { n } => {
            out.write_u8(0).unwrap();
            out.write_u32::<LE>(n as u32).unwrap();
        }
        ActionKind::Continuous { dim } => {
            out.write_u8(1).unwrap();
            out.write_u32::<LE>(dim as u32).unwrap();
        }
    }
    out.write_u32::<LE>(episodes.len() as u32).unwrap();
    out.write_u32::<LE>(header.metadata.len() as u32).unwrap();
    for (k, v) in &header.metadata {
        for s in [k, v] {
            out.write_u32::<LE>(s.len() as u32).unwrap();
            out.extend_from_slice(s.as_bytes());
        }
    }
    for ep in episodes {
        out.write_u32::<LE>(ep.len() as u32).unwrap();
        match &ep.states {
            States::Vector(v) => v.iter().for_each(|&x| out.write_f32::<LE>(x).unwrap()),
            States::Image(v) => out.extend_from_slice(v),
        }
        match &ep.actions {
            Actions::Discrete(a) => a.iter().for_each(|&x| out.write_u32::<LE>(x).unwrap()),
            Actions::Continuous(a) => a.iter().for_each(|&x| out.write_f32::<LE>(x).unwrap()),
        }
        ep.rewards
            .iter()
            .for_each(|&r| out.write_f32::<LE>(r).unwrap());
    }
    out
}

pub fn write_dataset(path: &Path, header: &DatasetHeader, episodes: &[Trajectory]) -> Result<()> {
    std::fs::write(path, encode_dataset(header, episodes)).map_err(|e| GdtError::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| GdtError::io(path, e))?;
    let (header, episodes) = decode_dataset(&bytes)?;
    Dataset::new(header, episodes)
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
}

impl Reader<'_> {
    fn offset(&self) -> u64 {
        self.cur.position()
    }

    fn fail(&self, at: u64, msg: impl Into<String>) -> GdtError {
        GdtError::Load {
            offset: at,
            msg: msg.into(),
        }
    }

    fn remaining(&self) -> u64 {
        self.cur.get_ref().len() as u64 - self.cur.position()
    }

    fn need(&self, bytes: u64, what: &str) -> Result<()> {
        if self.remaining() < bytes {
            return Err(self.fail(self.offset(), format!("truncated record: {what}")));
        }
        Ok(())
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        self.need(1, what)?;
        Ok(self.cur.read_u8().unwrap())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        self.need(4, what)?;
        Ok(self.cur.read_u32::<LE>().unwrap())
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        self.need(4 * n as u64, what)?;
        Ok((0..n).map(|_| self.cur.read_f32::<LE>().unwrap()).collect())
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as u64;
        self.need(len, what)?;
        let at = self.offset();
        let mut buf = vec![0u8; len as usize];
        self.cur.read_exact(&mut buf).unwrap();
        String::from_utf8(buf).map_err(|_| self.fail(at, format!("{what} is not UTF-8")))
    }
}

/// Parses a dataset file. Per-episode shape errors carry the byte offset of
/// the offending record.
pub fn decode_dataset(bytes: &[u8]) -> Result<(DatasetHeader, Vec<Trajectory>)> {
    let mut r = Reader {
        cur: Cursor::new(bytes),
    };
    if bytes.is_empty() {
        return Err(r.fail(0, "empty file"));
    }
    r.need(8, "magic")?;
    if &bytes[..8] != DATASET_MAGIC {
        return Err(r.fail(0, "bad magic"));
    }
    r.cur.set_position(8);

    let at = r.offset();
    let state_kind = r.u8("state kind")?;
    let rank = r.u32("state rank")? as usize;
    if rank > 8 {
        return Err(r.fail(at, format!("implausible state rank {rank}")));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|_| r.u32("state dims").map(|d| d as usize))
        .collect::<Result<_>>()?;
    if dims.contains(&0) {
        return Err(r.fail(at, "zero-sized state dimension"));
    }
    let state = match (state_kind, dims.as_slice()) {
        (0, &[dim]) => StateKind::Vector { dim },
        (1, &[height, width, channels]) => StateKind::Image {
            height,
            width,
            channels,
        },
        (0 | 1, _) => {
            return Err(r.fail(at, format!("state kind {state_kind} with shape {dims:?}")))
        }
        _ => return Err(r.fail(at, format!("unknown state kind {state_kind}"))),
    };

    let at = r.offset();
    let action_kind = r.u8("action kind")?;
    let width = r.u32("action width")? as usize;
    if width == 0 {
        return Err(r.fail(at, "zero action width"));
    }
    let action = match action_kind {
        0 => ActionKind::Discrete { n: width },
        1 => ActionKind::Continuous { dim: width },
        k => return Err(r.fail(at, format!("unknown action kind {k}"))),
    };

    let count = r.u32("episode count")? as usize;
    let pairs = r.u32("metadata count")? as usize;
    let mut metadata = Vec::with_capacity(pairs.min(1024));
    for _ in 0..pairs {
        let k = r.string("metadata key")?;
        let v = r.string("metadata value")?;
        metadata.push((k, v));
    }
    let header = DatasetHeader {
        state,
        action,
        metadata,
    };

    if count == 0 {
        return Err(r.fail(r.offset(), "no episodes"));
    }
    let slen = state.len();
    let mut episodes = Vec::with_capacity(count.min(1 << 16));
    for e in 0..count {
        let at = r.offset();
        let t = r.u32("episode length")? as usize;
        if t == 0 {
            return Err(r.fail(at, format!("episode {e} has zero steps")));
        }
        let states = match state {
            StateKind::Vector { .. } => States::Vector(r.f32s(t * slen, "states")?),
            StateKind::Image { .. } => {
                r.need((t * slen) as u64, "states")?;
                let mut buf = vec![0u8; t * slen];
                r.cur.read_exact(&mut buf).unwrap();
                States::Image(buf)
            }
        };
        let actions = match action {
            ActionKind::Discrete { .. } => {
                r.need(4 * t as u64, "actions")?;
                Actions::Discrete((0..t).map(|_| r.cur.read_u32::<LE>().unwrap()).collect())
            }
            ActionKind::Continuous { dim } => Actions::Continuous(r.f32s(t * dim, "actions")?),
        };
        let rewards = r.f32s(t, "rewards")?;
        let ep = Trajectory {
            states,
            actions,
            rewards,
        };
        ep.validate(&state, &action)
            .map_err(|m| r.fail(at, format!("episode {e}: {m}")))?;
        episodes.push(ep);
    }
    if r.remaining() > 0 {
        return Err(r.fail(r.offset(), format!("{} trailing bytes", r.remaining())));
    }
    Ok((header, episodes))
}
