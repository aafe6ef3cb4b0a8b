//! `GDT1` checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "GDT1"
//! u32 meta_len, meta bytes (UTF-8, opaque to this module)
//! manifest                       -- parameters
//! u64 float_count, f32 * float_count
//! u8 has_optimizer
//! [u64 step, manifest, u64 float_count, f32 * float_count]   -- optimizer moments
//!
//! manifest := u32 byte_len, u32 entries, entries * {
//!     u16 name_len, name, u8 rank, u32 * rank dims, u64 offset (in floats)
//! }
//! ```
//!
//! Optimizer entries are named `m.<param>` and `v.<param>`.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::{AdamState, ParamStore, Tensor};
use crate::error::{GdtError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GDT1";

pub type NamedTensors = Vec<(String, Tensor<f32>)>;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: String,
    pub params: NamedTensors,
    pub optimizer: Option<(u64, NamedTensors)>,
}

fn write_section(out: &mut Vec<u8>, tensors: &[(&str, &[usize], &[f32])]) {
    let mut manifest = Vec::new();
    manifest.write_u32::<LE>(tensors.len() as u32).unwrap();
    let mut offset = 0u64;
    for (name, shape, data) in tensors {
        manifest.write_u16::<LE>(name.len() as u16).unwrap();
        manifest.extend_from_slice(name.as_bytes());
        manifest.write_u8(shape.len() as u8).unwrap();
        for &d in *shape {
            manifest.write_u32::<LE>(d as u32).unwrap();
        }
        manifest.write_u64::<LE>(offset).unwrap();
        offset += data.len() as u64;
    }
    out.write_u32::<LE>(manifest.len() as u32).unwrap();
    out.extend_from_slice(&manifest);
    out.write_u64::<LE>(offset).unwrap();
    for (_, _, data) in tensors {
        for &x in *data {
            out.write_f32::<LE>(x).unwrap();
        }
    }
}

pub fn encode_checkpoint(
    meta: &str,
    store: &ParamStore<f32>,
    optimizer: Option<&AdamState<f32>>,
) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.write_u32::<LE>(meta.len() as u32).unwrap();
    out.extend_from_slice(meta.as_bytes());
    let params: Vec<_> = store
        .entries()
        .iter()
        .map(|e| (e.name.as_str(), e.value.shape(), e.value.data()))
        .collect();
    write_section(&mut out, &params);
    match optimizer {
        None => out.write_u8(0).unwrap(),
        Some(opt) => {
            out.write_u8(1).unwrap();
            out.write_u64::<LE>(opt.step).unwrap();
            let names: Vec<(String, String)> = store
                .entries()
                .iter()
                .map(|e| (format!("m.{}", e.name), format!("v.{}", e.name)))
                .collect();
            let mut moments = Vec::new();
            for (i, e) in store.entries().iter().enumerate() {
                moments.push((names[i].0.as_str(), e.value.shape(), opt.m[i].as_slice()));
            }
            for (i, e) in store.entries().iter().enumerate() {
                moments.push((names[i].1.as_str(), e.value.shape(), opt.v[i].as_slice()));
            }
            write_section(&mut out, &moments);
        }
    }
    out
}

pub fn save_checkpoint(
    path: &Path,
    meta: &str,
    store: &ParamStore<f32>,
    optimizer: Option<&AdamState<f32>>,
) -> Result<()> {
    let bytes = encode_checkpoint(meta, store, optimizer);
    std::fs::write(path, bytes).map_err(|e| GdtError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| GdtError::io(path, e))?;
    decode_checkpoint(&bytes)
}

fn truncated(cur: &Cursor<&[u8]>) -> GdtError {
    GdtError::Load {
        offset: cur.position(),
        msg: "truncated checkpoint".into(),
    }
}

fn read_section(cur: &mut Cursor<&[u8]>) -> Result<NamedTensors> {
    let _manifest_len = cur.read_u32::<LE>().map_err(|_| truncated(cur))?;
    let count = cur.read_u32::<LE>().map_err(|_| truncated(cur))?;
    let mut manifest = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = cur.read_u16::<LE>().map_err(|_| truncated(cur))? as usize;
        let mut name = vec![0u8; name_len];
        cur.read_exact(&mut name).map_err(|_| truncated(cur))?;
        let name = String::from_utf8(name).map_err(|_| GdtError::Load {
            offset: cur.position(),
            msg: "parameter name is not UTF-8".into(),
        })?;
        let rank = cur.read_u8().map_err(|_| truncated(cur))?;
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(cur.read_u32::<LE>().map_err(|_| truncated(cur))? as usize);
        }
        let offset = cur.read_u64::<LE>().map_err(|_| truncated(cur))?;
        manifest.push((name, shape, offset));
    }
    let total = cur.read_u64::<LE>().map_err(|_| truncated(cur))?;
    let start = cur.position();
    let remaining = cur.get_ref().len() as u64 - start;
    if total.saturating_mul(4) > remaining {
        return Err(truncated(cur));
    }
    let mut data = Vec::with_capacity(total as usize);
    for _ in 0..total {
        data.push(cur.read_f32::<LE>().map_err(|_| truncated(cur))?);
    }
    let mut out = Vec::with_capacity(manifest.len());
    for (name, shape, offset) in manifest {
        let n: usize = shape.iter().product();
        let (lo, hi) = (offset as usize, offset as usize + n);
        if hi > data.len() {
            return Err(GdtError::Load {
                offset: start,
                msg: format!("tensor `{name}` extends past the data block"),
            });
        }
        out.push((name, Tensor::new(shape, data[lo..hi].to_vec())?));
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut cur = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic).map_err(|_| truncated(&cur))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(GdtError::Load {
            offset: 0,
            msg: "bad checkpoint magic".into(),
        });
    }
    let meta_len = cur.read_u32::<LE>().map_err(|_| truncated(&cur))? as usize;
    let mut meta = vec![0u8; meta_len];
    cur.read_exact(&mut meta).map_err(|_| truncated(&cur))?;
    let meta = String::from_utf8(meta).map_err(|_| GdtError::Load {
        offset: 8,
        msg: "checkpoint metadata is not UTF-8".into(),
    })?;
    let params = read_section(&mut cur)?;
    let has_opt = cur.read_u8().map_err(|_| truncated(&cur))?;
    let optimizer = if has_opt == 1 {
        let step = cur.read_u64::<LE>().map_err(|_| truncated(&cur))?;
        Some((step, read_section(&mut cur)?))
    } else {
        None
    };
    Ok(Checkpoint {
        meta,
        params,
        optimizer,
    })
}

/// Copies named tensors into `store`, requiring an exact name and shape match.
pub fn restore_params(store: &mut ParamStore<f32>, tensors: &NamedTensors) -> Result<()> {
    if tensors.len() != store.len() {
        return Err(GdtError::Checkpoint(format!(
            "checkpoint has {} tensors, model has {}",
            tensors.len(),
            store.len()
        )));
    }
    for (name, t) in tensors {
        let id = store
            .find(name)
            .ok_or_else(|| GdtError::Checkpoint(format!("unknown parameter `{name}`")))?;
        if store.value(id).shape() != t.shape() {
            return Err(GdtError::shape(
                "restore_params",
                store.value(id).shape(),
                t.shape(),
            ));
        }
        store.value_mut(id).data_mut().copy_from_slice(t.data());
    }
    Ok(())
}

pub fn restore_optimizer(
    state: &mut AdamState<f32>,
    store: &ParamStore<f32>,
    step: u64,
    tensors: &NamedTensors,
) -> Result<()> {
    for (i, e) in store.entries().iter().enumerate() {
        for (prefix, dst) in [("m", &mut state.m[i]), ("v", &mut state.v[i])] {
            let key = format!("{prefix}.{}", e.name);
            let (_, t) = tensors
                .iter()
                .find(|(n, _)| *n == key)
                .ok_or_else(|| GdtError::Checkpoint(format!("missing optimizer tensor `{key}`")))?;
            if t.numel() != dst.len() {
                return Err(GdtError::shape(
                    "restore_optimizer",
                    &[dst.len()],
                    t.shape(),
                ));
            }
            dst.copy_from_slice(t.data());
        }
    }
    state.step = step;
    Ok(())
}
