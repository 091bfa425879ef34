//! Versioned parameter checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "BNASCKPT"
//! version  u32      1
//! count    u32      number of entries
//! entry*   name_len u32, name (UTF-8), kind u8, dims 4 x u32,
//!          payload numel x f32
//! ```

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use crate::error::{contract, Error, Result};
use crate::tensor::{numel, Tensor};

use super::param::{ParamKind, ParamStore};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BNASCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.kind.code());
        for d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn read_u32(cur: &mut Cursor<&[u8]>) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    cur.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Decodes a container into a fresh store (entry order preserved).
pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    let fmt = |msg: String| Error::Format {
        path: "<checkpoint>".into(),
        msg,
    };
    let mut cur = Cursor::new(bytes);
    let mut magic = [0u8; 8];
    cur.read_exact(&mut magic)
        .map_err(|_| fmt("missing magic".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(fmt(format!("bad magic {:?}", magic)));
    }
    let io = |e: std::io::Error| fmt(format!("truncated checkpoint: {e}"));
    let version = read_u32(&mut cur).map_err(io)?;
    if version != CHECKPOINT_VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut cur).map_err(io)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = read_u32(&mut cur).map_err(io)? as usize;
        let mut name = vec![0u8; len];
        cur.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|_| fmt("non UTF-8 name".into()))?;
        let mut kind = [0u8; 1];
        cur.read_exact(&mut kind).map_err(io)?;
        let kind = ParamKind::from_code(kind[0])
            .ok_or_else(|| fmt(format!("unknown kind {} for {}", kind[0], name)))?;
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = read_u32(&mut cur).map_err(io)? as usize;
        }
        let mut data = vec![0f32; numel(&shape)];
        let mut b = [0u8; 4];
        for v in &mut data {
            cur.read_exact(&mut b).map_err(io)?;
            *v = f32::from_le_bytes(b);
        }
        if store.id(&name).is_some() {
            return Err(fmt(format!("duplicate entry {name}")));
        }
        store.add(name, kind, Tensor::new(shape, data)?);
    }
    if (cur.position() as usize) != bytes.len() {
        return Err(fmt("trailing bytes after last entry".into()));
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    fs::write(path, encode(store)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format { msg, .. } => Error::Format {
            path: path.to_path_buf(),
            msg,
        },
        other => other,
    })
}

/// Loads values from `path` into an existing store with the same layout.
pub fn load_into(store: &mut ParamStore, path: &Path) -> Result<()> {
    let src = load(path)?;
    if src.len() != store.len() {
        return Err(contract(format!(
            "checkpoint has {} entries, model has {}",
            src.len(),
            store.len()
        )));
    }
    store.load_values_from(&src)
}
