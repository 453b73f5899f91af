//! `SAGL` latent archives.
//!
//! Layout (little-endian): magic `SAGL`, version `u32 = 1`, `L`, `D`, category
//! count; per category the id (`u32` byte length + UTF-8), a role byte
//! (0 seen, 1 unseen), a code count and the codes as `f32`, layer-major. An
//! optional trailer holds a `u32` length and a UTF-8 JSON metadata document.

use std::collections::BTreeSet;
use std::path::Path;

use serde_json::Value;

use super::{read_file, write_atomic, Reader, Writer};
use crate::error::{invalid, Result};
use crate::latent::{CategoryLibrary, Latent, Role};

pub const MAGIC: &[u8; 4] = b"SAGL";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub library: CategoryLibrary,
    pub metadata: Option<Value>,
}

impl Archive {
    pub fn new(library: CategoryLibrary) -> Self {
        Self {
            library,
            metadata: None,
        }
    }

    pub fn with_metadata(library: CategoryLibrary, metadata: Value) -> Self {
        Self {
            library,
            metadata: Some(metadata),
        }
    }
}

pub fn encode_archive(archive: &Archive) -> Result<Vec<u8>> {
    let lib = &archive.library;
    if lib.is_empty() {
        return Err(invalid("cannot write an empty library"));
    }
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(VERSION as usize)?;
    w.u32(lib.layers())?;
    w.u32(lib.dims())?;
    w.u32(lib.len())?;
    for (id, cat) in lib.iter() {
        w.string(id)?;
        w.u8(match cat.role {
            Role::Seen => 0,
            Role::Unseen => 1,
        });
        w.u32(cat.codes.len())?;
        for c in &cat.codes {
            w.f32s(c.values());
        }
    }
    if let Some(meta) = &archive.metadata {
        let s = serde_json::to_string(meta).map_err(|e| invalid(format!("metadata: {e}")))?;
        w.string(&s)?;
    }
    Ok(w.buf)
}

pub fn decode_archive(bytes: &[u8]) -> Result<Archive> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let at = r.pos;
    let layers = r.usize()?;
    let dims = r.usize()?;
    let count = r.usize()?;
    if layers == 0 || dims == 0 {
        return Err(r.corrupt(at, "L and D must be positive"));
    }
    if count == 0 {
        return Err(r.corrupt(at + 8, "archive declares no categories"));
    }
    let per_code = layers
        .checked_mul(dims)
        .filter(|n| n.checked_mul(4).is_some())
        .ok_or_else(|| r.corrupt(at, "L x D overflows"))?;
    let mut lib = CategoryLibrary::new(layers, dims)?;
    let mut seen_ids = BTreeSet::new();
    for _ in 0..count {
        let id_at = r.pos;
        let id = r.string()?;
        if id.is_empty() {
            return Err(r.corrupt(id_at, "empty category id"));
        }
        if !seen_ids.insert(id.clone()) {
            return Err(r.corrupt(id_at, format!("duplicate category id {id:?}")));
        }
        let role_at = r.pos;
        let role = match r.u8()? {
            0 => Role::Seen,
            1 => Role::Unseen,
            b => return Err(r.corrupt(role_at, format!("role byte {b} is neither 0 nor 1"))),
        };
        let n_at = r.pos;
        let n = r.usize()?;
        if n == 0 {
            return Err(r.corrupt(n_at, format!("category {id:?} declares no codes")));
        }
        let total = n.checked_mul(per_code).ok_or_else(|| r.corrupt(n_at, "code count overflows"))?;
        let flat = r.f32s(total)?;
        let codes = flat
            .chunks_exact(per_code)
            .map(|c| Latent::new(layers, dims, c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        lib.insert(id, role, codes)?;
    }
    let metadata = if r.remaining() == 0 {
        None
    } else {
        let meta_at = r.pos;
        let s = r.string()?;
        let v: Value = serde_json::from_str(&s).map_err(|e| r.corrupt(meta_at, format!("metadata is not JSON: {e}")))?;
        Some(v)
    };
    r.finish()?;
    Ok(Archive { library: lib, metadata })
}

pub fn write_archive(path: &Path, archive: &Archive) -> Result<()> {
    write_atomic(path, &encode_archive(archive)?)
}

pub fn read_archive(path: &Path) -> Result<Archive> {
    decode_archive(&read_file(path)?)
}
