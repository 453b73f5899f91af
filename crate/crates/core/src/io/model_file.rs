//! `SAGM` model files.
//!
//! Layout (little-endian): magic `SAGM`, version `u32 = 1`, `L`, `D`, `l`, `G`;
//! `G` layer ranges as `(start, end)` pairs; `A` as `L` blocks of `D × l` `f32`;
//! the encoder as a layer count, the negative slope and per layer
//! `(out, in)`, weights and bias; `B` as `S`, the ids and `L` blocks of
//! `D × S`; the training config as JSON; the loss log as a count followed by
//! `(rec, orth, sparse, total)` rows.

use std::path::Path;

use super::{read_file, write_atomic, Reader, Writer};
use crate::error::{invalid, Result};
use crate::factorization::{
    Affine, EncoderParams, FactorizationModel, GroupPartition, IrrelevantDictionary, LossRecord, TrainConfig,
};
use crate::latent::RelevantDictionary;
use crate::linalg::Matrix;

pub const MAGIC: &[u8; 4] = b"SAGM";
pub const VERSION: u32 = 1;

pub fn encode_model(m: &FactorizationModel) -> Result<Vec<u8>> {
    m.validate()?;
    let a = &m.dictionary;
    let p = a.partition();
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(VERSION as usize)?;
    w.u32(a.num_layers())?;
    w.u32(a.dims())?;
    w.u32(a.atoms())?;
    w.u32(p.num_groups())?;
    for &(s, e) in p.ranges() {
        w.u32(s)?;
        w.u32(e)?;
    }
    for l in a.layer_matrices() {
        w.f32s(l.data());
    }
    w.u32(m.encoder.layers.len())?;
    w.f32s(&[m.encoder.negative_slope]);
    for layer in &m.encoder.layers {
        w.u32(layer.weights.rows())?;
        w.u32(layer.weights.cols())?;
        w.f32s(layer.weights.data());
        w.f32s(&layer.bias);
    }
    let b = &m.relevant;
    w.u32(b.num_categories())?;
    for id in b.ids() {
        w.string(id)?;
    }
    for l in b.layer_matrices() {
        w.f32s(l.data());
    }
    let cfg = serde_json::to_string(&m.config).map_err(|e| invalid(format!("config echo: {e}")))?;
    w.string(&cfg)?;
    w.u32(m.log.len())?;
    for r in &m.log {
        w.f32s(&[r.rec, r.orth, r.sparse, r.total]);
    }
    Ok(w.buf)
}

pub fn decode_model(bytes: &[u8]) -> Result<FactorizationModel> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let at = r.pos;
    let layers = r.usize()?;
    let dims = r.usize()?;
    let atoms = r.usize()?;
    let groups = r.usize()?;
    if layers == 0 || dims == 0 || atoms == 0 || groups == 0 || groups > layers {
        return Err(r.corrupt(at, format!("inconsistent dims L={layers} D={dims} l={atoms} G={groups}")));
    }
    let block = dims
        .checked_mul(atoms)
        .ok_or_else(|| r.corrupt(at, "D x l overflows"))?;
    let part_at = r.pos;
    let mut ranges = Vec::new();
    for _ in 0..groups {
        ranges.push((r.usize()?, r.usize()?));
    }
    let partition = GroupPartition::new(ranges, layers).map_err(|e| r.corrupt(part_at, e.to_string()))?;
    let mut mats = Vec::new();
    for _ in 0..layers {
        mats.push(Matrix::new(dims, atoms, r.f32s(block)?)?);
    }
    let dictionary = IrrelevantDictionary::new(mats, partition).map_err(|e| r.corrupt(at, e.to_string()))?;

    let enc_at = r.pos;
    let n_layers = r.usize()?;
    if n_layers == 0 {
        return Err(r.corrupt(enc_at, "encoder has no layers"));
    }
    let slope = r.f32s(1)?[0];
    let mut aff = Vec::new();
    let mut prev = layers * dims;
    for j in 0..n_layers {
        let shape_at = r.pos;
        let out = r.usize()?;
        let inp = r.usize()?;
        if inp != prev || out == 0 {
            return Err(r.corrupt(shape_at, format!("encoder layer {j} has shape {out}x{inp}, input must be {prev}")));
        }
        let n = out.checked_mul(inp).ok_or_else(|| r.corrupt(shape_at, "layer size overflows"))?;
        let weights = Matrix::new(out, inp, r.f32s(n)?)?;
        let bias = r.f32s(out)?;
        aff.push(Affine { weights, bias });
        prev = out;
    }
    if prev != groups * atoms {
        return Err(r.corrupt(enc_at, format!("encoder output {prev} does not match G x l = {}", groups * atoms)));
    }
    let encoder = EncoderParams::new(aff, slope, groups, atoms).map_err(|e| r.corrupt(enc_at, e.to_string()))?;

    let b_at = r.pos;
    let s = r.usize()?;
    if s < 2 {
        return Err(r.corrupt(b_at, "relevant dictionary needs at least 2 categories"));
    }
    let mut ids = Vec::new();
    for _ in 0..s {
        ids.push(r.string()?);
    }
    let bblock = dims.checked_mul(s).ok_or_else(|| r.corrupt(b_at, "D x S overflows"))?;
    let mut bl = Vec::new();
    for _ in 0..layers {
        bl.push(Matrix::new(dims, s, r.f32s(bblock)?)?);
    }
    let relevant = RelevantDictionary::from_layers(ids, bl).map_err(|e| r.corrupt(b_at, e.to_string()))?;

    let cfg_at = r.pos;
    let text = r.string()?;
    let config: TrainConfig =
        serde_json::from_str(&text).map_err(|e| r.corrupt(cfg_at, format!("config echo: {e}")))?;
    let log_at = r.pos;
    let n = r.usize()?;
    let vals = r.f32s(n.checked_mul(4).ok_or_else(|| r.corrupt(log_at, "log length overflows"))?)?;
    let log = vals
        .chunks_exact(4)
        .map(|c| LossRecord {
            rec: c[0],
            orth: c[1],
            sparse: c[2],
            total: c[3],
        })
        .collect();
    r.finish()?;
    let model = FactorizationModel {
        dictionary,
        encoder,
        relevant,
        log,
        config,
    };
    model.validate().map_err(|e| r.corrupt(at, e.to_string()))?;
    Ok(model)
}

pub fn write_model(path: &Path, m: &FactorizationModel) -> Result<()> {
    write_atomic(path, &encode_model(m)?)
}

pub fn read_model(path: &Path) -> Result<FactorizationModel> {
    decode_model(&read_file(path)?)
}
