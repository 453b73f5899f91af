//! 8-bit binary PGM (`P5`) and PPM (`P6`) images.

use std::path::Path;

use super::{read_file, write_atomic};
use crate::error::{Error, Result};
use crate::fusion::ImageGrid;

/// Encodes a 1- or 3-channel grid with values in `[0, 1]` (clamped).
pub fn encode_pnm(img: &ImageGrid) -> Result<Vec<u8>> {
    let magic = match img.channels() {
        1 => "P5",
        3 => "P6",
        c => return Err(crate::error::invalid(format!("PNM supports 1 or 3 channels, got {c}"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

fn corrupt(offset: usize, reason: impl Into<String>) -> Error {
    Error::CorruptHeader {
        offset,
        reason: reason.into(),
    }
}

pub fn decode_pnm(bytes: &[u8]) -> Result<ImageGrid> {
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::TruncatedPayload {
                offset: pos,
                needed: 1,
                available: 0,
            });
        }
        fields.push((start, std::str::from_utf8(&bytes[start..pos]).unwrap_or("")));
    }
    let channels = match fields[0].1 {
        "P5" => 1,
        "P6" => 3,
        m => return Err(corrupt(0, format!("unsupported magic {m:?}, expected P5 or P6"))),
    };
    let num = |i: usize| -> Result<usize> {
        let (at, s) = fields[i];
        s.parse::<usize>().map_err(|_| corrupt(at, format!("bad header number {s:?}")))
    };
    let (w, h, max) = (num(1)?, num(2)?, num(3)?);
    if max != 255 {
        return Err(corrupt(fields[3].0, format!("maxval {max} unsupported, expected 255")));
    }
    if w == 0 || h == 0 {
        return Err(corrupt(fields[1].0, "zero image size"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = w
        .checked_mul(h)
        .and_then(|x| x.checked_mul(channels))
        .ok_or_else(|| corrupt(fields[1].0, "image size overflows"))?;
    let available = bytes.len().saturating_sub(pos);
    if available < n {
        return Err(Error::TruncatedPayload {
            offset: pos.min(bytes.len()),
            needed: n,
            available,
        });
    }
    if available > n {
        return Err(corrupt(pos + n, format!("{} trailing bytes", available - n)));
    }
    let data = bytes[pos..].iter().map(|&b| b as f64 / 255.0).collect();
    ImageGrid::new(h, w, channels, data)
}

pub fn write_pnm(path: &Path, img: &ImageGrid) -> Result<()> {
    write_atomic(path, &encode_pnm(img)?)
}

pub fn read_pnm(path: &Path) -> Result<ImageGrid> {
    decode_pnm(&read_file(path)?)
}
