//! Netpbm writers: binary PBM (P4) for masks, binary PGM (P5) for images.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::synthdoc::ImageTensor;

/// P4 bitmap. `kept[i]` true renders white; PBM's 1 bit is black.
pub fn pbm_bytes(rows: usize, cols: usize, kept: &[bool]) -> Result<Vec<u8>> {
    if kept.len() != rows * cols {
        return Err(Error::Length {
            op: "pbm",
            expected: rows * cols,
            actual: kept.len(),
        });
    }
    let mut out = format!("P4\n{cols} {rows}\n").into_bytes();
    let stride = cols.div_ceil(8);
    for r in 0..rows {
        let mut line = vec![0u8; stride];
        for c in 0..cols {
            if !kept[r * cols + c] {
                line[c / 8] |= 0x80 >> (c % 8);
            }
        }
        out.extend_from_slice(&line);
    }
    Ok(out)
}

/// Parses a P4 file back into (rows, cols, kept).
pub fn parse_pbm(bytes: &[u8]) -> Result<(usize, usize, Vec<bool>)> {
    let bad = || Error::Config("malformed PBM".into());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 3 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?);
    }
    if fields[0] != "P4" {
        return Err(bad());
    }
    let cols: usize = fields[1].parse().map_err(|_| bad())?;
    let rows: usize = fields[2].parse().map_err(|_| bad())?;
    let data = &bytes[pos + 1..];
    let stride = cols.div_ceil(8);
    if data.len() != rows * stride {
        return Err(bad());
    }
    let kept = (0..rows * cols)
        .map(|i| {
            let (r, c) = (i / cols, i % cols);
            data[r * stride + c / 8] & (0x80 >> (c % 8)) == 0
        })
        .collect();
    Ok((rows, cols, kept))
}

/// P5 greymap of the first channel, values clamped to [0, 1].
pub fn pgm_bytes(img: &ImageTensor) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    for y in 0..img.height {
        for x in 0..img.width {
            out.push((img.at(y, x, 0).clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
    f.write_all(bytes).map_err(|e| Error::file(path, e))
}
