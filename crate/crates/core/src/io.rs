//! Portable grid files and small text helpers.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "PGRD"
//!      4     2  version (u16, = 1)
//!      6     4  rows (u32)
//!     10     4  cols (u32)
//!     14     2  padding (zero)
//!     16  8·n   row-major f64 payload, little endian
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::Grid;

pub const GRID_MAGIC: &[u8; 4] = b"PGRD";
pub const GRID_VERSION: u16 = 1;
pub const GRID_HEADER_LEN: usize = 16;

fn parse_err<T>(offset: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Parse {
        offset,
        msg: msg.into(),
    })
}

pub fn encode_grid(grid: &Grid) -> Vec<u8> {
    let mut out = Vec::with_capacity(GRID_HEADER_LEN + 8 * grid.len());
    out.extend_from_slice(GRID_MAGIC);
    out.extend_from_slice(&GRID_VERSION.to_le_bytes());
    out.extend_from_slice(&(grid.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(grid.cols() as u32).to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    for v in grid.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_grid(bytes: &[u8]) -> Result<Grid> {
    if bytes.len() < GRID_HEADER_LEN {
        return parse_err(bytes.len(), format!("header needs {GRID_HEADER_LEN} bytes, file has {}", bytes.len()));
    }
    if &bytes[0..4] != GRID_MAGIC {
        return parse_err(0, "bad magic, expected PGRD");
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != GRID_VERSION {
        return parse_err(4, format!("unsupported version {version}"));
    }
    let rows = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Parse {
            offset: 6,
            msg: "grid dimensions overflow".into(),
        })?;
    let want = GRID_HEADER_LEN + 8 * n;
    if bytes.len() < want {
        let offset = GRID_HEADER_LEN + (bytes.len() - GRID_HEADER_LEN) / 8 * 8;
        return parse_err(offset, format!("payload truncated: {rows}x{cols} grid needs {want} bytes, file has {}", bytes.len()));
    }
    if bytes.len() > want {
        return parse_err(want, "trailing bytes after payload");
    }
    let data = bytes[GRID_HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Grid::from_vec(rows, cols, data).map_err(|e| Error::Parse {
        offset: 6,
        msg: e.to_string(),
    })
}

pub fn write_portable_grid(grid: &Grid, path: &Path) -> Result<()> {
    fs::write(path, encode_grid(grid))?;
    Ok(())
}

pub fn read_portable_grid(path: &Path) -> Result<Grid> {
    decode_grid(&fs::read(path)?)
}

/// CSV with a header line and one line per row. Floats use the shortest
/// round-trip representation.
pub fn csv_table(header: &str, rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}
