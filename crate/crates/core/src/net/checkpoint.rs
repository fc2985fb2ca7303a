//! Weight checkpoint files.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "DPNW"
//!      4     4  version (u32 LE, currently 1)
//!      8     4  latent_dim (u32 LE)
//!     12     4  stage count (u32 LE)
//!     16     4  output rows (u32 LE)
//!     20     4  output cols (u32 LE)
//!     24   8·n  weights, f64 LE
//! ```

use std::fs;
use std::path::Path;

use super::{NetArch, NetWeights};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DPNW";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

pub fn encode_checkpoint(arch: &NetArch, w: &NetWeights) -> Vec<u8> {
    let out = arch.output_shape();
    let mut bytes = Vec::with_capacity(HEADER_LEN + 8 * w.len());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    for v in [
        VERSION,
        arch.latent_dim as u32,
        arch.stages.len() as u32,
        out.rows as u32,
        out.cols as u32,
    ] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for v in &w.flat {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

fn parse_err<T>(offset: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Parse {
        offset,
        msg: msg.into(),
    })
}

fn read_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes"))
}

/// Decodes a checkpoint and checks it against `arch`.
pub fn decode_checkpoint(bytes: &[u8], arch: &NetArch) -> Result<NetWeights> {
    if bytes.len() < HEADER_LEN {
        return parse_err(bytes.len(), format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len()));
    }
    if &bytes[0..4] != CHECKPOINT_MAGIC {
        return parse_err(0, "bad magic, expected \"DPNW\"");
    }
    let version = read_u32(bytes, 4);
    if version != VERSION {
        return parse_err(4, format!("unsupported version {version}"));
    }
    let out = arch.output_shape();
    let expect = [
        (8, "latent_dim", arch.latent_dim),
        (12, "stage count", arch.stages.len()),
        (16, "output rows", out.rows),
        (20, "output cols", out.cols),
    ];
    for (offset, name, want) in expect {
        let got = read_u32(bytes, offset) as usize;
        if got != want {
            return parse_err(offset, format!("{name} is {got}, architecture expects {want}"));
        }
    }
    let n = arch.layout().total;
    let need = HEADER_LEN + 8 * n;
    if bytes.len() < need {
        let offset = HEADER_LEN + 8 * ((bytes.len() - HEADER_LEN) / 8);
        return parse_err(offset, format!("truncated payload: {} of {need} bytes", bytes.len()));
    }
    if bytes.len() > need {
        return parse_err(need, "trailing bytes after weight payload");
    }
    let flat: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if let Some(i) = flat.iter().position(|v| !v.is_finite()) {
        return parse_err(HEADER_LEN + 8 * i, "non-finite weight");
    }
    Ok(NetWeights { flat })
}

pub fn write_checkpoint(path: &Path, arch: &NetArch, w: &NetWeights) -> Result<()> {
    fs::write(path, encode_checkpoint(arch, w))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path, arch: &NetArch) -> Result<NetWeights> {
    decode_checkpoint(&fs::read(path)?, arch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Generator;

    #[test]
    fn round_trip_and_header() {
        let arch = NetArch::with_stages(2);
        let w = Generator::new(arch.clone()).unwrap().init(5, 1.0).unwrap();
        let bytes = encode_checkpoint(&arch, &w);
        assert_eq!(&bytes[..4], b"DPNW");
        assert_eq!(bytes.len(), 24 + 8 * w.len());
        assert_eq!(read_u32(&bytes, 16), 16);
        assert_eq!(decode_checkpoint(&bytes, &arch).unwrap(), w);
    }

    #[test]
    fn rejects_mismatch_and_truncation() {
        let arch = NetArch::with_stages(2);
        let w = Generator::new(arch.clone()).unwrap().init(5, 1.0).unwrap();
        let bytes = encode_checkpoint(&arch, &w);
        match decode_checkpoint(&bytes, &NetArch::with_stages(3)) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 12),
            other => panic!("unexpected {other:?}"),
        }
        match decode_checkpoint(&bytes[..bytes.len() - 5], &arch) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, bytes.len() - 8),
            other => panic!("unexpected {other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad, &arch), Err(Error::Parse { offset: 0, .. })));
    }
}
