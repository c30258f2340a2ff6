//! Middlebury .flo flow-field interchange.
//!
//! Layout: the magic float 202021.25 (bytes "PIEH"), little-endian i32 width
//! and height, then row-major interleaved (u, v) little-endian f32 pairs.

use crate::tensor::{DType, Tensor};
use std::fs;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

pub const FLO_MAGIC: f32 = 202021.25;

#[derive(Debug, Error)]
pub enum FloError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic {found} at byte 0 (expected {FLO_MAGIC})")]
    BadMagic { path: String, found: f32 },
    #[error("{path}: non-positive dimensions {w}x{h} at byte 4")]
    BadDims { path: String, w: i32, h: i32 },
    #[error("{path}: truncated at byte {offset}: need {needed} bytes, have {have}")]
    Truncated {
        path: String,
        offset: usize,
        needed: usize,
        have: usize,
    },
    #[error("flow tensor must be [2, H, W], got {0:?}")]
    NotAFlow(Vec<usize>),
}

type Result<T> = std::result::Result<T, FloError>;

/// Serializes a `[2, H, W]` flow field (u plane then v plane) to `path`.
/// Values are written as 32-bit floats.
pub fn write_flo(path: &Path, flow: &Tensor) -> Result<()> {
    let s = flow.shape();
    if s.len() != 3 || s[0] != 2 {
        return Err(FloError::NotAFlow(s.to_vec()));
    }
    let (h, w) = (s[1], s[2]);
    let n = h * w;
    let d = flow.data();
    let mut buf = Vec::with_capacity(12 + 8 * n);
    buf.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    buf.extend_from_slice(&(w as i32).to_le_bytes());
    buf.extend_from_slice(&(h as i32).to_le_bytes());
    for i in 0..n {
        buf.extend_from_slice(&(d[i] as f32).to_le_bytes());
        buf.extend_from_slice(&(d[n + i] as f32).to_le_bytes());
    }
    let io = |source| FloError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&buf).map_err(io)
}

/// Reads a .flo file into a `[2, H, W]` tensor (f32-exact values).
pub fn read_flo(path: &Path) -> Result<Tensor> {
    let pstr = path.display().to_string();
    let bytes = fs::read(path).map_err(|source| FloError::Io {
        path: pstr.clone(),
        source,
    })?;
    let need = |offset: usize, needed: usize| -> Result<()> {
        if bytes.len() < offset + needed {
            Err(FloError::Truncated {
                path: pstr.clone(),
                offset,
                needed,
                have: bytes.len().saturating_sub(offset),
            })
        } else {
            Ok(())
        }
    };
    need(0, 12)?;
    let magic = f32::from_le_bytes(bytes[0..4].try_into().unwrap());
    if magic != FLO_MAGIC {
        return Err(FloError::BadMagic {
            path: pstr,
            found: magic,
        });
    }
    let w = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let h = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if w <= 0 || h <= 0 {
        return Err(FloError::BadDims { path: pstr, w, h });
    }
    let (w, h) = (w as usize, h as usize);
    let n = w * h;
    need(12, 8 * n)?;
    let mut data = vec![0.0f64; 2 * n];
    for i in 0..n {
        let at = 12 + 8 * i;
        let u = f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let v = f32::from_le_bytes(bytes[at + 4..at + 8].try_into().unwrap());
        data[i] = u as f64;
        data[n + i] = v as f64;
    }
    Tensor::new(data, &[2, h, w], DType::F32).map_err(|e| FloError::Io {
        path: String::new(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_by_one_flow_is_28_bytes_with_pieh_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.flo");
        // Width 2, height 1, pixels (1,2) and (3,4).
        let flow = Tensor::new(vec![1.0, 3.0, 2.0, 4.0], &[2, 1, 2], DType::F32).unwrap();
        write_flo(&p, &flow).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 28);
        assert_eq!(&bytes[0..4], b"PIEH");
        assert_eq!(i32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        assert_eq!(i32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        let px: Vec<f32> = bytes[12..]
            .chunks(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(px, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rt.flo");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let flow = Tensor::from_fn(&[2, 7, 5], DType::F32, |_| rng.gen_range(-40.0..40.0));
        write_flo(&p, &flow).unwrap();
        let back = read_flo(&p).unwrap();
        assert_eq!(back.shape(), flow.shape());
        for (a, b) in flow.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.flo");
        let mut buf = 0.0f32.to_le_bytes().to_vec();
        buf.extend_from_slice(&1i32.to_le_bytes());
        buf.extend_from_slice(&1i32.to_le_bytes());
        buf.extend_from_slice(&[0; 8]);
        std::fs::write(&p, &buf).unwrap();
        assert!(matches!(read_flo(&p), Err(FloError::BadMagic { found, .. }) if found == 0.0));
    }

    #[test]
    fn truncation_reports_byte_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("trunc.flo");
        let mut buf = FLO_MAGIC.to_le_bytes().to_vec();
        buf.extend_from_slice(&3i32.to_le_bytes());
        buf.extend_from_slice(&2i32.to_le_bytes());
        buf.extend_from_slice(&[0; 10]); // needs 48 payload bytes
        std::fs::write(&p, &buf).unwrap();
        match read_flo(&p) {
            Err(FloError::Truncated {
                offset,
                needed,
                have,
                ..
            }) => {
                assert_eq!(offset, 12);
                assert_eq!(needed, 48);
                assert_eq!(have, 10);
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
        let short = FLO_MAGIC.to_le_bytes().to_vec();
        std::fs::write(&p, &short).unwrap();
        assert!(matches!(
            read_flo(&p),
            Err(FloError::Truncated { offset: 0, .. })
        ));
    }

    #[test]
    fn non_flow_shapes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::zeros(&[3, 2, 2], DType::F32);
        assert!(matches!(
            write_flo(&dir.path().join("x.flo"), &t),
            Err(FloError::NotAFlow(_))
        ));
    }
}
