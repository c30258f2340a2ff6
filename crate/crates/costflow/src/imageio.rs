//! Binary netpbm image I/O: P6 (RGB) for image pairs, P5 (gray) for mask
//! dumps. Pixel values map to [0, 1] in memory and u8 on disk.

use crate::tensor::{DType, Tensor};
use std::fs;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: String, reason: String },
    #[error("image tensor must be {want}, got {got:?}")]
    BadShape { want: &'static str, got: Vec<usize> },
}

type Result<T> = std::result::Result<T, ImageError>;

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Writes a `[3, H, W]` tensor with values in [0, 1] as binary PPM.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(ImageError::BadShape {
            want: "[3, H, W]",
            got: s.to_vec(),
        });
    }
    let (h, w) = (s[1], s[2]);
    let n = h * w;
    let d = image.data();
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    buf.reserve(3 * n);
    for i in 0..n {
        for c in 0..3 {
            buf.push(quantize(d[c * n + i]));
        }
    }
    fs::write(path, &buf).map_err(|source| ImageError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Writes a `[H, W]` (or `[1, H, W]`) tensor with values in [0, 1] as binary PGM.
pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    let (h, w) = match s {
        [h, w] => (*h, *w),
        [1, h, w] => (*h, *w),
        _ => {
            return Err(ImageError::BadShape {
                want: "[H, W] or [1, H, W]",
                got: s.to_vec(),
            })
        }
    };
    let mut buf = format!("P5\n{w} {h}\n255\n").into_bytes();
    buf.extend(image.data().iter().map(|&v| quantize(v)));
    fs::write(path, &buf).map_err(|source| ImageError::Io {
        path: path.display().to_string(),
        source,
    })
}

struct HeaderScanner<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> HeaderScanner<'a> {
    /// Next whitespace-delimited token, skipping `#` comments to end of line.
    fn token(&mut self) -> Result<&'a [u8]> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(ImageError::Format {
                path: self.path.to_string(),
                reason: format!("unexpected end of header at byte {start}"),
            });
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Result<usize> {
        let tok = self.token()?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| ImageError::Format {
                path: self.path.to_string(),
                reason: format!("bad header number {:?}", String::from_utf8_lossy(tok)),
            })
    }
}

fn read_netpbm(path: &Path, magic: &[u8], channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let pstr = path.display().to_string();
    let bytes = fs::read(path).map_err(|source| ImageError::Io {
        path: pstr.clone(),
        source,
    })?;
    let mut sc = HeaderScanner {
        bytes: &bytes,
        pos: 0,
        path: &pstr,
    };
    let fmt_err = |reason: String| ImageError::Format {
        path: pstr.clone(),
        reason,
    };
    let found = sc.token()?;
    if found != magic {
        return Err(fmt_err(format!(
            "magic {:?}, expected {:?}",
            String::from_utf8_lossy(found),
            String::from_utf8_lossy(magic)
        )));
    }
    let w = sc.number()?;
    let h = sc.number()?;
    let maxval = sc.number()?;
    if maxval != 255 {
        return Err(fmt_err(format!("unsupported maxval {maxval} (only 255)")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = sc.pos + 1;
    let need = w * h * channels;
    if bytes.len() < start + need {
        return Err(fmt_err(format!(
            "raster truncated at byte {}: need {need} bytes, have {}",
            start,
            bytes.len().saturating_sub(start)
        )));
    }
    Ok((h, w, bytes[start..start + need].to_vec()))
}

/// Reads a binary PPM into a `[3, H, W]` tensor with values in [0, 1].
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let (h, w, raster) = read_netpbm(path, b"P6", 3)?;
    let n = h * w;
    let mut data = vec![0.0f64; 3 * n];
    for i in 0..n {
        for c in 0..3 {
            data[c * n + i] = raster[3 * i + c] as f64 / 255.0;
        }
    }
    Ok(Tensor::new(data, &[3, h, w], DType::F64).expect("sized above"))
}

/// Reads a binary PGM into a `[H, W]` tensor with values in [0, 1].
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let (h, w, raster) = read_netpbm(path, b"P5", 1)?;
    let data: Vec<f64> = raster.iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Tensor::new(data, &[h, w], DType::F64).expect("sized above"))
}
