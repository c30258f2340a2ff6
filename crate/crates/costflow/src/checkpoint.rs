//! Parameter checkpoints.
//!
//! Layout (all integers little-endian u32 unless noted):
//!   magic b"CFCK" | version | config-echo length + UTF-8 bytes |
//!   entry count | per entry: name length + UTF-8, u8 rank, dims,
//!   u8 dtype tag (0 = f32, 1 = f64) | payloads in manifest order,
//!   little-endian f32 per value.
//!
//! Storing 32-bit payloads keeps files portable and small; parameters are
//! trained in 32-bit numeric mode, so save/load round-trips are bitwise.

use crate::params::ParamStore;
use crate::tensor::{DType, Tensor};
use std::fs;
use std::path::Path;
use thiserror::Error;

pub const CKPT_MAGIC: &[u8; 4] = b"CFCK";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason} at byte {offset}")]
    Format {
        path: String,
        reason: String,
        offset: usize,
    },
    #[error("parameter {name}: checkpoint shape {file:?} != model shape {model:?}")]
    ShapeMismatch {
        name: String,
        file: Vec<usize>,
        model: Vec<usize>,
    },
    #[error("strict load failed: {missing} model parameters missing from file, {extra} file entries unmatched ({detail})")]
    StrictMismatch {
        missing: usize,
        extra: usize,
        detail: String,
    },
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub data: Vec<f64>,
}

#[derive(Debug)]
pub struct CheckpointFile {
    pub version: u32,
    pub config_echo: String,
    pub entries: Vec<Entry>,
}

/// What a (partial) load did: which parameters were applied, which file
/// entries had no slot, and which slots had no file entry.
pub struct LoadReport {
    pub loaded: Vec<String>,
    pub unmatched_in_file: Vec<String>,
    pub unmatched_in_store: Vec<String>,
}

fn dtype_tag(d: DType) -> u8 {
    match d {
        DType::F32 => 0,
        DType::F64 => 1,
    }
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, config_echo: &str) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(config_echo.len() as u32).to_le_bytes());
    buf.extend_from_slice(config_echo.as_bytes());
    let slots: Vec<_> = store.iter().collect();
    buf.extend_from_slice(&(slots.len() as u32).to_le_bytes());
    for (_, slot) in &slots {
        buf.extend_from_slice(&(slot.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(slot.name.as_bytes());
        buf.push(slot.value.shape().len() as u8);
        for &d in slot.value.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.push(dtype_tag(slot.value.dtype()));
    }
    for (_, slot) in &slots {
        for &v in slot.value.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, &buf).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() < self.pos + n {
            return Err(CheckpointError::Format {
                path: self.path.to_string(),
                reason: format!(
                    "truncated reading {what}: need {n} bytes, have {}",
                    self.bytes.len() - self.pos
                ),
                offset: self.pos,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let at = self.pos;
        String::from_utf8(self.take(len, what)?.to_vec()).map_err(|_| CheckpointError::Format {
            path: self.path.to_string(),
            reason: format!("{what} is not valid UTF-8"),
            offset: at,
        })
    }
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointFile> {
    let pstr = path.display().to_string();
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: pstr.clone(),
        source,
    })?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path: &pstr,
    };
    let magic = r.take(4, "magic")?;
    if magic != CKPT_MAGIC {
        return Err(CheckpointError::Format {
            path: pstr.clone(),
            reason: format!("bad magic {magic:?} (expected {CKPT_MAGIC:?})"),
            offset: 0,
        });
    }
    let version = r.u32("version")?;
    if version != CKPT_VERSION {
        return Err(CheckpointError::Format {
            path: pstr.clone(),
            reason: format!("unsupported version {version}"),
            offset: 4,
        });
    }
    let config_echo = r.string("config echo")?;
    let count = r.u32("entry count")? as usize;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string("entry name")?;
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dim")? as usize);
        }
        let dtype = match r.u8("dtype")? {
            0 => DType::F32,
            1 => DType::F64,
            t => {
                return Err(CheckpointError::Format {
                    path: pstr.clone(),
                    reason: format!("unknown dtype tag {t}"),
                    offset: r.pos - 1,
                })
            }
        };
        manifest.push((name, shape, dtype));
    }
    let mut entries = Vec::with_capacity(count);
    for (name, shape, dtype) in manifest {
        let numel: usize = shape.iter().product();
        let raw = r.take(4 * numel, "payload")?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        entries.push(Entry {
            name,
            shape,
            dtype,
            data,
        });
    }
    Ok(CheckpointFile {
        version,
        config_echo,
        entries,
    })
}

impl CheckpointFile {
    /// Writes matching entries into `store`. With `strict`, any unmatched
    /// name on either side is an error; otherwise they are reported.
    pub fn apply(&self, store: &mut ParamStore, strict: bool) -> Result<LoadReport> {
        let mut loaded = Vec::new();
        let mut unmatched_in_file = Vec::new();
        for e in &self.entries {
            match store.find(&e.name) {
                Some(id) => {
                    let model_shape = store.get(id).shape().to_vec();
                    if model_shape != e.shape {
                        return Err(CheckpointError::ShapeMismatch {
                            name: e.name.clone(),
                            file: e.shape.clone(),
                            model: model_shape,
                        });
                    }
                    let t = Tensor::new(e.data.clone(), &e.shape, store.dtype())
                        .expect("shape checked above");
                    store.set_value(id, t).expect("shape checked above");
                    loaded.push(e.name.clone());
                }
                None => unmatched_in_file.push(e.name.clone()),
            }
        }
        let unmatched_in_store: Vec<String> = store
            .iter()
            .map(|(_, s)| s.name.clone())
            .filter(|n| !loaded.contains(n))
            .collect();
        if strict && (!unmatched_in_file.is_empty() || !unmatched_in_store.is_empty()) {
            let detail = format!(
                "missing: [{}], extra: [{}]",
                unmatched_in_store.join(", "),
                unmatched_in_file.join(", ")
            );
            return Err(CheckpointError::StrictMismatch {
                missing: unmatched_in_store.len(),
                extra: unmatched_in_file.len(),
                detail,
            });
        }
        Ok(LoadReport {
            loaded,
            unmatched_in_file,
            unmatched_in_store,
        })
    }
}
