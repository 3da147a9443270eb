//! Binary checkpoint files.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "SPOT"
//! 4       4     version (u32) = 1
//! 8       4     task name length N (u32)
//! 12      N     task name (UTF-8)
//! 12+N    4     run seed (u32)
//! 16+N    8     step (u64)
//! 24+N    4     L (u32)
//! 28+N    4     E (u32)
//! 32+N    1     dtype (u8), 0 = f32
//! 33+N    4·L·E payload, row-major
//! ```
//!
//! Values are narrowed to `f32` on write and widened on read.

use std::fs::OpenOptions;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::prompt::{Matrix, Prompt, PromptError};
use crate::scalar::Scalar;

pub const MAGIC: [u8; 4] = *b"SPOT";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{0} already exists (overwrite not requested)")]
    PathExists(PathBuf),
    #[error("bad magic {found:?} at byte offset {offset}")]
    BadMagic { offset: usize, found: [u8; 4] },
    #[error("unsupported version {version} at byte offset {offset}")]
    UnsupportedVersion { offset: usize, version: u32 },
    #[error("unsupported dtype {dtype} at byte offset {offset}")]
    UnsupportedDtype { offset: usize, dtype: u8 },
    #[error("truncated header: {field} needs {needed} bytes at byte offset {offset}, file has {available}")]
    TruncatedHeader {
        field: &'static str,
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("truncated payload at byte offset {offset}: expected {expected} bytes, found {found}")]
    TruncatedPayload {
        offset: usize,
        expected: usize,
        found: usize,
    },
    #[error("{extra} trailing bytes after payload at byte offset {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("task name at byte offset {offset} is not valid UTF-8")]
    InvalidTaskName { offset: usize },
    #[error("invalid matrix at byte offset {offset}: {source}")]
    InvalidMatrix {
        offset: usize,
        #[source]
        source: PromptError,
    },
    #[error("value at row {row}, column {col} does not fit in f32")]
    NotRepresentable { row: usize, col: usize },
    #[error("{field} = {value} does not fit in the on-disk u32 field")]
    FieldOverflow { field: &'static str, value: usize },
}

impl CheckpointError {
    fn io(path: &Path, source: io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Serializes a prompt into the checkpoint byte layout.
pub fn encode<T: Scalar>(p: &Prompt<T>) -> Result<Vec<u8>, CheckpointError> {
    let (l, e) = p.shape();
    let l32 = u32::try_from(l).map_err(|_| CheckpointError::FieldOverflow { field: "L", value: l })?;
    let e32 = u32::try_from(e).map_err(|_| CheckpointError::FieldOverflow { field: "E", value: e })?;
    let name = p.task_name.as_bytes();
    let name_len = u32::try_from(name.len()).map_err(|_| CheckpointError::FieldOverflow {
        field: "task name length",
        value: name.len(),
    })?;

    let mut out = Vec::with_capacity(33 + name.len() + 4 * l * e);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&name_len.to_le_bytes());
    out.extend_from_slice(name);
    out.extend_from_slice(&p.run_seed.to_le_bytes());
    out.extend_from_slice(&p.step.to_le_bytes());
    out.extend_from_slice(&l32.to_le_bytes());
    out.extend_from_slice(&e32.to_le_bytes());
    out.push(DTYPE_F32);
    for (i, v) in p.tokens.as_slice().iter().enumerate() {
        let narrowed = v.to_f32().filter(|x| x.is_finite()).ok_or(
            CheckpointError::NotRepresentable {
                row: i / e,
                col: i % e,
            },
        )?;
        out.extend_from_slice(&narrowed.to_le_bytes());
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8], CheckpointError> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(CheckpointError::TruncatedHeader {
                field,
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32, CheckpointError> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, field: &'static str) -> Result<u64, CheckpointError> {
        let b = self.take(8, field)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// Parses checkpoint bytes, validating every header field.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Prompt<T>, CheckpointError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = cur.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic {
            offset: 0,
            found: magic,
        });
    }
    let version_offset = cur.pos;
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion {
            offset: version_offset,
            version,
        });
    }
    let name_len = cur.u32("task name length")? as usize;
    let name_offset = cur.pos;
    let name = std::str::from_utf8(cur.take(name_len, "task name")?)
        .map_err(|_| CheckpointError::InvalidTaskName {
            offset: name_offset,
        })?
        .to_owned();
    let run_seed = cur.u32("run seed")?;
    let step = cur.u64("step")?;
    let l = cur.u32("L")? as usize;
    let e = cur.u32("E")? as usize;
    let dtype_offset = cur.pos;
    let dtype = cur.take(1, "dtype")?[0];
    if dtype != DTYPE_F32 {
        return Err(CheckpointError::UnsupportedDtype {
            offset: dtype_offset,
            dtype,
        });
    }
    let payload_offset = cur.pos;
    if l == 0 || e == 0 {
        return Err(CheckpointError::InvalidMatrix {
            offset: payload_offset - 9,
            source: PromptError::InvalidShape { rows: l, cols: e },
        });
    }
    let expected = l
        .checked_mul(e)
        .and_then(|n| n.checked_mul(4))
        .unwrap_or(usize::MAX);
    let rest = &bytes[payload_offset..];
    if rest.len() < expected {
        return Err(CheckpointError::TruncatedPayload {
            offset: payload_offset,
            expected,
            found: rest.len(),
        });
    }
    if rest.len() > expected {
        return Err(CheckpointError::TrailingBytes {
            offset: payload_offset + expected,
            extra: rest.len() - expected,
        });
    }
    let data: Vec<T> = rest
        .chunks_exact(4)
        .map(|c| {
            let v = f32::from_le_bytes(c.try_into().expect("4 bytes"));
            T::from(v).unwrap_or_else(T::nan)
        })
        .collect();
    let tokens = Matrix::from_vec(l, e, data).map_err(|source| CheckpointError::InvalidMatrix {
        offset: payload_offset,
        source,
    })?;
    Ok(Prompt::new(tokens, name, run_seed, step))
}

/// Writes `p` to `path`. Fails with [`CheckpointError::PathExists`] if the
/// file exists and `overwrite` is false. Nothing is created on error.
pub fn write_checkpoint<T: Scalar>(
    p: &Prompt<T>,
    path: &Path,
    overwrite: bool,
) -> Result<(), CheckpointError> {
    let bytes = encode(p)?;
    let mut opts = OpenOptions::new();
    opts.write(true);
    if overwrite {
        opts.create(true).truncate(true);
    } else {
        opts.create_new(true);
    }
    let mut file = opts.open(path).map_err(|e| {
        if e.kind() == io::ErrorKind::AlreadyExists {
            CheckpointError::PathExists(path.to_path_buf())
        } else {
            CheckpointError::io(path, e)
        }
    })?;
    file.write_all(&bytes)
        .and_then(|()| file.flush())
        .map_err(|e| CheckpointError::io(path, e))
}

pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<Prompt<T>, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|e| CheckpointError::io(path, e))?;
    decode(&bytes)
}
