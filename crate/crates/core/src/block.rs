//! The `TCIR1` binary block: a small header followed by a row-major grid of
//! little-endian `f32`. Frame files, persisted model arrays and image stacks
//! all use it.
//!
//! ```text
//! offset  size          content
//! 0       6             b"TCIR1\0"
//! 6       4             width  (u32 LE)
//! 10      4             height (u32 LE)
//! 14      4*w*h         f32 LE, row 0 first; missing = quiet NaN
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"TCIR1\0";
pub const HEADER_LEN: usize = 14;

/// A decoded block. `values.len() == width * height`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

impl Block {
    pub fn from_f64(width: usize, height: usize, values: &[f64]) -> Self {
        assert_eq!(values.len(), width * height, "block size mismatch");
        Block {
            width,
            height,
            values: values.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.width..(i + 1) * self.width]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        for &v in &self.values {
            let v = if v.is_nan() { f32::NAN } else { v };
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Decode, naming `path` in any error.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..6] != MAGIC {
            return Err(Error::format(path, "bad magic, expected TCIR1"));
        }
        let width = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let height = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
        let need = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::format(path, "dimensions overflow"))?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() < need {
            return Err(Error::format(
                path,
                format!(
                    "truncated payload: {} bytes, expected {} for {}x{}",
                    payload.len(),
                    need,
                    width,
                    height
                ),
            ));
        }
        if payload.len() > need {
            return Err(Error::format(path, "trailing bytes after payload"));
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Block {
            width,
            height,
            values,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Block::decode(&bytes, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }
}

/// Write via a sibling temp file and rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}
