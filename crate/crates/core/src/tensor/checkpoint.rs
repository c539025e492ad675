//! Flat binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "BCTM" | version: u32 | meta_len: u32 | meta: UTF-8 JSON | count: u32
//! count x { name_len: u32 | name: UTF-8 | rank: u32 | dims: u64 x rank | payload: f32 x prod(dims) }
//! ```

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"BCTM";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on checkpoint: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint has no parameter named {0:?}")]
    Missing(String),
}

/// Named `f32` parameters plus a free-form JSON metadata block.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub params: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new(metadata: serde_json::Value) -> Self {
        Self {
            metadata,
            params: Vec::new(),
        }
    }

    pub fn push<R: Real>(&mut self, name: impl Into<String>, t: &Tensor<R>) {
        self.params.push((name.into(), t.cast()));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>, CheckpointError> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let meta = serde_json::to_vec(&self.metadata).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, t) in &self.params {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut payload = Vec::with_capacity(4 * t.len());
            for &x in t.data() {
                payload.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&payload)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let meta_len = read_u32(&mut r)? as usize;
        let meta = read_bytes(&mut r, meta_len)?;
        let metadata = serde_json::from_slice(&meta).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let count = read_u32(&mut r)?;
        let mut params = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let name = String::from_utf8(read_bytes(&mut r, name_len)?)
                .map_err(|_| CheckpointError::Corrupt("parameter name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                dims.push(usize::try_from(u64::from_le_bytes(b)).map_err(|_| CheckpointError::Corrupt("dimension overflow".into()))?);
            }
            let n: usize = dims.iter().product();
            let raw = read_bytes(&mut r, 4 * n)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(&dims, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            params.push((name, t));
        }
        Ok(Self { metadata, params })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>, CheckpointError> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(CheckpointError::Corrupt(format!("truncated: wanted {n} bytes, got {}", buf.len())));
    }
    Ok(buf)
}
