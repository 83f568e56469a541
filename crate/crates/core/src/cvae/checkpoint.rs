//! Checkpoint container.
//!
//! ```text
//! magic    8 bytes  "MCTLCKPT"
//! version  u32 LE
//! hlen     u64 LE   length of the JSON header
//! header   hlen bytes UTF-8 JSON {config, stats, tensors: [{name, rows, cols}]}
//! data     f64 LE, each tensor row-major, in header order
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Cvae, ModelConfig};
use crate::error::{Error, Result};
use crate::kinematics::NormStats;
use crate::tape::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MCTLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const KIND: &str = "checkpoint";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    stats: NormStats,
    tensors: Vec<TensorEntry>,
}

impl Cvae {
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let header = Header {
            config: self.config.clone(),
            stats: self.stats.clone(),
            tensors: self
                .names
                .iter()
                .zip(&self.params)
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    rows: t.rows(),
                    cols: t.cols(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(std::io::Error::other)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for t in &self.params {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        buf
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |e: std::io::Error| Error::format(KIND, e.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(bad)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format(KIND, "bad magic"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(bad)?;
        let version = u32::from_le_bytes(b4);
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(KIND, format!("unsupported version {version}")));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(bad)?;
        let hlen = u64::from_le_bytes(b8) as usize;
        if hlen > 64 << 20 {
            return Err(Error::format(KIND, "header too large"));
        }
        let mut json = vec![0u8; hlen];
        r.read_exact(&mut json).map_err(bad)?;
        let header: Header =
            serde_json::from_slice(&json).map_err(|e| Error::format(KIND, e.to_string()))?;
        let mut params = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            let n = entry.rows * entry.cols;
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw).map_err(bad)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.push(Tensor::from_vec(entry.rows, entry.cols, data));
        }
        let model = Cvae::from_parts(header.config, header.stats, params)?;
        for (expected, entry) in model.names.iter().zip(&header.tensors) {
            if *expected != entry.name {
                return Err(Error::format(
                    KIND,
                    format!("tensor '{}' where '{expected}' was expected", entry.name),
                ));
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut std::io::BufReader::new(file))
    }
}
