//! Binary parameter container: `"IMOS"`, format version, 32-byte config
//! hash, tensor count, then per tensor the name, rank, dims and
//! little-endian `f32` values. All integers are little-endian `u32`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::params::Params;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"IMOS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: [u8; 32],
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn from_params(params: &Params<f32>, config_hash: [u8; 32]) -> Self {
        let mut tensors = Vec::new();
        params.visit(&mut |name, dims, data| {
            tensors.push(TensorRecord {
                name,
                dims,
                data: data.to_vec(),
            })
        });
        Self {
            version: FORMAT_VERSION,
            config_hash,
            tensors,
        }
    }

    /// Copies every tensor into `params` by name, checking shapes.
    pub fn load_into(&self, params: &mut Params<f32>) -> Result<()> {
        let by_name: HashMap<&str, &TensorRecord> = self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let mut err = None;
        params.visit_mut(&mut |name, dims, data| {
            if err.is_some() {
                return;
            }
            match by_name.get(name.as_str()) {
                None => err = Some(Error::Checkpoint(format!("missing tensor {name}"))),
                Some(t) if t.dims != dims => {
                    err = Some(Error::Checkpoint(format!(
                        "tensor {name} has shape {:?}, expected {dims:?}",
                        t.dims
                    )))
                }
                Some(t) => data.copy_from_slice(&t.data),
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&self.version.to_le_bytes())?;
        w.write_all(&self.config_hash)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            w.write_all(&(t.name.len() as u32).to_le_bytes())?;
            w.write_all(t.name.as_bytes())?;
            w.write_all(&(t.dims.len() as u32).to_le_bytes())?;
            for d in &t.dims {
                w.write_all(&(*d as u32).to_le_bytes())?;
            }
            for v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut cur = Cursor { r, pos: 0 };
        let mut magic = [0u8; 4];
        cur.fill(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
        }
        let version = cur.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let mut config_hash = [0u8; 32];
        cur.fill(&mut config_hash)?;
        let count = cur.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = cur.u32()? as usize;
            let mut name = vec![0u8; len];
            cur.fill(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Checkpoint(format!("tensor name at byte {} is not UTF-8", cur.pos)))?;
            let rank = cur.u32()? as usize;
            let dims = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let mut raw = vec![0u8; n * 4];
            cur.fill(&mut raw)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(TensorRecord { name, dims, data });
        }
        let mut extra = [0u8; 1];
        if cur.r.read(&mut extra).map_err(|e| Error::Checkpoint(e.to_string()))? != 0 {
            return Err(Error::Checkpoint(format!("trailing bytes after offset {}", cur.pos)));
        }
        Ok(Self {
            version,
            config_hash,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(f))
    }
}

struct Cursor<'a, R> {
    r: &'a mut R,
    pos: usize,
}

impl<R: Read> Cursor<'_, R> {
    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        self.r.read_exact(buf).map_err(|_| {
            Error::Checkpoint(format!("truncated: needed {} bytes at offset {}", buf.len(), self.pos))
        })?;
        self.pos += buf.len();
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
}
