//! Binary parameter checkpoint.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic    8 bytes  "LIGHTKG\0"
//! version  u32
//! dim      u32
//! layers   u32
//! users    u64
//! items    u64
//! entities u64
//! relations u32
//! data_seed u64      seed the split and sampling were derived from
//! ratio    f64       sparsity sampling ratio (1.0 = none)
//! layer0   f64 * (users + items + entities) * dim, row-major
//! scalars  (f64 forward, f64 backward) * relations, in relation order
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::ckg::NodeSpace;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{Parameters, RelationScalars};

pub const MAGIC: &[u8; 8] = b"LIGHTKG\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub layers: usize,
    pub space: NodeSpace,
    pub data_seed: u64,
    pub sampling_ratio: f64,
    pub params: Parameters,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.params;
        let mut out = Vec::with_capacity(64 + 8 * p.num_values());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(p.dim() as u32).to_le_bytes());
        out.extend_from_slice(&(self.layers as u32).to_le_bytes());
        for n in [self.space.users, self.space.items, self.space.entities] {
            out.extend_from_slice(&(n as u64).to_le_bytes());
        }
        out.extend_from_slice(&(p.scalars.num_relations() as u32).to_le_bytes());
        out.extend_from_slice(&self.data_seed.to_le_bytes());
        out.extend_from_slice(&self.sampling_ratio.to_le_bytes());
        for x in p.layer0.as_slice().iter().chain(p.scalars.slots()) {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let dim = read_u32(&mut r)? as usize;
        let layers = read_u32(&mut r)? as usize;
        let users = read_u64(&mut r)? as usize;
        let items = read_u64(&mut r)? as usize;
        let entities = read_u64(&mut r)? as usize;
        let relations = read_u32(&mut r)? as usize;
        let data_seed = read_u64(&mut r)?;
        let sampling_ratio = read_f64(&mut r)?;
        let space = NodeSpace::new(users, items, entities);
        let n_emb = space
            .len()
            .checked_mul(dim)
            .ok_or_else(|| Error::Checkpoint("header overflows".into()))?;
        let expected = n_emb + 2 * relations;
        if r.len() != expected * 8 {
            return Err(Error::Checkpoint(format!(
                "payload holds {} bytes, header implies {}",
                r.len(),
                expected * 8
            )));
        }
        let values: Vec<f64> = r
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let layer0 = Matrix::from_vec(space.len(), dim, values[..n_emb].to_vec()).expect("shape checked");
        let scalars = RelationScalars::from_slots(values[n_emb..].to_vec())?;
        Ok(Self {
            layers,
            space,
            data_seed,
            sampling_ratio,
            params: Parameters { layer0, scalars },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint("truncated header".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut &[u8]) -> Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}
