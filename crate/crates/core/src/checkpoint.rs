//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RAMCKPT1"                      8 bytes
//! version                         u32  (currently 1)
//! config length, config text      u32, UTF-8 `key = value` lines
//! master seed                     u64
//! epoch counter                   u64
//! tensor count                    u32
//! per tensor:
//!   name length, name             u32, UTF-8
//!   rank, dims                    u32, u64 × rank
//!   payload                       f64 × product(dims)
//! ```

use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::ram::RamModel;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"RAMCKPT1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub seed: u64,
    pub epoch: u64,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn from_model(model: &RamModel, config: &RunConfig, epoch: u64) -> Self {
        Self {
            config: config.clone(),
            seed: config.seed,
            epoch,
            params: model.params.clone(),
        }
    }

    /// Rebuilds the model architecture from the stored config and loads every tensor into it.
    pub fn to_model(&self) -> Result<RamModel> {
        let mut model = RamModel::new(self.config.model.clone(), self.seed)?;
        if model.params.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, architecture needs {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for (name, t) in self.params.iter() {
            model
                .params
                .assign(name, t.clone())
                .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * self.params.total_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let text = self.config.to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        let config = RunConfig::parse(text).map_err(|e| Error::Checkpoint(format!("stored config: {e}")))?;
        let seed = r.u64()?;
        let epoch = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
            if params.find(&name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
            params.add(name, t);
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self {
            config,
            seed,
            epoch,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (RamModel, RunConfig) {
        let cfg = RunConfig::parse(
            "image_side = 32\nglimpse_size = 8\nhidden_dim = 8\nfuse_dim = 8\nloc_dim = 4\nconv1_channels = 2\nconv2_channels = 2\n",
        )
        .unwrap();
        (RamModel::new(cfg.model.clone(), cfg.seed).unwrap(), cfg)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (mut model, cfg) = small();
        // values whose decimal rendering would not survive a text format
        model.params.get_mut(model.locator.b).data_mut()[0] = 0.1 + 0.2;
        model.params.get_mut(model.locator.b).data_mut()[1] = -1.0e-300;
        let ck = Checkpoint::from_model(&model, &cfg, 12);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let restored = back.to_model().unwrap();
        for ((_, a), (_, b)) in restored.params.iter().zip(model.params.iter()) {
            let (a, b): (Vec<u64>, Vec<u64>) = (
                a.data().iter().map(|v| v.to_bits()).collect(),
                b.data().iter().map(|v| v.to_bits()).collect(),
            );
            assert_eq!(a, b);
        }
    }

    #[test]
    fn header_bytes() {
        let (model, cfg) = small();
        let bytes = Checkpoint::from_model(&model, &cfg, 0).to_bytes();
        assert_eq!(&bytes[..8], b"RAMCKPT1");
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
    }

    #[test]
    fn rejects_unknown_version_bad_magic_and_truncation() {
        let (model, cfg) = small();
        let bytes = Checkpoint::from_model(&model, &cfg, 0).to_bytes();
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(Error::Checkpoint(m)) if m.contains("version")));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
    }
}
