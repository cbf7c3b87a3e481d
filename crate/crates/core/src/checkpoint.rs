//! Binary checkpoint: magic `TSCK`, format version, the training config as
//! JSON, then named tensors with shapes and little-endian f64 data.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{PolicyParams, Tensor};
use crate::ppo::PpoConfig;

pub const MAGIC: &[u8; 4] = b"TSCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: PpoConfig,
    pub params: PolicyParams,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Serialization(msg.into())
}

fn put_u32(w: &mut impl Write, x: u32) -> Result<()> {
    Ok(w.write_all(&x.to_le_bytes())?)
}

fn put_bytes(w: &mut impl Write, b: &[u8]) -> Result<()> {
    put_u32(w, u32::try_from(b.len()).map_err(|_| bad("section too large"))?)?;
    Ok(w.write_all(b)?)
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| bad(format!("truncated checkpoint: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

fn get_bytes(r: &mut impl Read, limit: usize) -> Result<Vec<u8>> {
    let n = get_u32(r)? as usize;
    if n > limit {
        return Err(bad(format!("section of {n} bytes exceeds {limit}")));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b).map_err(|e| bad(format!("truncated checkpoint: {e}")))?;
    Ok(b)
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        if self.config.net != self.params.cfg {
            return Err(Error::Contract("checkpoint config and parameter shapes disagree".into()));
        }
        w.write_all(MAGIC)?;
        put_u32(w, VERSION)?;
        put_bytes(w, &serde_json::to_vec(&self.config)?)?;
        put_u32(w, Tensor::ALL.len() as u32)?;
        for t in Tensor::ALL {
            let (rows, cols) = self.params.cfg.shape(t);
            put_bytes(w, t.name().as_bytes())?;
            put_u32(w, rows as u32)?;
            put_u32(w, cols as u32)?;
            for x in self.params.tensor(t) {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("not a checkpoint: too short"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint: bad magic"));
        }
        let version = get_u32(r)?;
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let config: PpoConfig = serde_json::from_slice(&get_bytes(r, 1 << 20)?)?;
        config.validate()?;
        let mut params = PolicyParams::zeros(config.net);
        let count = get_u32(r)? as usize;
        if count != Tensor::ALL.len() {
            return Err(bad(format!("expected {} tensors, found {count}", Tensor::ALL.len())));
        }
        for t in Tensor::ALL {
            let name = get_bytes(r, 64)?;
            if name != t.name().as_bytes() {
                return Err(bad(format!("expected tensor {}, found {}", t.name(), String::from_utf8_lossy(&name))));
            }
            let shape = (get_u32(r)? as usize, get_u32(r)? as usize);
            if shape != config.net.shape(t) {
                return Err(bad(format!("tensor {} has shape {shape:?}, config implies {:?}", t.name(), config.net.shape(t))));
            }
            for x in params.tensor_mut(t) {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(|e| bad(format!("truncated tensor {}: {e}", t.name())))?;
                *x = f64::from_le_bytes(b);
            }
        }
        if !params.is_finite() {
            return Err(Error::Numeric("checkpoint holds non-finite weights".into()));
        }
        Ok(Checkpoint { config, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}
