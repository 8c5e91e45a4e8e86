//! Versioned binary checkpoint: every tensor as a named little-endian f64
//! blob. Holds the online and EMA parameter sets of each magnification
//! plus the ensemble weights.
//!
//! Layout: magic `SGMCK`, u32 version, u32 tensor count, then per tensor
//! u32 name length, name bytes, u32 rank, u64 per dimension, f64 data.

use std::collections::BTreeMap;
use std::path::Path;

use super::params::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::types::Magnification;

const MAGIC: &[u8; 5] = b"SGMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleModel {
    pub online: ModelParams,
    pub ema: ModelParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub scales: BTreeMap<Magnification, ScaleModel>,
    pub ensemble_weights: [f64; 3],
}

type Named = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
        tensors.push(("ensemble.weights".into(), vec![3], self.ensemble_weights.to_vec()));
        for (mag, sm) in &self.scales {
            let cfg = sm.online.config();
            tensors.push((
                format!("x{mag}/config"),
                vec![4],
                vec![cfg.input_dim as f64, cfg.width as f64, cfg.attn_hidden as f64, cfg.blocks as f64],
            ));
            for (set, params) in [("online", &sm.online), ("ema", &sm.ema)] {
                for t in params.tensors() {
                    tensors.push((format!("x{mag}/{set}/{}", t.name), t.shape, t.data.to_vec()));
                }
            }
        }
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, shape, data) in tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for d in shape {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn decode(data: &[u8]) -> Result<Self> {
        let named = read_named(data)?;
        let weights = named
            .get("ensemble.weights")
            .filter(|(s, _)| s == &[3])
            .ok_or_else(|| Error::Data("checkpoint lacks ensemble.weights".into()))?;
        let ensemble_weights = [weights.1[0], weights.1[1], weights.1[2]];
        let mut scales = BTreeMap::new();
        for mag in Magnification::ALL {
            let Some((_, c)) = named.get(&format!("x{mag}/config")) else {
                continue;
            };
            if c.len() != 4 {
                return Err(Error::Data(format!("x{mag}/config must hold 4 values")));
            }
            let cfg = ModelConfig {
                input_dim: c[0] as usize,
                width: c[1] as usize,
                attn_hidden: c[2] as usize,
                blocks: c[3] as usize,
            };
            cfg.validate().map_err(|e| Error::Data(e.to_string()))?;
            let load = |set: &str| {
                ModelParams::from_named(&cfg, |name| named.get(&format!("x{mag}/{set}/{name}")).cloned())
            };
            scales.insert(
                mag,
                ScaleModel {
                    online: load("online")?,
                    ema: load("ema")?,
                },
            );
        }
        Ok(Self {
            scales,
            ensemble_weights,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&data)
    }
}

fn read_named(data: &[u8]) -> Result<Named> {
    let mut pos = 0usize;
    let mut take = |n: usize, what: &str| -> Result<(usize, &[u8])> {
        if data.len() - pos < n {
            return Err(Error::format(pos as u64, format!("checkpoint truncated reading {what}")));
        }
        let at = pos;
        pos += n;
        Ok((at, &data[at..at + n]))
    };
    let (_, magic) = take(5, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(0, "bad checkpoint magic"));
    }
    let (at, v) = take(4, "version")?;
    let version = u32::from_le_bytes(v.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(at as u64, format!("unsupported checkpoint version {version}")));
    }
    let count = u32::from_le_bytes(take(4, "count")?.1.try_into().unwrap()) as usize;
    let mut out = Named::new();
    for _ in 0..count {
        let len = u32::from_le_bytes(take(4, "name length")?.1.try_into().unwrap()) as usize;
        let (at, name) = take(len, "name")?;
        let name = String::from_utf8(name.to_vec()).map_err(|_| Error::format(at as u64, "tensor name not UTF-8"))?;
        let rank = u32::from_le_bytes(take(4, "rank")?.1.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(8, "dim")?.1.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let (at, raw) = take(n.checked_mul(8).ok_or_else(|| Error::format(0, "tensor too large"))?, "tensor data")?;
        let values: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(at as u64, format!("tensor {name} holds non-finite values")));
        }
        out.insert(name, (shape, values));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn roundtrip() {
        let cfg = ModelConfig {
            input_dim: 5,
            width: 6,
            attn_hidden: 3,
            blocks: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut scales = BTreeMap::new();
        for m in [Magnification::X5, Magnification::X20] {
            scales.insert(
                m,
                ScaleModel {
                    online: ModelParams::init(&cfg, &mut rng),
                    ema: ModelParams::init(&cfg, &mut rng),
                },
            );
        }
        let ck = Checkpoint {
            scales,
            ensemble_weights: [0.2, 0.3, 0.5],
        };
        let bytes = ck.encode();
        assert_eq!(Checkpoint::decode(&bytes).unwrap(), ck);
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[5] = 9;
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format { offset: 5, .. })));
    }
}
