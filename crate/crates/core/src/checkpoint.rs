//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "EVA1"
//! u64 seed, u64 epoch
//! u32 len, config JSON
//! u32 count, then per entry: u32 len, name, u32 rank, u64 dims.., u8 trainable
//! f64 payload of every entry, in entry order
//! ```

use std::fs;
use std::path::Path;

use serde_json::Value;

use crate::ag::Tensor;
use crate::error::{Error, Result};
use crate::model::{EvaModel, ModelConfig};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"EVA1";

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Always holds a `model` key; callers may add more.
    pub config: Value,
    pub seed: u64,
    pub epoch: u64,
    pub entries: Vec<Entry>,
}

fn bad(m: impl Into<String>) -> Error {
    Error::Checkpoint(m.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| bad(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &EvaModel<T>, epoch: u64) -> Result<Self> {
        let mut config = serde_json::Map::new();
        config.insert("model".into(), serde_json::to_value(&model.cfg)?);
        Ok(Self {
            config: Value::Object(config),
            seed: model.cfg.seed,
            epoch,
            entries: model
                .store
                .entries()
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    shape: e.value.shape().to_vec(),
                    trainable: e.trainable,
                    data: e.value.to_f64_vec(),
                })
                .collect(),
        })
    }

    /// Adds a config section next to `model`.
    pub fn with_section(mut self, key: &str, value: Value) -> Self {
        if let Value::Object(m) = &mut self.config {
            m.insert(key.to_string(), value);
        }
        self
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let v = self
            .config
            .get("model")
            .ok_or_else(|| bad("config snapshot has no model section"))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    /// Rebuilds a model from the stored config and overwrites its parameters.
    pub fn to_model<T: Scalar>(&self) -> Result<EvaModel<T>> {
        let mut m = EvaModel::new(self.model_config()?)?;
        self.restore_into(&mut m)?;
        Ok(m)
    }

    /// Copies every stored parameter into `model`, which must have the same
    /// parameter names and shapes.
    pub fn restore_into<T: Scalar>(&self, model: &mut EvaModel<T>) -> Result<()> {
        if model.store.len() != self.entries.len() {
            return Err(bad(format!(
                "checkpoint has {} parameters, model {}",
                self.entries.len(),
                model.store.len()
            )));
        }
        for e in &self.entries {
            let id = model
                .store
                .id(&e.name)
                .ok_or_else(|| bad(format!("model has no parameter `{}`", e.name)))?;
            if model.store.get(id).shape() != e.shape.as_slice() {
                return Err(bad(format!(
                    "`{}` has shape {:?} in the checkpoint but {:?} in the model",
                    e.name,
                    e.shape,
                    model.store.get(id).shape()
                )));
            }
            *model.store.get_mut(id) = Tensor::from_f64(e.shape.clone(), &e.data)?;
            model.store.set_trainable(id, e.trainable);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config = serde_json::to_vec(&self.config)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(&config);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.push(u8::from(e.trainable));
        }
        for e in &self.entries {
            for x in &e.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4, "header")? != MAGIC {
            return Err(bad("bad magic, not an EVA1 checkpoint"));
        }
        let seed = r.u64("seed")?;
        let epoch = r.u64("epoch")?;
        let n = r.u32("config length")? as usize;
        let config: Value = serde_json::from_slice(r.take(n, "config")?)?;
        let count = r.u32("entry count")? as usize;
        let mut heads = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| bad(format!("entry {i}: name is not UTF-8")))?
                .to_string();
            let rank = r.u32("rank")? as usize;
            if rank > 8 {
                return Err(bad(format!("`{name}`: implausible rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| r.u64("shape").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let flag = r.u8("trainable flag")?;
            if flag > 1 {
                return Err(bad(format!("`{name}`: bad trainable flag {flag}")));
            }
            heads.push((name, shape, flag == 1));
        }
        let mut entries = Vec::with_capacity(heads.len());
        for (name, shape, trainable) in heads {
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| bad(format!("`{name}`: shape overflow")))?;
            let bytes = r.take(numel.checked_mul(8).ok_or_else(|| bad("size overflow"))?, &name)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            entries.push(Entry {
                name,
                shape,
                trainable,
                data,
            });
        }
        if r.pos != buf.len() {
            return Err(bad(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self {
            config,
            seed,
            epoch,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            config: serde_json::json!({"model": {"seed": 3}}),
            seed: 3,
            epoch: 2,
            entries: vec![
                Entry {
                    name: "a.w".into(),
                    shape: vec![2, 2],
                    trainable: false,
                    data: vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5],
                },
                Entry {
                    name: "b".into(),
                    shape: vec![],
                    trainable: true,
                    data: vec![0.25],
                },
            ],
        }
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let b = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&b).unwrap();
        assert_eq!(back.to_bytes().unwrap(), b);
        assert_eq!(back.entries[0].data[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn truncation_and_garbage_fail() {
        let b = sample().to_bytes().unwrap();
        for cut in [0, 3, 10, 30, b.len() - 1] {
            assert!(Checkpoint::from_bytes(&b[..cut]).is_err(), "cut {cut}");
        }
        let mut extra = b.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut wrong = b;
        wrong[0] = b'X';
        assert!(Checkpoint::from_bytes(&wrong).is_err());
    }
}
