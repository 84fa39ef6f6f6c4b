//! Binary checkpoints: an 8-byte magic, a little-endian `u64` header
//! length, a JSON header, then every tensor as little-endian `f64`
//! (parameters, then AdamW first and second moments when present).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{AdamW, AdamWParams};
use super::trainer::TrainConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CBSWCKP1";

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    category_ids: Vec<u64>,
    losses: Vec<f64>,
    params: Vec<(String, Vec<usize>)>,
    optimizer: Option<(u64, AdamWParams)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub category_ids: Vec<u64>,
    /// Loss of every completed iteration; its length is the iteration count.
    pub losses: Vec<f64>,
    pub store: ParamStore,
    pub optimizer: Option<AdamW>,
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Parse("checkpoint truncated".into()));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

fn read_f64s(bytes: &mut &[u8], n: usize) -> Result<Vec<f64>> {
    let raw = take(bytes, n * 8)?;
    Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

impl Checkpoint {
    pub fn iteration(&self) -> usize {
        self.losses.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            category_ids: self.category_ids.clone(),
            losses: self.losses.clone(),
            params: self.store.iter().map(|(_, name, t)| (name.to_string(), t.shape().to_vec())).collect(),
            optimizer: self.optimizer.as_ref().map(|o| (o.t, o.hp)),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + self.store.num_scalars() * 24);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |vals: &[f64]| {
            for v in vals {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (_, _, t) in self.store.iter() {
            put(t.data());
        }
        if let Some(o) = &self.optimizer {
            o.m.iter().for_each(|m| put(m));
            o.v.iter().for_each(|v| put(v));
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let buf = &mut bytes;
        if take(buf, 8)? != MAGIC {
            return Err(Error::Parse("not a checkpoint file (bad magic)".into()));
        }
        let len = u64::from_le_bytes(take(buf, 8)?.try_into().expect("8 bytes")) as usize;
        let header: Header = serde_json::from_slice(take(buf, len)?)
            .map_err(|e| Error::Parse(format!("checkpoint header: {e}")))?;
        let mut store = ParamStore::new();
        for (name, shape) in &header.params {
            let n = shape.iter().product();
            store.add(name.clone(), Tensor::new(shape.clone(), read_f64s(buf, n)?)?);
        }
        let optimizer = match header.optimizer {
            Some((t, hp)) => {
                let sizes: Vec<usize> = header.params.iter().map(|(_, s)| s.iter().product()).collect();
                let m = sizes.iter().map(|&n| read_f64s(buf, n)).collect::<Result<Vec<_>>>()?;
                let v = sizes.iter().map(|&n| read_f64s(buf, n)).collect::<Result<Vec<_>>>()?;
                Some(AdamW { hp, t, m, v })
            }
            None => None,
        };
        if !buf.is_empty() {
            return Err(Error::Parse(format!("checkpoint has {} trailing bytes", buf.len())));
        }
        Ok(Checkpoint { config: header.config, category_ids: header.category_ids, losses: header.losses, store, optimizer })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Copies parameters by name into a store built from the same config.
    pub fn copy_params_into(&self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.store.len() {
            return Err(Error::shape(
                "checkpoint",
                format!("{} stored parameters, model has {}", self.store.len(), store.len()),
            ));
        }
        for (id, name, t) in self.store.iter() {
            let target = store.find(name).ok_or_else(|| Error::shape("checkpoint", format!("unknown parameter {name}")))?;
            if target.index() != id.index() {
                return Err(Error::shape("checkpoint", format!("parameter {name} out of order")));
            }
            store.set(target, t.clone())?;
        }
        Ok(())
    }
}
