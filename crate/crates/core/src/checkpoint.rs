//! Single-file checkpoint container. All integers and floats little-endian.
//!
//! ```text
//! magic    8 bytes  "MVADCKPT"
//! version  u32
//! config   u64 length, UTF-8 JSON of the model configuration
//! step     u64      completed optimizer steps
//! count    u32      number of parameters P
//! P ×      u32 name length, name, u32 rank, rank × u64 dims, f32 × numel (row-major)
//! adam     u8       0 = absent, 1 = present
//! if 1:    u64 t, f64 lr, f64 beta1, f64 beta2, f64 eps,
//!          P × (f32 × numel first moment, f32 × numel second moment)
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MVADCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: usize,
    pub params: ParamStore<f32>,
    pub adam: Option<Adam>,
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(w: &mut Vec<u8>, v: u64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(w: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        w.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode(config: &ModelConfig, store: &ParamStore<f32>, step: usize, adam: Option<&Adam>) -> Result<Vec<u8>> {
    let mut w = Vec::with_capacity(store.count() * 4 * if adam.is_some() { 3 } else { 1 } + 4096);
    w.extend_from_slice(MAGIC);
    put_u32(&mut w, FORMAT_VERSION);
    let cfg = serde_json::to_vec(config)?;
    put_u64(&mut w, cfg.len() as u64);
    w.extend_from_slice(&cfg);
    put_u64(&mut w, step as u64);
    put_u32(&mut w, store.len() as u32);
    for id in store.ids() {
        let name = store.name(id).as_bytes();
        put_u32(&mut w, name.len() as u32);
        w.extend_from_slice(name);
        let t = store.get(id);
        put_u32(&mut w, t.rank() as u32);
        for &d in t.shape() {
            put_u64(&mut w, d as u64);
        }
        put_f32s(&mut w, t.data());
    }
    match adam {
        None => w.push(0),
        Some(a) => {
            w.push(1);
            put_u64(&mut w, a.t);
            for v in [a.lr, a.beta1, a.beta2, a.eps] {
                w.extend_from_slice(&v.to_le_bytes());
            }
            for (m, v) in a.m.iter().zip(&a.v) {
                put_f32s(&mut w, m);
                put_f32s(&mut w, v);
            }
        }
    }
    Ok(w)
}

/// Writes atomically: a sibling temporary file is renamed over `path`.
pub fn save(path: &Path, config: &ModelConfig, store: &ParamStore<f32>, step: usize, adam: Option<&Adam>) -> Result<()> {
    let bytes = encode(config, store, step, adam)?;
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::file(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::file(&tmp, e))?;
    f.sync_all().ok();
    fs::rename(&tmp, path).map_err(|e| Error::file(path, e))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.at)));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, at: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("format version {version} is not supported")));
    }
    let len = r.u64()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(len)?)?;
    let step = r.u64()? as usize;
    let count = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| Ok(r.u64()? as usize)).collect::<Result<Vec<_>>>()?;
        let data = r.f32s(shape.iter().product())?;
        if params.lookup(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate parameter '{name}'")));
        }
        params.insert(name, Tensor::new(&shape, data)?);
    }
    let adam = match r.take(1)?[0] {
        0 => None,
        1 => {
            let t = r.u64()?;
            let (lr, beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
            let mut m = Vec::with_capacity(count);
            let mut v = Vec::with_capacity(count);
            for id in params.ids() {
                let n = params.get(id).len();
                m.push(r.f32s(n)?);
                v.push(r.f32s(n)?);
            }
            Some(Adam {
                lr,
                beta1,
                beta2,
                eps,
                t,
                m,
                v,
            })
        }
        f => return Err(Error::Checkpoint(format!("bad optimizer flag {f}"))),
    };
    if r.at != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    Ok(Checkpoint {
        config,
        step,
        params,
        adam,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::file(path, e))?;
    decode(&bytes).map_err(|e| Error::file(path, e))
}

/// Rebuilds the model from the stored configuration and installs the stored
/// values; every name and shape must match the rebuilt parameter set.
pub fn restore(ckpt: &Checkpoint) -> Result<(Model, ParamStore<f32>)> {
    let (model, mut store) = Model::build::<f32>(&ckpt.config)?;
    if store.len() != ckpt.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} parameters, configuration builds {}",
            ckpt.params.len(),
            store.len()
        )));
    }
    for id in ckpt.params.ids() {
        let name = ckpt.params.name(id);
        let dst = store
            .lookup(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter '{name}'")))?;
        if dst != id {
            return Err(Error::Checkpoint(format!("parameter '{name}' out of order")));
        }
        let src = ckpt.params.get(id);
        if store.get(dst).shape() != src.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter '{name}' has shape {:?}, expected {:?}",
                src.shape(),
                store.get(dst).shape()
            )));
        }
        *store.get_mut(dst) = src.clone();
    }
    Ok((model, store))
}
