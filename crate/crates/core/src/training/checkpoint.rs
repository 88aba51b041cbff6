//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MLCK" | u32 version | u64 epoch | u64 rng_state | u64 adam_step | u32 count
//! count x parameter entry:  u32 name_len | name | tensor
//! count x moment pair:      tensor (first moment) | tensor (second moment)
//! tensor := u8 dtype | u8 rank | rank x u32 extent | raw scalars
//! ```

use std::fs;
use std::path::Path;

use super::AdamW;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{numel, DType, Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MLCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Real> {
    pub version: u32,
    pub epoch: u64,
    pub rng_state: u64,
    pub params: Vec<(String, Tensor<T>)>,
    pub optimizer: AdamW<T>,
}

impl<T: Real> Checkpoint<T> {
    pub fn capture(store: &ParamStore<T>, optimizer: &AdamW<T>, epoch: u64, rng_state: u64) -> Self {
        let params = store
            .iter()
            .map(|p| {
                let t = Tensor::new(p.tensor.shape().to_vec(), p.tensor.data().to_vec()).expect("finite parameters");
                (p.name.clone(), t)
            })
            .collect();
        Self {
            version: CHECKPOINT_VERSION,
            epoch,
            rng_state,
            params,
            optimizer: optimizer.clone(),
        }
    }

    /// Copies the saved values into `store`, which must hold the same names
    /// and shapes in the same order.
    pub fn restore(&self, store: &mut ParamStore<T>) -> Result<AdamW<T>> {
        if store.len() != self.params.len() {
            return Err(Error::Integrity(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (p, (name, t)) in store.iter_mut().zip(&self.params) {
            if &p.name != name || p.tensor.shape() != t.shape() {
                return Err(Error::Integrity(format!(
                    "checkpoint entry `{name}` {:?} does not match model parameter `{}` {:?}",
                    t.shape(),
                    p.name,
                    p.tensor.shape()
                )));
            }
            p.tensor.data_mut().copy_from_slice(t.data());
            p.tensor.zero_grad();
        }
        Ok(self.optimizer.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.rng_state.to_le_bytes());
        out.extend_from_slice(&self.optimizer.step.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            write_tensor(&mut out, t);
        }
        for (m, v) in self.optimizer.m.iter().zip(&self.optimizer.v) {
            write_tensor(&mut out, m);
            write_tensor(&mut out, v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("missing MLCK magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let epoch = r.u64()?;
        let rng_state = r.u64()?;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
                .to_owned();
            params.push((name, r.tensor::<T>()?));
        }
        let (mut m, mut v) = (Vec::with_capacity(count), Vec::with_capacity(count));
        for (_, p) in &params {
            let (mi, vi) = (r.tensor::<T>()?, r.tensor::<T>()?);
            if mi.shape() != p.shape() || vi.shape() != p.shape() {
                return Err(Error::Format("moment shape differs from its parameter".into()));
            }
            m.push(mi);
            v.push(vi);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            version,
            epoch,
            rng_state,
            params,
            optimizer: AdamW { step, m, v },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn write_tensor<T: Real>(out: &mut Vec<u8>, t: &Tensor<T>) {
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor<T: Real>(&mut self) -> Result<Tensor<T>> {
        let dtype = DType::from_code(self.take(1)?[0])?;
        if dtype != T::DTYPE {
            return Err(Error::Format(format!("checkpoint holds {dtype:?}, expected {:?}", T::DTYPE)));
        }
        let rank = self.take(1)?[0] as usize;
        let shape: Vec<usize> = (0..rank).map(|_| self.u32().map(|e| e as usize)).collect::<Result<_>>()?;
        let size = dtype.size_of();
        let raw = self.take(numel(&shape) * size)?;
        Tensor::new(shape, raw.chunks_exact(size).map(T::read_le).collect())
    }
}
