//! Checkpoint container.
//!
//! All integers little-endian:
//!
//! ```text
//! magic      8 bytes  "SSMCKPT\0"
//! version    u32      1
//! phase      u8       0 pretrain, 1 finetune, 2 mil
//! flags      u8       bit 0: optimizer moments present
//! reserved   u16      0
//! epoch      u64
//! step       u64      optimizer steps taken
//! config     u32 length + UTF-8 JSON
//! count      u32      number of tensor records
//! record*    group u8 (0 param, 1 buffer, 2 first moment, 3 second moment)
//!            name  u16 length + UTF-8
//!            dtype u8 (0 f32, 1 f64)
//!            ndim  u8, then ndim x u64 extents
//!            data  numel x dtype size, little-endian
//! ```
//!
//! Records of a group appear in parameter order, so a round trip restores
//! every store with its iteration order intact.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{DType, Scalar, Tensor};
use crate::train::optim::OptimState;
use crate::train::{Phase, TrainState};

pub const MAGIC: &[u8; 8] = b"SSMCKPT\0";
pub const VERSION: u32 = 1;

const PARAM: u8 = 0;
const BUFFER: u8 = 1;
const MOMENT1: u8 = 2;
const MOMENT2: u8 = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub phase: Phase,
    /// JSON snapshot of whatever configuration produced the weights.
    pub config: String,
    pub params: ParamStore<f32>,
    pub buffers: ParamStore<f32>,
    pub opt: Option<OptimState<f32>>,
    pub epoch: usize,
}

impl Checkpoint {
    pub fn new(phase: Phase, config: &impl Serialize, state: &TrainState, with_optimizer: bool) -> Result<Self> {
        Ok(Checkpoint {
            phase,
            config: serde_json::to_string(config).map_err(|e| Error::Config(e.to_string()))?,
            params: state.params.clone(),
            buffers: state.buffers.clone(),
            opt: with_optimizer.then(|| state.opt.clone()),
            epoch: state.epoch,
        })
    }

    pub fn config_as<C: DeserializeOwned>(&self) -> Result<C> {
        serde_json::from_str(&self.config).map_err(|e| Error::format("checkpoint config", e.to_string()))
    }

    /// Training state to resume from; fresh moments when none were saved.
    pub fn train_state(&self) -> TrainState {
        let mut s = TrainState::new(self.params.clone(), self.buffers.clone());
        if let Some(o) = &self.opt {
            s.opt = o.clone();
        }
        s.epoch = self.epoch;
        s
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.phase.code());
        out.push(self.opt.is_some() as u8);
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        let step = self.opt.as_ref().map_or(0, |o| o.step);
        out.extend_from_slice(&step.to_le_bytes());
        put_len_u32(&mut out, self.config.len())?;
        out.extend_from_slice(self.config.as_bytes());

        let mut groups = vec![(PARAM, &self.params), (BUFFER, &self.buffers)];
        if let Some(o) = &self.opt {
            groups.push((MOMENT1, &o.m));
            groups.push((MOMENT2, &o.v));
        }
        put_len_u32(&mut out, groups.iter().map(|(_, s)| s.len()).sum())?;
        for (group, store) in groups {
            for (name, t) in store.iter() {
                write_tensor(&mut out, group, name, t)?;
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let phase = Phase::from_code(r.u8()?).ok_or_else(|| Error::format("checkpoint", "bad phase"))?;
        let has_opt = match r.u8()? {
            0 => false,
            1 => true,
            f => return Err(Error::format("checkpoint", format!("unknown flags {f:#x}"))),
        };
        r.take(2)?;
        let epoch = r.u64()? as usize;
        let step = r.u64()?;
        let clen = r.u32()? as usize;
        let config = String::from_utf8(r.take(clen)?.to_vec())
            .map_err(|_| Error::format("checkpoint", "config is not UTF-8"))?;

        let mut stores = [ParamStore::new(), ParamStore::new(), ParamStore::new(), ParamStore::new()];
        for _ in 0..r.u32()? {
            let group = r.u8()?;
            let nlen = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::format("checkpoint", "tensor name is not UTF-8"))?
                .to_string();
            let dtype = DType::from_code(r.u8()?).ok_or_else(|| Error::format("checkpoint", "bad dtype"))?;
            let ndim = r.u8()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(dtype.size()).ok_or_else(|| Error::format("checkpoint", "size overflow"))?)?;
            if dtype != f32::DTYPE {
                return Err(Error::format("checkpoint", format!("tensor `{name}` is {dtype:?}, expected F32")));
            }
            let data = raw.chunks_exact(4).map(f32::read_le).collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::format("checkpoint", e.to_string()))?;
            let store = stores
                .get_mut(group as usize)
                .ok_or_else(|| Error::format("checkpoint", format!("unknown tensor group {group}")))?;
            if store.contains(&name) {
                return Err(Error::format("checkpoint", format!("duplicate tensor `{name}`")));
            }
            store.insert(name, t);
        }
        if r.pos != bytes.len() {
            return Err(Error::format("checkpoint", format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let [params, buffers, m, v] = stores;
        let opt = has_opt.then_some(OptimState { step, m, v });
        Ok(Checkpoint {
            phase,
            config,
            params,
            buffers,
            opt,
            epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::file(path, e))
    }
}

fn put_len_u32(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Invalid(format!("length {n} exceeds u32")))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

fn write_tensor<T: Scalar>(out: &mut Vec<u8>, group: u8, name: &str, t: &Tensor<T>) -> Result<()> {
    out.push(group);
    let nlen = u16::try_from(name.len()).map_err(|_| Error::Invalid(format!("tensor name too long: {name}")))?;
    out.extend_from_slice(&nlen.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE.code());
    out.push(u8::try_from(t.ndim()).map_err(|_| Error::Invalid(format!("`{name}` has too many axes")))?);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
    Ok(())
}

pub(crate) struct Reader<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format("binary file", format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::from_fn(&[2, 3], |i| i as f32 * -0.1 + f32::EPSILON));
        p.insert("b", Tensor::from_fn(&[3], |i| f32::from_bits(0x3f80_0001 + i as u32)));
        let mut state = TrainState::new(p, ParamStore::new());
        state.opt.step = 7;
        state.epoch = 2;
        Checkpoint::new(Phase::Finetune, &serde_json::json!({"lr": 0.1}), &state, true).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap(), c);
    }

    #[test]
    fn corruption_detected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
