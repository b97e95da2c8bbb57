//! Training checkpoints.
//!
//! Layout, little-endian:
//!
//! ```text
//! "SGCK1\0"  u32 version (1)
//! u32 entries, each: u32 name_len, name (UTF-8), u32 rank, rank x u32 dims, f32 data
//! u32 optimizer groups, each: u32 name_len, name, f32 alpha, f32 rho, f32 floor,
//!     u32 buffers, each: u32 len, f32 data
//! u32 phase index, u32 epochs completed in that phase, u64 master seed
//! u32 config_len, resolved configuration text (UTF-8)
//! ```

use std::fs;
use std::path::Path;

use super::reader::Reader;
use crate::error::{Error, Result};
use crate::optim::{RmsProp, RmsPropConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"SGCK1\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerGroup {
    pub name: String,
    pub alpha: f32,
    pub rho: f32,
    pub floor: f32,
    pub state: Vec<Vec<f32>>,
}

impl OptimizerGroup {
    pub fn from_rmsprop(name: &str, opt: &RmsProp) -> Self {
        Self {
            name: name.to_string(),
            alpha: opt.config.alpha,
            rho: opt.config.rho,
            floor: opt.config.floor,
            state: opt.state.clone(),
        }
    }

    pub fn to_rmsprop(&self) -> RmsProp {
        RmsProp {
            config: RmsPropConfig {
                alpha: self.alpha,
                rho: self.rho,
                floor: self.floor,
            },
            state: self.state.clone(),
        }
    }
}

/// Position in the phase schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ScheduleState {
    pub phase: u32,
    pub epoch: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub params: Vec<(String, Tensor<f32>)>,
    pub optimizers: Vec<OptimizerGroup>,
    pub schedule: ScheduleState,
    pub config: String,
}

impl Checkpoint {
    pub fn push_store(&mut self, store: &ParamStore) {
        for (name, t) in store.iter() {
            self.params.push((name.to_string(), t.clone()));
        }
    }

    /// Fills every parameter of `store` from this checkpoint.
    pub fn restore_store(&self, store: &mut ParamStore) -> Result<()> {
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let t = self
                .params
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks parameter `{name}`")))?;
            store.set(&name, t.clone())?;
        }
        Ok(())
    }

    pub fn optimizer(&self, name: &str) -> Option<&OptimizerGroup> {
        self.optimizers.iter().find(|o| o.name == name)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.params.len() as u32);
        for (name, t) in &self.params {
            put_str(&mut out, name);
            put_u32(&mut out, t.rank() as u32);
            for &d in t.shape() {
                put_u32(&mut out, d as u32);
            }
            put_f32s(&mut out, t.data());
        }
        put_u32(&mut out, self.optimizers.len() as u32);
        for o in &self.optimizers {
            put_str(&mut out, &o.name);
            for v in [o.alpha, o.rho, o.floor] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            put_u32(&mut out, o.state.len() as u32);
            for buf in &o.state {
                put_u32(&mut out, buf.len() as u32);
                put_f32s(&mut out, buf);
            }
        }
        put_u32(&mut out, self.schedule.phase);
        put_u32(&mut out, self.schedule.epoch);
        out.extend_from_slice(&self.schedule.seed.to_le_bytes());
        put_str(&mut out, &self.config);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        r.magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format {
                what: "checkpoint",
                offset: 6,
                msg: format!("unsupported version {version}"),
            });
        }
        let n = r.u32()?;
        let mut params = Vec::new();
        for _ in 0..n {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel = shape.iter().product::<usize>();
            if rank == 0 || numel == 0 {
                return Err(r.error(format!("parameter `{name}` has empty shape {shape:?}")));
            }
            let data = r.f32s(numel)?;
            params.push((name, Tensor::from_vec(&shape, data)?));
        }
        let groups = r.u32()?;
        let mut optimizers = Vec::new();
        for _ in 0..groups {
            let name = r.string()?;
            let alpha = r.f32()?;
            let rho = r.f32()?;
            let floor = r.f32()?;
            let count = r.u32()?;
            let mut state = Vec::new();
            for _ in 0..count {
                let len = r.u32()? as usize;
                state.push(r.f32s(len)?);
            }
            optimizers.push(OptimizerGroup {
                name,
                alpha,
                rho,
                floor,
                state,
            });
        }
        let schedule = ScheduleState {
            phase: r.u32()?,
            epoch: r.u32()?,
            seed: r.u64()?,
        };
        let config = r.string()?;
        r.finish()?;
        Ok(Self {
            params,
            optimizers,
            schedule,
            config,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(fs::write(path, self.encode())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    out.reserve(4 * v.len());
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}
