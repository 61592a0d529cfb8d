//! `UCKP` checkpoint files.
//!
//! Layout (little endian):
//!
//! ```text
//! "UCKP" | u32 version | u8 task tag | u32 n + model config JSON
//! | u64 step | u8 stage
//! | u32 count | { u32 n + name | u8 group | u8 trainable | u32 rank | u32 extents | f32 payload }*
//! | u32 count | { u32 n + name | u64 step | u32 len | f64 m | f64 v }*
//! ```
//!
//! Parameter payloads are f32; training keeps parameters f32-representable,
//! so a save/load round trip is exact.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::{AdamW, Moments};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::{read_u32, Tensor};

pub const MAGIC: &[u8; 4] = b"UCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ParamStore,
    pub optimizer: AdamW,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Last completed training stage (0 for an untrained model).
    pub stage: u8,
}

fn group_code(g: ParamGroup) -> u8 {
    match g {
        ParamGroup::Backbone => 0,
        ParamGroup::Fcpg => 1,
        ParamGroup::Decoder => 2,
        ParamGroup::Head => 3,
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let n = read_u32(r)? as usize;
    if n > 1 << 24 {
        return Err(Error::Format(format!("implausible string length {n}")));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| Error::Format(format!("non-UTF-8 name: {e}")))
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut b = vec![0u8; 8 * n];
    r.read_exact(&mut b)?;
    Ok(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

impl Checkpoint {
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&[self.model.task.tag()])?;
        write_str(&mut w, &serde_json::to_string(&self.model)?)?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&[self.stage])?;
        let entries = self.params.entries();
        w.write_all(&(entries.len() as u32).to_le_bytes())?;
        for e in entries {
            write_str(&mut w, &e.name)?;
            w.write_all(&[group_code(e.group), u8::from(e.trainable)])?;
            let s = e.value.shape();
            w.write_all(&(s.len() as u32).to_le_bytes())?;
            for &d in s {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in e.value.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        w.write_all(&(self.optimizer.state.len() as u32).to_le_bytes())?;
        for (name, m) in &self.optimizer.state {
            write_str(&mut w, name)?;
            w.write_all(&m.step.to_le_bytes())?;
            w.write_all(&(m.m.len() as u32).to_le_bytes())?;
            for v in m.m.iter().chain(&m.v) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Read a checkpoint and rebuild its parameter store against the model
    /// layout implied by the embedded configuration.
    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("not a checkpoint (magic {magic:?})")));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let tag = read_u8(&mut r)?;
        let model: ModelConfig = serde_json::from_str(&read_str(&mut r)?)?;
        if model.task.tag() != tag {
            return Err(Error::Format(format!(
                "task tag {tag} disagrees with embedded {} configuration",
                model.task.name()
            )));
        }
        let step = read_u64(&mut r)?;
        let stage = read_u8(&mut r)?;
        let (_, mut params) = Model::new(&model, 0)?;
        let count = read_u32(&mut r)? as usize;
        if count != params.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {count} tensors, model expects {}",
                params.len()
            )));
        }
        for id in params.ids().collect::<Vec<_>>() {
            let name = read_str(&mut r)?;
            let (group, trainable) = (read_u8(&mut r)?, read_u8(&mut r)?);
            let e = params.get(id);
            if name != e.name || group != group_code(e.group) || (trainable == 1) != e.trainable {
                return Err(Error::Format(format!("tensor {name} does not match model entry {}", e.name)));
            }
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut r)? as usize);
            }
            if shape != e.value.shape() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {shape:?}, model expects {:?}",
                    e.value.shape()
                )));
            }
            let n: usize = shape.iter().product();
            let mut b = vec![0u8; 4 * n];
            r.read_exact(&mut b)?;
            let data = b
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            *params.value_mut(id) = Tensor::new(&shape, data)?;
        }
        let mut optimizer = AdamW::new(0.0);
        let blocks = read_u32(&mut r)? as usize;
        for _ in 0..blocks {
            let name = read_str(&mut r)?;
            let st = read_u64(&mut r)?;
            let len = read_u32(&mut r)? as usize;
            let m = read_f64s(&mut r, len)?;
            let v = read_f64s(&mut r, len)?;
            optimizer.state.push((name, Moments { step: st, m, v }));
        }
        Ok(Self {
            model,
            params,
            optimizer,
            step,
            stage,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read(bytes.as_slice())
    }
}
