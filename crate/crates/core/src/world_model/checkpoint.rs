//! World-model checkpoint file (little endian):
//!
//! | field            | type                                   |
//! |------------------|----------------------------------------|
//! | magic            | `[u8; 4]` = `ITCW`                     |
//! | version          | `u32` (1)                              |
//! | metadata length  | `u32` byte count `m`                   |
//! | metadata         | `m` bytes of UTF-8 JSON [`CheckpointMeta`] |
//! | tensor count     | `u32`                                  |
//! | per tensor       | `u32` name length, name bytes, `u32` rank, `u32` per dimension, then `f32` values row-major |
//!
//! Tensors appear in the order of [`Params::tensor_info`].

use std::io::{Read, Write};

use ndarray::NdFloat;
use serde::{Deserialize, Serialize};

use crate::error::{ItcError, Result};
use crate::world_model::config::WmConfig;
use crate::world_model::layers::cast;
use crate::world_model::model::WorldModel;
use crate::world_model::params::Params;

const MAGIC: &[u8; 4] = b"ITCW";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: WmConfig,
    /// Hash of the codebook the model was trained against.
    pub codebook_hash: String,
    pub param_count: usize,
    pub train_steps: usize,
    pub seed: u64,
}

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| ItcError::Format(format!("{v} does not fit a u32 field")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

pub fn write_checkpoint<W: Write, F: NdFloat>(mut w: W, model: &WorldModel<F>, meta: &CheckpointMeta) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(&mut w, VERSION as usize)?;
    let json = serde_json::to_vec(meta)?;
    put_u32(&mut w, json.len())?;
    w.write_all(&json)?;
    let info = model.params().tensor_info();
    put_u32(&mut w, info.len())?;
    for (t, data) in info.iter().zip(model.params().slices()) {
        put_u32(&mut w, t.name.len())?;
        w.write_all(t.name.as_bytes())?;
        put_u32(&mut w, t.dims.len())?;
        for &d in &t.dims {
            put_u32(&mut w, d)?;
        }
        for &v in data {
            w.write_all(&v.to_f32().expect("float").to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read, F: NdFloat>(mut r: R) -> Result<(WorldModel<F>, CheckpointMeta)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ItcError::Format("not a world-model checkpoint".into()));
    }
    let version = get_u32(&mut r)?;
    if version != VERSION as usize {
        return Err(ItcError::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut json = vec![0u8; get_u32(&mut r)?];
    r.read_exact(&mut json)?;
    let meta: CheckpointMeta = serde_json::from_slice(&json)?;
    meta.config.validate()?;
    let mut params = Params::<F>::init(&meta.config, 0);
    let info = params.tensor_info();
    let count = get_u32(&mut r)?;
    if count != info.len() {
        return Err(ItcError::Format(format!("{count} tensors, config implies {}", info.len())));
    }
    for (t, slot) in info.iter().zip(params.slices_mut()) {
        let mut name = vec![0u8; get_u32(&mut r)?];
        r.read_exact(&mut name)?;
        let rank = get_u32(&mut r)?;
        let dims = (0..rank).map(|_| get_u32(&mut r)).collect::<Result<Vec<_>>>()?;
        if name != t.name.as_bytes() || dims != t.dims {
            return Err(ItcError::Format(format!(
                "tensor {} {:?} where {} {:?} was expected",
                String::from_utf8_lossy(&name),
                dims,
                t.name,
                t.dims
            )));
        }
        let mut buf = vec![0u8; 4 * slot.len()];
        r.read_exact(&mut buf)?;
        for (v, b) in slot.iter_mut().zip(buf.chunks_exact(4)) {
            *v = cast(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64);
        }
    }
    if meta.param_count != params.num_params() {
        return Err(ItcError::Format(format!(
            "metadata claims {} parameters, tensors hold {}",
            meta.param_count,
            params.num_params()
        )));
    }
    let model = WorldModel::from_params(meta.config.clone(), params)?;
    Ok((model, meta))
}

/// Rounds every parameter through `f32`, matching a save/load round trip.
pub fn quantize_f32<F: NdFloat>(params: &mut Params<F>) {
    params.for_each_mut(|s| s.iter_mut().for_each(|v| *v = cast(v.to_f32().expect("float") as f64)));
}
