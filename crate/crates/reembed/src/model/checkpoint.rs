//! Versioned checkpoint container.
//!
//! Layout: magic string, format version, a JSON header (model config, freeze
//! set, adapter config), then named parameter blobs as little-endian f32
//! payloads, then an optional optimizer section (moments plus schedule).
//! Round-trips are bit-exact.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numerics::{OptimizerState, Param, ParamMap};

use super::config::{AdapterConfig, ModelConfig};
use super::state::ModelState;
use super::ModelError;

const MAGIC: &[u8; 8] = b"REEMBCKP";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    frozen: BTreeSet<String>,
    adapter: Option<AdapterConfig>,
}

#[derive(Serialize, Deserialize)]
struct OptHeader {
    step_count: u64,
    schedule: crate::numerics::CosineSchedule,
}

pub fn save(
    state: &ModelState,
    optimizer: Option<&OptimizerState>,
    path: &Path,
) -> Result<(), ModelError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let header = Header {
        config: state.config.clone(),
        frozen: state.frozen.clone(),
        adapter: state.adapter.clone(),
    };
    write_json(&mut w, &header)?;
    write_params(&mut w, &state.params)?;
    match optimizer {
        None => w.write_all(&[0u8])?,
        Some(opt) => {
            w.write_all(&[1u8])?;
            write_json(
                &mut w,
                &OptHeader {
                    step_count: opt.step_count,
                    schedule: opt.schedule.clone(),
                },
            )?;
            write_moments(&mut w, &opt.first_moment)?;
            write_moments(&mut w, &opt.second_moment)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ModelState, Option<OptimizerState>), ModelError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(ModelError::Incompatible(
            "not a checkpoint file (bad magic)".into(),
        ));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(ModelError::Incompatible(format!(
            "checkpoint format version {version}, expected {VERSION}"
        )));
    }
    let header: Header = read_json(&mut r)?;
    let mut config = header.config;
    config
        .vocab
        .rebuild_index()
        .map_err(|e| ModelError::Incompatible(format!("corrupt vocab in header: {e}")))?;
    let params = read_params(&mut r)?;
    let mut state = ModelState {
        config,
        params,
        frozen: header.frozen,
        adapter: header.adapter,
    };
    state
        .config
        .validate()
        .map_err(|e| ModelError::Incompatible(format!("invalid config in checkpoint: {e}")))?;

    let mut flag = [0u8; 1];
    read_exact(&mut r, &mut flag)?;
    let optimizer = if flag[0] == 1 {
        let oh: OptHeader = read_json(&mut r)?;
        let first_moment = read_moments(&mut r)?;
        let second_moment = read_moments(&mut r)?;
        Some(OptimizerState {
            step_count: oh.step_count,
            first_moment,
            second_moment,
            schedule: oh.schedule,
        })
    } else {
        None
    };
    Ok((state, optimizer))
}

/// Load and require the stored config to match `expected`.
pub fn load_matching(
    path: &Path,
    expected: &ModelConfig,
) -> Result<(ModelState, Option<OptimizerState>), ModelError> {
    let (state, opt) = load(path)?;
    if &state.config != expected {
        return Err(ModelError::Incompatible(
            "checkpoint config does not match the requested model config".into(),
        ));
    }
    Ok((state, opt))
}

fn write_json<W: Write, T: Serialize>(w: &mut W, value: &T) -> Result<(), ModelError> {
    let bytes = serde_json::to_vec(value).map_err(|e| ModelError::Config(e.to_string()))?;
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(&bytes)?;
    Ok(())
}

fn read_json<R: Read, T: for<'de> Deserialize<'de>>(r: &mut R) -> Result<T, ModelError> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf)?;
    serde_json::from_slice(&buf)
        .map_err(|e| ModelError::Incompatible(format!("corrupt header: {e}")))
}

fn write_params<W: Write>(w: &mut W, params: &ParamMap) -> Result<(), ModelError> {
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, p) in params {
        write_name(w, name)?;
        w.write_all(&(p.shape.len() as u32).to_le_bytes())?;
        for &d in &p.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &x in &p.data {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_params<R: Read>(r: &mut R) -> Result<ParamMap, ModelError> {
    let n = read_u32(r)? as usize;
    let mut params = ParamMap::new();
    for _ in 0..n {
        let name = read_name(r)?;
        let ndim = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = read_f32s(r, numel)?;
        params.insert(name, Param { shape, data });
    }
    Ok(params)
}

fn write_moments<W: Write>(w: &mut W, m: &BTreeMap<String, Vec<f32>>) -> Result<(), ModelError> {
    w.write_all(&(m.len() as u32).to_le_bytes())?;
    for (name, data) in m {
        write_name(w, name)?;
        w.write_all(&(data.len() as u32).to_le_bytes())?;
        for &x in data {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_moments<R: Read>(r: &mut R) -> Result<BTreeMap<String, Vec<f32>>, ModelError> {
    let n = read_u32(r)? as usize;
    let mut m = BTreeMap::new();
    for _ in 0..n {
        let name = read_name(r)?;
        let len = read_u32(r)? as usize;
        m.insert(name, read_f32s(r, len)?);
    }
    Ok(m)
}

fn write_name<W: Write>(w: &mut W, name: &str) -> Result<(), ModelError> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    Ok(())
}

fn read_name<R: Read>(r: &mut R) -> Result<String, ModelError> {
    let len = read_u32(r)? as usize;
    if len > 1 << 16 {
        return Err(ModelError::Incompatible("oversized name field".into()));
    }
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| ModelError::Incompatible("non-UTF-8 name".into()))
}

fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>, ModelError> {
    let mut bytes = vec![0u8; n * 4];
    read_exact(r, &mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, ModelError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), ModelError> {
    r.read_exact(buf)
        .map_err(|_| ModelError::Incompatible("checkpoint truncated or unreadable".into()))
}
