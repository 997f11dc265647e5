//! Versioned binary checkpoints. All integers and floats are little-endian;
//! tensors are stored as `f64` whatever the training precision.

use std::io::{Read, Write};

use super::optim::{AdamWConfig, Optimizer};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SDTCKPT\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    /// Free-form echo of the run configuration.
    pub config: String,
    pub seed: u64,
    pub params: Vec<(String, Tensor<T>)>,
    pub optimizer: Option<Optimizer<T>>,
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_f64(w: &mut impl Write, v: f64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_str(w: &mut impl Write, s: &str) -> Result<()> {
    put_u32(w, s.len() as u32)?;
    Ok(w.write_all(s.as_bytes())?)
}

fn put_tensor<T: Scalar>(w: &mut impl Write, t: &Tensor<T>) -> Result<()> {
    put_u32(w, t.rank() as u32)?;
    for &d in t.shape() {
        put_u64(w, d as u64)?;
    }
    for v in t.data() {
        put_f64(w, v.as_f64())?;
    }
    Ok(())
}

fn get<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
    Ok(b)
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(get(r)?))
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(get(r)?))
}

fn get_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_le_bytes(get(r)?))
}

fn get_str(r: &mut impl Read) -> Result<String> {
    let n = get_u32(r)? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b).map_err(|e| Error::Checkpoint(format!("truncated string: {e}")))?;
    String::from_utf8(b).map_err(|_| Error::Checkpoint("string is not valid UTF-8".into()))
}

fn get_tensor<T: Scalar>(r: &mut impl Read) -> Result<Tensor<T>> {
    let rank = get_u32(r)? as usize;
    if rank > 8 {
        return Err(Error::Checkpoint(format!("implausible tensor rank {rank}")));
    }
    let shape = (0..rank).map(|_| get_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| get_f64(r).map(T::of)).collect::<Result<Vec<_>>>()?;
    Tensor::new(shape, data)
}

pub fn save_checkpoint<T: Scalar>(
    w: &mut impl Write,
    config: &str,
    seed: u64,
    params: &ParamStore<T>,
    optimizer: Option<&Optimizer<T>>,
) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    put_str(w, config)?;
    put_u64(w, seed)?;
    put_u32(w, params.len() as u32)?;
    for (_, name, t) in params.iter() {
        put_str(w, name)?;
        put_tensor(w, t)?;
    }
    match optimizer {
        None => w.write_all(&[0])?,
        Some(opt) => {
            w.write_all(&[1])?;
            let c = &opt.config;
            for v in [c.lr, c.min_lr, c.beta1, c.beta2, c.eps, c.weight_decay] {
                put_f64(w, v)?;
            }
            put_u64(w, c.warmup_steps)?;
            put_u64(w, c.total_steps)?;
            put_u64(w, opt.step)?;
            for (m, v) in opt.m.iter().zip(&opt.v) {
                put_tensor(w, m)?;
                put_tensor(w, v)?;
            }
        }
    }
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(r: &mut impl Read) -> Result<Checkpoint<T>> {
    if &get::<8>(r)? != MAGIC {
        return Err(Error::Checkpoint("bad magic header".into()));
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let config = get_str(r)?;
    let seed = get_u64(r)?;
    let count = get_u32(r)? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name = get_str(r)?;
        params.push((name, get_tensor(r)?));
    }
    let optimizer = match get::<1>(r)?[0] {
        0 => None,
        1 => {
            let mut f = [0.0; 6];
            for v in &mut f {
                *v = get_f64(r)?;
            }
            let config = AdamWConfig {
                lr: f[0],
                min_lr: f[1],
                beta1: f[2],
                beta2: f[3],
                eps: f[4],
                weight_decay: f[5],
                warmup_steps: get_u64(r)?,
                total_steps: get_u64(r)?,
            };
            let step = get_u64(r)?;
            let (mut m, mut v) = (Vec::with_capacity(count), Vec::with_capacity(count));
            for _ in 0..count {
                m.push(get_tensor(r)?);
                v.push(get_tensor(r)?);
            }
            Some(Optimizer { config, step, m, v })
        }
        b => return Err(Error::Checkpoint(format!("bad optimizer flag {b}"))),
    };
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    Ok(Checkpoint { config, seed, params, optimizer })
}
