//! Binary checkpoint format: a stage tag, the full config echo, then named
//! tensors (both raw and EMA weights) as {utf-8 name, dtype tag, rank, dims
//! as 64-bit little-endian, row-major payload}. Loads are bit-exact and
//! all-or-nothing.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Ema, Params};
use crate::pipeline::config::PipelineConfig;

const MAGIC: &[u8; 4] = b"SOTC";
const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Vqvae,
    Ar,
    Clvp,
    Diffusion,
    DiffusionFt,
}

impl Stage {
    pub fn tag(&self) -> &'static str {
        match self {
            Stage::Vqvae => "vqvae",
            Stage::Ar => "ar",
            Stage::Clvp => "clvp",
            Stage::Diffusion => "diffusion",
            Stage::DiffusionFt => "diffusion-ft",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "vqvae" => Ok(Stage::Vqvae),
            "ar" => Ok(Stage::Ar),
            "clvp" => Ok(Stage::Clvp),
            "diffusion" => Ok(Stage::Diffusion),
            "diffusion-ft" => Ok(Stage::DiffusionFt),
            other => Err(Error::Config(format!("unknown stage tag {other}"))),
        }
    }
}

pub struct Checkpoint {
    pub stage: Stage,
    pub config: PipelineConfig,
    pub raw: Params,
    pub ema: Params,
}

impl Checkpoint {
    /// Weights used for inference: the EMA shadow by default.
    pub fn inference_params(&self) -> &Params {
        &self.ema
    }
}

fn push_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64], dtype: u8) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dtype);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as i64).to_le_bytes());
    }
    match dtype {
        DTYPE_F64 => {
            for &v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        DTYPE_F32 => {
            for &v in data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        _ => unreachable!(),
    }
}

/// Write a checkpoint with raw weights and the EMA shadow.
pub fn save(
    path: impl AsRef<Path>,
    stage: Stage,
    config: &PipelineConfig,
    params: &Params,
    ema: &Ema,
) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let tag = stage.tag().as_bytes();
    out.push(tag.len() as u8);
    out.extend_from_slice(tag);
    let cfg = config.to_toml();
    out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&((params.len() * 2) as u64).to_le_bytes());
    for (pid, e) in params.iter().enumerate() {
        push_tensor(&mut out, &format!("raw/{}", e.name), &e.shape, &e.value, DTYPE_F64);
        push_tensor(&mut out, &format!("ema/{}", e.name), &e.shape, ema.shadow(pid), DTYPE_F64);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint {
                path: self.path.to_path_buf(),
                reason: "truncated file".into(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// A named tensor read back from a checkpoint.
pub struct TensorEntry {
    pub name: String,
    pub dtype: u8,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn read_entries(path: impl AsRef<Path>) -> Result<(Stage, PipelineConfig, Vec<TensorEntry>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |reason: &str| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(4)? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let tag_len = r.take(1)?[0] as usize;
    let tag = String::from_utf8(r.take(tag_len)?.to_vec()).map_err(|_| corrupt("bad stage tag"))?;
    let stage = Stage::from_tag(&tag)?;
    let cfg_len = r.u64()? as usize;
    let cfg_text = String::from_utf8(r.take(cfg_len)?.to_vec()).map_err(|_| corrupt("bad config echo"))?;
    let config = PipelineConfig::from_toml(&cfg_text)?;
    let n_tensors = r.u64()? as usize;
    let mut entries = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| corrupt("bad tensor name"))?;
        let dtype = r.take(1)?[0];
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = r.i64()?;
            if d < 0 {
                return Err(corrupt("negative dimension"));
            }
            shape.push(d as usize);
        }
        let numel: usize = shape.iter().product();
        let data = match dtype {
            DTYPE_F64 => r
                .take(numel * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            DTYPE_F32 => r
                .take(numel * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            other => return Err(corrupt(&format!("unknown dtype tag {other}"))),
        };
        entries.push(TensorEntry {
            name,
            dtype,
            shape,
            data,
        });
    }
    if r.pos != bytes.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok((stage, config, entries))
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let (stage, config, entries) = read_entries(path)?;
    let mut raw = Params::new();
    let mut ema_values = Vec::new();
    for e in &entries {
        if let Some(name) = e.name.strip_prefix("raw/") {
            raw.add(name, e.shape.clone(), e.data.clone());
        } else if e.name.starts_with("ema/") {
            ema_values.push(e);
        }
    }
    let mut ema = raw.clone();
    for e in ema_values {
        let name = e.name.strip_prefix("ema/").unwrap();
        let entry = ema.get_mut(name);
        if entry.shape != e.shape {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                reason: format!("ema/raw shape mismatch for {name}"),
            });
        }
        entry.value = e.data.clone();
    }
    Ok(Checkpoint {
        stage,
        config,
        raw,
        ema,
    })
}
