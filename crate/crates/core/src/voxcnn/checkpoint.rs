//! `VOXR` checkpoint files.
//!
//! Layout (all integers and scalars little-endian):
//!
//! ```text
//! "VOXR"                      magic
//! u32                         format version
//! u32 len, utf-8              model config, `key=value` lines
//! u32 len, utf-8              training metadata, `key=value` lines
//! u32 count, block*           parameters then buffers, canonical order
//! u8                          1 if optimizer state follows, else 0
//!   u64 step, f64 lr, f64 beta1, f64 beta2, f64 eps
//!   u32 count, block*         `adam.m.<param>` / `adam.v.<param>` pairs
//!
//! block := u16 name_len, name, u8 dtype (0 = f32, 1 = f64),
//!          u8 rank, u32 dim * rank, scalar * prod(dims)
//! ```
//!
//! Nothing may follow the last field.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use super::{VoxCnnConfig, VoxCnnModel};
use crate::volgrad::{Adam, AdamConfig, AdamState, Tensor};
use crate::{DType, Error, Result, Scalar};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VOXR";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Provenance stored alongside the weights.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epoch: usize,
    pub val_mse: Option<f64>,
}

impl TrainingMeta {
    fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "epoch={}", self.epoch);
        match self.val_mse {
            Some(v) => {
                let _ = writeln!(s, "val_mse={v:?}");
            }
            None => s.push_str("val_mse=none\n"),
        }
        s
    }

    fn from_text(text: &str) -> std::result::Result<Self, String> {
        let mut meta = TrainingMeta::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("malformed metadata line {line:?}"))?;
            let bad = || format!("invalid metadata value {line:?}");
            match k {
                "seed" => meta.seed = v.parse().map_err(|_| bad())?,
                "epoch" => meta.epoch = v.parse().map_err(|_| bad())?,
                "val_mse" if v == "none" => meta.val_mse = None,
                "val_mse" => meta.val_mse = Some(v.parse().map_err(|_| bad())?),
                _ => return Err(format!("unknown metadata key {k:?}")),
            }
        }
        Ok(meta)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: VoxCnnModel<T>,
    pub optimizer: Option<Adam<T>>,
    pub meta: TrainingMeta,
}

fn put_block<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE.tag());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

fn put_text(out: &mut Vec<u8>, text: &str) {
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
}

pub fn encode_checkpoint<T: Scalar>(
    model: &VoxCnnModel<T>,
    optimizer: Option<&Adam<T>>,
    meta: &TrainingMeta,
) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_text(&mut out, &model.config().to_kv_text());
    put_text(&mut out, &meta.to_text());
    let blocks: Vec<(String, &Tensor<T>)> = model.params().into_iter().chain(model.buffers()).collect();
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for (name, t) in &blocks {
        put_block(&mut out, name, t);
    }
    match optimizer {
        None => out.push(0),
        Some(opt) => {
            out.push(1);
            out.extend_from_slice(&opt.step_count().to_le_bytes());
            for v in [
                opt.config.learning_rate,
                opt.config.beta1,
                opt.config.beta2,
                opt.config.epsilon,
            ] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&(2 * opt.states.len() as u32).to_le_bytes());
            for (name, st) in &opt.states {
                let n = st.m.len();
                let m = Tensor::new(&[n], st.m.clone()).expect("non-empty moment");
                let v = Tensor::new(&[n], st.v.clone()).expect("non-empty moment");
                put_block(&mut out, &format!("adam.m.{name}"), &m);
                put_block(&mut out, &format!("adam.v.{name}"), &v);
            }
        }
    }
    out
}

/// Writes the checkpoint atomically (temporary file, then rename).
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    model: &VoxCnnModel<T>,
    optimizer: Option<&Adam<T>>,
    meta: &TrainingMeta,
) -> Result<()> {
    let bytes = encode_checkpoint(model, optimizer, meta);
    let tmp = path.with_extension("voxr.tmp");
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Checkpoint {
            path: PathBuf::from(self.path),
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!(
                "truncated while reading {what}: need {n} bytes, {} remain",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn text(&mut self, what: &str) -> Result<&'a str> {
        let len = self.u32(what)? as usize;
        let start = self.pos;
        let raw = self.take(len, what)?;
        std::str::from_utf8(raw).map_err(|_| Error::Checkpoint {
            path: PathBuf::from(self.path),
            offset: start as u64,
            message: format!("{what} is not valid UTF-8"),
        })
    }

    fn block<T: Scalar>(&mut self) -> Result<(String, Tensor<T>)> {
        let start = self.pos;
        let name_len = self.u16("block name length")? as usize;
        let name = std::str::from_utf8(self.take(name_len, "block name")?)
            .map_err(|_| self.fail("block name is not valid UTF-8"))?
            .to_string();
        let tag = self.u8("block dtype")?;
        let dtype =
            DType::from_tag(tag).ok_or_else(|| self.fail(format!("unknown dtype tag {tag} in block {name}")))?;
        if dtype != T::DTYPE {
            return Err(self.fail(format!(
                "block {name} stores {} but {} was requested",
                dtype.name(),
                T::DTYPE.name()
            )));
        }
        let rank = self.u8("block rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32("block extent")? as usize);
        }
        if rank == 0 || shape.contains(&0) {
            return Err(self.fail(format!("block {name} has an empty shape {shape:?}")));
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(dtype.size()))
            .ok_or_else(|| self.fail(format!("block {name} extents overflow")))?;
        let payload = self.take(numel, &format!("payload of block {name}"))?;
        let data: Vec<T> = payload.chunks_exact(dtype.size()).map(T::read_le).collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint {
            path: PathBuf::from(self.path),
            offset: start as u64,
            message: e.to_string(),
        })?;
        Ok((name, t))
    }
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8], path: &Path) -> Result<Checkpoint<T>> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        r.pos = 0;
        return Err(r.fail("bad magic, not a VOXR checkpoint"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        r.pos -= 4;
        return Err(r.fail(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let cfg_at = r.pos;
    let config = VoxCnnConfig::from_kv_text(r.text("model config")?).map_err(|e| Error::Checkpoint {
        path: path.into(),
        offset: cfg_at as u64,
        message: e.to_string(),
    })?;
    let meta_at = r.pos;
    let meta = TrainingMeta::from_text(r.text("training metadata")?).map_err(|m| Error::Checkpoint {
        path: path.into(),
        offset: meta_at as u64,
        message: m,
    })?;
    let mut model = VoxCnnModel::<T>::zeroed(config).map_err(|e| Error::Checkpoint {
        path: path.into(),
        offset: cfg_at as u64,
        message: e.to_string(),
    })?;

    let count = r.u32("block count")? as usize;
    let mut blocks = HashMap::new();
    for _ in 0..count {
        let at = r.pos;
        let (name, t) = r.block::<T>()?;
        if blocks.insert(name.clone(), (at, t)).is_some() {
            r.pos = at;
            return Err(r.fail(format!("duplicate block {name}")));
        }
    }
    {
        for (name, slot) in model.params_and_buffers_mut() {
            let (at, t) = blocks
                .remove(&name)
                .ok_or_else(|| r.fail(format!("missing block {name}")))?;
            if t.shape() != slot.shape() {
                r.pos = at;
                return Err(r.fail(format!(
                    "block {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            slot.data_mut().copy_from_slice(t.data());
        }
    }
    if let Some(name) = blocks.keys().min() {
        return Err(r.fail(format!("unexpected block {name}")));
    }

    let optimizer = match r.u8("optimizer flag")? {
        0 => None,
        1 => {
            let step = r.u64("optimizer step")?;
            let config = AdamConfig {
                learning_rate: r.f64("learning rate")?,
                beta1: r.f64("beta1")?,
                beta2: r.f64("beta2")?,
                epsilon: r.f64("epsilon")?,
            };
            let count = r.u32("optimizer block count")? as usize;
            let params = model.params();
            if count != 2 * params.len() {
                return Err(r.fail(format!(
                    "optimizer stores {count} moment blocks, model has {} parameters",
                    params.len()
                )));
            }
            let mut states = Vec::with_capacity(params.len());
            for (name, p) in &params {
                let (mn, m) = r.block::<T>()?;
                let (vn, v) = r.block::<T>()?;
                if mn != format!("adam.m.{name}") || vn != format!("adam.v.{name}") {
                    return Err(r.fail(format!("optimizer blocks {mn}/{vn} do not match parameter {name}")));
                }
                if m.numel() != p.numel() || v.numel() != p.numel() {
                    return Err(r.fail(format!("optimizer moments for {name} have the wrong length")));
                }
                states.push((
                    name.clone(),
                    AdamState {
                        step_count: step,
                        m: m.into_data(),
                        v: v.into_data(),
                        config,
                    },
                ));
            }
            Some(Adam { config, states })
        }
        f => {
            r.pos -= 1;
            return Err(r.fail(format!("invalid optimizer flag {f}")));
        }
    };
    if r.pos != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { model, optimizer, meta })
}
