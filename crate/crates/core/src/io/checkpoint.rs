//! Binary checkpoint format, little-endian throughout, with an integrity
//! digest so a corrupted file can never load as a silently wrong model.
//!
//! Layout:
//!   magic "HCLK" | version u32 | config text (u32 len + bytes)
//!   | step u64 | rng_word_pos u128
//!   | tensor count u32, then per tensor:
//!       name (u16 len + bytes) | ndim u8 | dims u32 each | f64 data
//!       | adam t u64 | adam m f64 data | adam v f64 data
//!   | sha256 of everything above

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::config::RunConfig;
use crate::network::ParamSet;
use crate::tensor::{AdamState, Tensor};
use crate::training::TrainState;

const MAGIC: &[u8; 4] = b"HCLK";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: TrainState,
}

fn put_f64s(out: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn serialize_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = ckpt.config.serialize();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&(ckpt.state.step as u64).to_le_bytes());
    out.extend_from_slice(&ckpt.state.rng_word_pos.to_le_bytes());
    out.extend_from_slice(&(ckpt.state.params.len() as u32).to_le_bytes());
    for ((name, t), adam) in ckpt.state.params.iter().zip(&ckpt.state.adam) {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape.len() as u8);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        put_f64s(&mut out, &t.data);
        out.extend_from_slice(&adam.t.to_le_bytes());
        put_f64s(&mut out, &adam.m);
        put_f64s(&mut out, &adam.v);
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Byte cursor with checkpoint-flavored errors.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated reading {what} at byte {} (need {n}, have {})",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
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

    fn u128(&mut self, what: &str) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(8 * n, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn deserialize_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 32 {
        return Err(Error::Checkpoint("file shorter than its digest".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let expect = Sha256::digest(body);
    if digest != expect.as_slice() {
        return Err(Error::Checkpoint("integrity digest mismatch".into()));
    }

    let mut r = Reader { buf: body, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let cfg_len = r.u32("config length")? as usize;
    let cfg_text = std::str::from_utf8(r.take(cfg_len, "config")?)
        .map_err(|_| Error::Checkpoint("config snapshot is not UTF-8".into()))?;
    let config = RunConfig::parse(cfg_text)?;

    let step = r.u64("step")? as usize;
    let rng_word_pos = r.u128("rng position")?;
    let count = r.u32("tensor count")? as usize;
    let mut params = ParamSet::new();
    let mut adam = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = r.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Checkpoint(format!("tensor {i} name is not UTF-8")))?
            .to_string();
        let ndim = r.take(1, "tensor rank")?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("tensor dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = r.f64s(numel, &format!("tensor '{name}' data"))?;
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::Checkpoint(format!("tensor '{name}': {e}")))?
            .with_grad();
        let t = r.u64("adam t")?;
        let m = r.f64s(numel, &format!("adam m for '{name}'"))?;
        let v = r.f64s(numel, &format!("adam v for '{name}'"))?;
        let mut st = AdamState::new(
            numel,
            config.train.lr,
            config.train.beta1,
            config.train.beta2,
            config.train.adam_eps,
        );
        st.t = t;
        st.m = m;
        st.v = v;
        params.insert(name, tensor);
        adam.push(st);
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after tensor table",
            body.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        config,
        state: TrainState {
            params,
            adam,
            step,
            rng_word_pos,
        },
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, serialize_checkpoint(ckpt))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    deserialize_checkpoint(&bytes)
}
