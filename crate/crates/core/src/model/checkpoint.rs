//! Binary checkpoint: magic `AIOK`, u32 version, the model config as a
//! key=value text block, the parameter table, and a CRC32 of everything
//! before it. Integers are little-endian; values are stored as f32.

use std::collections::BTreeMap;
use std::path::Path;

use super::{Model, ModelConfig, ParameterStore};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"AIOK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn checkpoint_bytes(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = model.config.to_key_values().to_text();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, t) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, checkpoint_bytes(model)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated(format!("checkpoint ends inside {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        String::from_utf8(self.take(len, what)?.to_vec()).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < MAGIC.len() + 8 {
        return Err(Error::Truncated(format!("checkpoint of {} bytes", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Checkpoint(format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}")));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version { what: "checkpoint".into(), found: version, expected: CHECKPOINT_VERSION });
    }
    let config = ModelConfig::from_key_values(KeyValues::parse(&r.string("config block")?)?)?;
    let count = r.u32("entry count")?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name = r.string("parameter name")?;
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4, &format!("values of {name}"))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("parameter {name}: {e}")))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
        }
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes after parameter table", body.len() - r.pos)));
    }
    let params = ParameterStore::from_tensors(&config, tensors)?;
    Ok(Model::from_parts(config, params))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(s) => Error::Checkpoint(format!("{}: {s}", path.display())),
        e => e,
    })
}
