//! Binary checkpoints.
//!
//! Layout, all integers little-endian `u32`:
//! `"MDC1"`, config text length, config text (`key=value` lines), tensor
//! count, then per tensor its name length, name, `n c h w` and the `f64`
//! payload. Batch-norm statistics are stored as `<name>.mean` and
//! `<name>.var` tensors after the parameters.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{RunningStats, Shape, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MDC1";

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&u32::try_from(v).expect("checkpoint field fits u32").to_le_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u32(buf, name.len());
    buf.extend_from_slice(name.as_bytes());
    for d in t.shape().dims() {
        put_u32(buf, d);
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn stat_tensors(stats: &RunningStats) -> (Tensor, Tensor) {
    let s = Shape::new(1, stats.channels(), 1, 1);
    (
        Tensor::from_parts(s, stats.mean.clone()),
        Tensor::from_parts(s, stats.var.clone()),
    )
}

pub fn encode(model: &Model) -> Vec<u8> {
    let store = model.store();
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    let cfg = model.config().to_text();
    put_u32(&mut buf, cfg.len());
    buf.extend_from_slice(cfg.as_bytes());
    put_u32(&mut buf, store.params().len() + 2 * store.stats().len());
    for p in store.params() {
        put_tensor(&mut buf, &p.name, &p.value);
    }
    for (name, stats) in store.stats() {
        let (mean, var) = stat_tensors(stats);
        put_tensor(&mut buf, &format!("{name}.mean"), &mean);
        put_tensor(&mut buf, &format!("{name}.var"), &var);
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn text(&mut self) -> std::result::Result<&'a str, String> {
        let n = self.u32()?;
        std::str::from_utf8(self.take(n)?).map_err(|e| e.to_string())
    }

    fn tensor(&mut self) -> std::result::Result<(&'a str, Tensor), String> {
        let name = self.text()?;
        let dims = [self.u32()?, self.u32()?, self.u32()?, self.u32()?];
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let raw = self.take(shape.numel() * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| format!("tensor {name}: {e}"))?;
        Ok((name, t))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Model, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let cfg = ModelConfig::from_text(r.text()?).map_err(|e| format!("config: {e}"))?;
    let mut model = Model::build(cfg).map_err(|e| e.to_string())?;
    let count = r.u32()?;
    let store = model.store_mut();
    let expected = store.params().len() + 2 * store.stats().len();
    if count != expected {
        return Err(format!("expected {expected} tensors for this config, found {count}"));
    }
    let mut load = |slot: &mut Tensor, want: &str| -> std::result::Result<(), String> {
        let (name, t) = r.tensor()?;
        if name != want {
            return Err(format!("expected tensor {want}, found {name}"));
        }
        if t.shape() != slot.shape() {
            return Err(format!(
                "tensor {name}: shape {} but model expects {}",
                t.shape(),
                slot.shape()
            ));
        }
        *slot = t;
        Ok(())
    };
    for p in store.params_mut() {
        let want = p.name.clone();
        load(&mut p.value, &want)?;
    }
    for (name, stats) in store.stats_mut() {
        let (mut mean, mut var) = stat_tensors(stats);
        load(&mut mean, &format!("{name}.mean"))?;
        load(&mut var, &format!("{name}.var"))?;
        *stats = RunningStats::from_parts(mean.into_data(), var.into_data()).map_err(|e| e.to_string())?;
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(model)
}

/// Writes to a sibling temp file then renames, so readers never observe a
/// partial checkpoint.
pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode(model))
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|msg| Error::format(path, msg))
}
