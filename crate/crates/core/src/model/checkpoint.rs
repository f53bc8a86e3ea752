//! Binary checkpoint format, little-endian throughout:
//! magic `DOT5`, u32 version, u32 tensor count, then per tensor a u32 name
//! length, UTF-8 name, u32 rank, u64 dims and the f32 payload.

use std::io::{Read, Write};
use std::path::Path;

use super::tensor::Tensor;
use super::transformer::{ModelConfig, Seq2SeqModel};
use super::ModelError;

const MAGIC: &[u8; 4] = b"DOT5";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(model: &Seq2SeqModel<f32>, mut w: W) -> Result<(), ModelError> {
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(model.params().len() as u32).to_le_bytes())?;
    for (name, t) in model.param_names().iter().zip(model.params()) {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 4);
        for v in t.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_checkpoint(model: &Seq2SeqModel<f32>, path: &Path) -> Result<(), ModelError> {
    let f = std::fs::File::create(path)?;
    write_checkpoint(model, std::io::BufWriter::new(f))
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>, ModelError> {
        let mut buf = Vec::new();
        (&mut self.inner).take(n as u64).read_to_end(&mut buf)?;
        if buf.len() < n {
            return Err(ModelError::Truncated);
        }
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }
}

/// Reads a checkpoint and validates it against `config`.
pub fn read_checkpoint<R: Read>(config: &ModelConfig, r: R) -> Result<Seq2SeqModel<f32>, ModelError> {
    let mut r = Reader { inner: r };
    let mut magic = [0u8; 4];
    let got = r.inner.read(&mut magic)?;
    if got < 4 {
        let rest = r.bytes(4 - got).map_err(|_| ModelError::BadMagic)?;
        magic[got..].copy_from_slice(&rest);
    }
    if &magic != MAGIC {
        return Err(ModelError::BadMagic);
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::UnsupportedVersion(version));
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.bytes(len)?)
            .map_err(|_| ModelError::InvalidConfig("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.bytes(n.checked_mul(4).ok_or(ModelError::Truncated)?)?;
        let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        tensors.push((name, Tensor::new(shape, values).expect("product matches")));
    }
    let mut extra = [0u8; 1];
    if r.inner.read(&mut extra)? != 0 {
        return Err(ModelError::InvalidConfig("trailing bytes after last tensor".into()));
    }
    Seq2SeqModel::from_named(config.clone(), tensors)
}

pub fn load_checkpoint(path: &Path, config: &ModelConfig) -> Result<Seq2SeqModel<f32>, ModelError> {
    let f = std::fs::File::open(path)?;
    read_checkpoint(config, std::io::BufReader::new(f))
}
