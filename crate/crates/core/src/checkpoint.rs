//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! "DCA1" | version u8
//! vocab, model_dim, heads, layers, train_context: u32 | seed u64 | rope_base f64
//! step u64 | corpus fingerprint [u8; 32]
//! tensor count u32, then per tensor: name length u16, name, ndim u8, dims u32 × ndim
//! f32 payload of every tensor, in table order
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Layout, ModelCheckpoint, ModelConfig};

pub const MAGIC: [u8; 4] = *b"DCA1";
pub const VERSION: u8 = 1;

pub fn encode(ckpt: &ModelCheckpoint) -> Result<Vec<u8>> {
    let cfg = &ckpt.config;
    cfg.validate()?;
    let layout = Layout::new(cfg);
    if ckpt.params.len() != layout.total {
        return Err(Error::DimensionMismatch(format!(
            "{} parameters for a layout of {}",
            ckpt.params.len(),
            layout.total
        )));
    }
    let mut out = Vec::with_capacity(128 + 4 * layout.total);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    for v in [cfg.vocab, cfg.model_dim, cfg.heads, cfg.layers, cfg.train_context] {
        out.extend_from_slice(&u32_of(v)?.to_le_bytes());
    }
    out.extend_from_slice(&cfg.seed.to_le_bytes());
    out.extend_from_slice(&cfg.rope_base.to_le_bytes());
    out.extend_from_slice(&ckpt.step.to_le_bytes());
    out.extend_from_slice(&ckpt.corpus_fingerprint);
    out.extend_from_slice(&u32_of(layout.tensors.len())?.to_le_bytes());
    for t in &layout.tensors {
        out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.shape.len() as u8);
        for d in &t.shape {
            out.extend_from_slice(&u32_of(*d)?.to_le_bytes());
        }
    }
    for p in &ckpt.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    Ok(out)
}

fn u32_of(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::CorruptCheckpoint(format!("{v} does not fit in u32")))
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Truncated);
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array()?) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ModelCheckpoint> {
    let mut r = Reader { buf: bytes };
    if r.take(MAGIC.len()).map_err(|_| Error::BadMagic)? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let config = ModelConfig {
        vocab: r.u32()?,
        model_dim: r.u32()?,
        heads: r.u32()?,
        layers: r.u32()?,
        train_context: r.u32()?,
        seed: r.u64()?,
        rope_base: f64::from_le_bytes(r.array()?),
    };
    let step = r.u64()?;
    let corpus_fingerprint = r.array()?;
    config
        .validate()
        .map_err(|e| Error::CorruptCheckpoint(format!("config: {e}")))?;

    let layout = Layout::new(&config);
    let count = r.u32()?;
    if count != layout.tensors.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{count} tensors, config implies {}",
            layout.tensors.len()
        )));
    }
    for spec in &layout.tensors {
        let len = r.u16()? as usize;
        let name = r.take(len)?;
        let ndim = r.u8()? as usize;
        let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        if name != spec.name.as_bytes() || shape != spec.shape {
            return Err(Error::CorruptCheckpoint(format!(
                "tensor {:?} {shape:?}, expected {:?} {:?}",
                String::from_utf8_lossy(name),
                spec.name,
                spec.shape
            )));
        }
    }
    let payload = r.take(4 * layout.total)?;
    if !r.buf.is_empty() {
        return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", r.buf.len())));
    }
    let params = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunks of 4")))
        .collect();
    Ok(ModelCheckpoint {
        config,
        params,
        step,
        corpus_fingerprint,
    })
}

/// Writes `bytes` to a temporary file beside `path`, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn save(ckpt: &ModelCheckpoint, path: &Path) -> Result<()> {
    write_atomic(path, &encode(ckpt)?)
}

pub fn load(path: &Path) -> Result<ModelCheckpoint> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
