//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DLAB" | version u32 | tensor count u32
//! per tensor: name len u16 | name utf-8 | dtype u8 (0 = f32) | rank u8 | dims u32 × rank | f32 payload
//! step u64 | rng seed [u8; 32] | rng stream u64 | rng word position u128
//! model config: 8 × u32 (layers, d_model, heads, head_dim, hidden, vocab, visual_tokens, visual_dim)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{LabError, Result};
use crate::model::{ModelConfig, TinyLmm};
use crate::params::ParamStore;
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"DLAB";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Model parameters plus training position.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: TinyLmm,
    pub step: u64,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn new(model: TinyLmm, step: u64, rng: RngState) -> Self {
        Self { model, step, rng }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = self.model.params();
        let mut out = Vec::with_capacity(64 + params.numel() * 4);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&u32_of(params.len(), "tensor count")?.to_le_bytes());
        for (name, t) in params.iter() {
            let len = u16::try_from(name.len()).map_err(|_| LabError::Format(format!("name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&u32_of(d, "dimension")?.to_le_bytes());
            }
            out.extend_from_slice(&t.to_le_bytes());
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        let c = self.model.config();
        for v in [c.layers, c.d_model, c.heads, c.head_dim, c.hidden, c.vocab, c.visual_tokens, c.visual_dim] {
            out.extend_from_slice(&u32_of(v, "config value")?.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(LabError::Format("bad magic; not a checkpoint".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(LabError::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name =
                std::str::from_utf8(r.take(len)?).map_err(|_| LabError::Format("tensor name is not UTF-8".into()))?.to_string();
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return Err(LabError::Format(format!("unsupported dtype {dtype} for {name}")));
            }
            let rank = r.u8()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let numel = numel.ok_or_else(|| LabError::Format(format!("tensor {name} too large")))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| LabError::Format("size overflow".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            let t = Tensor::new(shape, data).map_err(|e| LabError::Format(format!("tensor {name}: {e}")))?;
            if params.contains(&name) {
                return Err(LabError::Format(format!("duplicate tensor {name}")));
            }
            params.insert(name, t);
        }
        let step = r.u64()?;
        let mut seed = [0u8; 32];
        seed.copy_from_slice(r.take(32)?);
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let mut c = [0usize; 8];
        for v in &mut c {
            *v = r.u32()? as usize;
        }
        if r.pos != bytes.len() {
            return Err(LabError::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
        }
        let config = ModelConfig {
            layers: c[0],
            d_model: c[1],
            heads: c[2],
            head_dim: c[3],
            hidden: c[4],
            vocab: c[5],
            visual_tokens: c[6],
            visual_dim: c[7],
        };
        let model = TinyLmm::from_params(config, params).map_err(|e| LabError::Format(e.to_string()))?;
        Ok(Self { model, step, rng: RngState { seed, stream, word_pos } })
    }
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| LabError::Format(format!("{what} {v} does not fit in u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| LabError::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Write `ckpt` to `path` (via a temporary file renamed into place).
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    let tmp = path.with_extension("dlab.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let model = TinyLmm::seeded(ModelConfig::default(), 3).unwrap();
        Checkpoint::new(model, 42, RngState::capture(&crate::rng::substream(3, "data")))
    }

    #[test]
    fn round_trip_is_byte_stable() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 40);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut bytes = sample().to_bytes().unwrap();
        for n in [0, 3, 12, 100, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..n]), Err(LabError::Format(_))), "{n}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(LabError::Format(_))));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(LabError::Format(_))));
    }
}
