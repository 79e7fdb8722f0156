//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "STARCKPT"
//! version      u32
//! payload_len  u64
//! payload      payload_len bytes
//! crc32        u32      CRC-32 (IEEE) of payload
//!
//! payload:
//!   config_len   u32, then config_len bytes of JSON (ModelConfig)
//!   step_count   u64
//!   n_tensors    u32
//!   n_tensors ×  { name_len u16, name bytes, rows u32, cols u32,
//!                  rows·cols f32 values }
//!   has_optim    u8
//!   if has_optim == 1:
//!     learning_rate f64, beta1 f64, beta2 f64, epsilon f64,
//!     t u64, grad_accum_steps u32,
//!     first moments then second moments: n_tensors × rows·cols f32 each,
//!     in tensor order
//! ```
//!
//! Gradients still pending in an accumulator are not stored.

use std::fs;
use std::path::Path;

use super::optim::{restore, OptimState};
use super::params::Params;
use super::{Model, ModelConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"STARCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(model: &Model, optim: Option<&OptimState>) -> Vec<u8> {
    let mut p = Vec::new();
    let config = serde_json::to_vec(&model.config).expect("config serializes");
    p.extend_from_slice(&(config.len() as u32).to_le_bytes());
    p.extend_from_slice(&config);
    p.extend_from_slice(&model.step_count.to_le_bytes());
    let tensors = model.params.tensors();
    p.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        p.extend_from_slice(&(name.len() as u16).to_le_bytes());
        p.extend_from_slice(name.as_bytes());
        p.extend_from_slice(&(t.rows as u32).to_le_bytes());
        p.extend_from_slice(&(t.cols as u32).to_le_bytes());
        t.data.iter().for_each(|x| p.extend_from_slice(&x.to_le_bytes()));
    }
    match optim {
        None => p.push(0),
        Some(o) => {
            p.push(1);
            for x in [o.learning_rate, o.beta1, o.beta2, o.epsilon] {
                p.extend_from_slice(&x.to_le_bytes());
            }
            p.extend_from_slice(&o.t.to_le_bytes());
            p.extend_from_slice(&(o.grad_accum_steps as u32).to_le_bytes());
            for moments in [&o.first_moment, &o.second_moment] {
                for (_, t) in moments.tensors() {
                    t.data.iter().for_each(|x| p.extend_from_slice(&x.to_le_bytes()));
                }
            }
        }
    }
    let mut out = Vec::with_capacity(p.len() + 24);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(p.len() as u64).to_le_bytes());
    out.extend_from_slice(&p);
    out.extend_from_slice(&crc32fast::hash(&p).to_le_bytes());
    out
}

pub fn save_checkpoint(model: &Model, optim: Option<&OptimState>, path: &Path) -> Result<()> {
    fs::write(path, write_checkpoint(model, optim)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, out: &mut [f32]) -> Result<()> {
        let bytes = self.take(n * 4)?;
        for (o, c) in out.iter_mut().zip(bytes.chunks_exact(4)) {
            *o = f32::from_le_bytes(c.try_into().unwrap());
        }
        Ok(())
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<(Model, Option<OptimState>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let len = r.u64()? as usize;
    let payload = r.take(len)?;
    let crc = r.u32()?;
    if crc != crc32fast::hash(payload) {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after checksum".into()));
    }

    let mut r = Reader { buf: payload, pos: 0 };
    let clen = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(clen)?)
        .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    config.validate()?;
    let step_count = r.u64()?;
    let mut params = Params::<f32>::skeleton(&config);
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let n = r.u32()? as usize;
    if n != names.len() {
        return Err(Error::Checkpoint(format!(
            "{n} tensors stored, configuration implies {}",
            names.len()
        )));
    }
    for (expected, t) in names.iter().zip(params.tensors_mut()) {
        let nlen = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
        if name != expected || rows != t.rows || cols != t.cols {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` ({rows}×{cols}) does not match expected `{expected}` ({}×{})",
                t.rows, t.cols
            )));
        }
        r.f32s(rows * cols, &mut t.data)?;
    }
    let model = Model {
        config,
        params,
        step_count,
    };
    let optim = match r.u8()? {
        0 => None,
        1 => {
            let (lr, b1, b2, eps) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
            let t = r.u64()?;
            let accum = r.u32()? as usize;
            let mut m = model.params.zeros_like();
            let mut v = model.params.zeros_like();
            for moments in [&mut m, &mut v] {
                for t in moments.tensors_mut() {
                    let n = t.len();
                    r.f32s(n, &mut t.data)?;
                }
            }
            Some(restore(&model, lr, (b1, b2), eps, accum, t, m, v))
        }
        other => return Err(Error::Checkpoint(format!("bad optimizer flag {other}"))),
    };
    if r.pos != payload.len() {
        return Err(Error::Checkpoint("unconsumed payload bytes".into()));
    }
    if !model.all_finite() {
        return Err(Error::Checkpoint("non-finite parameter values".into()));
    }
    Ok((model, optim))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, Option<OptimState>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{make_codebook, synth_utterance, DomainSpec, Vocab};
    use crate::model::{backward_and_step, init_model};

    fn trained() -> (Model, OptimState) {
        let cfg = ModelConfig {
            model_dim: 16,
            ff_dim: 16,
            heads: 2,
            ..ModelConfig::default()
        };
        let mut m = init_model(&cfg).unwrap();
        let mut o = OptimState::new(&m, 1e-3, 1).unwrap();
        let cb = make_codebook(&Vocab::default(), 16, 2).unwrap();
        let u = synth_utterance(&DomainSpec::clean("s"), &cb, 5, 1, "u").unwrap();
        let g = m.loss_graph(&u, u.reference.as_ref().unwrap(), None).unwrap();
        backward_and_step(&mut m, &mut o, &g).unwrap();
        (m, o)
    }

    #[test]
    fn round_trip_is_lossless() {
        let (m, o) = trained();
        let bytes = write_checkpoint(&m, Some(&o));
        let (m2, o2) = read_checkpoint(&bytes).unwrap();
        assert_eq!(m, m2);
        assert_eq!(Some(o), o2);
        let (m3, o3) = read_checkpoint(&write_checkpoint(&m, None)).unwrap();
        assert_eq!(m, m3);
        assert!(o3.is_none());
    }

    #[test]
    fn corruption_and_version_are_detected() {
        let (m, _) = trained();
        let bytes = write_checkpoint(&m, None);
        let mut flipped = bytes.clone();
        flipped[200] ^= 0x40;
        assert!(matches!(read_checkpoint(&flipped), Err(Error::Checkpoint(_))));
        assert!(read_checkpoint(&bytes[..bytes.len() - 9]).is_err());
        let mut versioned = bytes.clone();
        versioned[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            read_checkpoint(&versioned),
            Err(Error::Version { found: 7, expected: 1 })
        ));
    }
}
