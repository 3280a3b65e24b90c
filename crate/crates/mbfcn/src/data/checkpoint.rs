//! Binary checkpoint format, little-endian throughout:
//!   magic "MBFC" | version u32 | config text (u32 length + UTF-8 bytes) |
//!   tensor count u32 | per tensor: name (u16 length + bytes), 4 dims u32,
//!   data as f32.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelParams, ParamEntry};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MBFC";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(params: &ModelParams<f32>, config_text: &str, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = config_text.as_bytes();
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg);
    buf.extend_from_slice(&(params.entries.len() as u32).to_le_bytes());
    for e in &params.entries {
        let name = e.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        for d in e.tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in e.tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    cursor: Cursor<&'a [u8]>,
}

impl<'a> Reader<'a> {
    fn exact(&mut self, out: &mut [u8]) -> Result<()> {
        let offset = self.cursor.position();
        self.cursor.read_exact(out).map_err(|_| {
            Error::Format(format!("unexpected end of file at byte offset {offset}"))
        })
    }

    fn u16(&mut self) -> Result<u16> {
        let mut b = [0u8; 2];
        self.exact(&mut b)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn f32(&mut self) -> Result<f32> {
        let mut b = [0u8; 4];
        self.exact(&mut b)?;
        Ok(f32::from_le_bytes(b))
    }
}

/// Loads parameters and the embedded config text. Fixed resampling kernels
/// are re-flagged immutable by their name prefix.
pub fn load_checkpoint(path: &Path) -> Result<(ModelParams<f32>, String)> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        cursor: Cursor::new(bytes.as_slice()),
    };

    let mut magic = [0u8; 4];
    r.exact(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {magic:?} (want {CHECKPOINT_MAGIC:?})"
        )));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (want {CHECKPOINT_VERSION})"
        )));
    }
    let cfg_len = r.u32()? as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    r.exact(&mut cfg_bytes)?;
    let config_text = String::from_utf8(cfg_bytes)
        .map_err(|_| Error::Format("checkpoint config text is not UTF-8".into()))?;

    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Format("checkpoint tensor name is not UTF-8".into()))?;
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = r.u32()? as usize;
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(r.f32()?);
        }
        let trainable = !name.starts_with("filler.");
        entries.push(ParamEntry {
            name,
            tensor: Tensor::new(shape, data)?,
            trainable,
        });
    }
    Ok((ModelParams { entries }, config_text))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("mbfcn_ckpt_tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn save_load_bit_identical() {
        let params = build_model::<f32>(&ModelConfig::default(), 21).unwrap();
        let path = tmp("roundtrip.ckpt");
        save_checkpoint(&params, "train.seed = 21\n", &path).unwrap();
        let (back, cfg) = load_checkpoint(&path).unwrap();
        assert_eq!(cfg, "train.seed = 21\n");
        assert_eq!(back.entries.len(), params.entries.len());
        for (a, b) in params.entries.iter().zip(&back.entries) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.trainable, b.trainable);
            assert_eq!(a.tensor.shape(), b.tensor.shape());
            // Bit-level equality.
            for (x, y) in a.tensor.data().iter().zip(b.tensor.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn truncation_names_byte_offset() {
        let params = build_model::<f32>(&ModelConfig::default(), 3).unwrap();
        let path = tmp("trunc.ckpt");
        save_checkpoint(&params, "", &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Format(msg)) => {
                assert!(msg.contains("unexpected end of file"), "{msg}");
                assert!(msg.contains("byte offset"), "{msg}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_magic_rejected() {
        let path = tmp("magic.ckpt");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));

        // Wrong version, right magic.
        let mut bytes = CHECKPOINT_MAGIC.to_vec();
        bytes.extend_from_slice(&7u32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Format(msg)) => assert!(msg.contains("version"), "{msg}"),
            other => panic!("expected version error, got {other:?}"),
        }
    }
}
