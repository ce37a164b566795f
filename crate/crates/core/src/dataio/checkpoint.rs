//! Binary checkpoint container.
//!
//! Layout, little-endian: magic `RMIP`, version `u32`, config echo as a
//! length-prefixed `key=value\n` block, tensor count `u32`, then per tensor a
//! length-prefixed name, `ndim: u32`, `ndim` dims as `u32` and the f32 data.

use super::DataError;
use crate::model::{ModelConfig, ModelParams};

pub const CKPT_MAGIC: &[u8; 4] = b"RMIP";
pub const CKPT_VERSION: u32 = 1;
/// Config keys that change the parameter layout.
pub const ARCH_KEYS: [&str; 1] = ["base_channels"];

pub fn checkpoint_bytes(cfg: &ModelConfig, params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let echo: String = cfg.to_pairs().iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    out.extend_from_slice(&(echo.len() as u32).to_le_bytes());
    out.extend_from_slice(echo.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for t in params.tensors() {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], DataError> {
        if self.bytes.len() - self.pos < n {
            return Err(DataError::Truncated { offset: self.pos as u64, what: what.to_string() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn text(&mut self, what: &str) -> Result<&'a str, DataError> {
        let at = self.pos;
        let n = self.u32(what)? as usize;
        std::str::from_utf8(self.take(n, what)?)
            .map_err(|_| DataError::Checkpoint { offset: at as u64, msg: format!("{what} is not UTF-8") })
    }
}

fn parse_echo(text: &str) -> Result<Vec<(String, String)>, DataError> {
    text.lines()
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| DataError::Checkpoint { offset: 0, msg: format!("config line {l:?} has no '='") })
        })
        .collect()
}

/// Decodes a checkpoint. With `expect`, the stored config must agree on every
/// architecture key; that is checked before any tensor is read. Each tensor's
/// name and shape are checked against the implied layout before its data.
pub fn read_checkpoint(bytes: &[u8], expect: Option<&ModelConfig>) -> Result<(ModelConfig, ModelParams), DataError> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != CKPT_MAGIC {
        return Err(DataError::BadMagic);
    }
    let version = cur.u32("version")?;
    if version != CKPT_VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let pairs = parse_echo(cur.text("config echo")?)?;
    if let Some(model) = expect {
        let mine = model.to_pairs();
        for key in ARCH_KEYS {
            let stored = pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.clone()).unwrap_or_default();
            let want = mine.iter().find(|(k, _)| k == key).map(|(_, v)| v.clone()).unwrap_or_default();
            if stored != want {
                return Err(DataError::ConfigMismatch { key: key.to_string(), stored, model: want });
            }
        }
    }
    let cfg = ModelConfig::from_pairs(&pairs)?;
    let layout = ModelParams::init(&cfg, 0)?;

    let count_at = cur.pos;
    let count = cur.u32("tensor count")? as usize;
    if count != layout.len() {
        return Err(DataError::Checkpoint {
            offset: count_at as u64,
            msg: format!("{count} tensors stored, layout has {}", layout.len()),
        });
    }
    let mut stored = Vec::with_capacity(count);
    for slot in layout.tensors() {
        let name = cur.text("tensor name")?.to_string();
        if name != slot.name {
            return Err(DataError::TensorShape { name, msg: format!("expected tensor {} here", slot.name) });
        }
        let ndim = cur.u32("tensor rank")? as usize;
        if ndim > 8 {
            return Err(DataError::TensorShape { name, msg: format!("rank {ndim}") });
        }
        let shape = (0..ndim).map(|_| cur.u32("tensor dims").map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        if shape != slot.shape {
            return Err(DataError::TensorShape {
                name,
                msg: format!("expected shape {:?}, found {shape:?}", slot.shape),
            });
        }
        let raw = cur.take(4 * slot.data.len(), "tensor data")?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        stored.push((name, shape, data));
    }
    if cur.pos != bytes.len() {
        return Err(DataError::Checkpoint {
            offset: cur.pos as u64,
            msg: format!("{} trailing bytes", bytes.len() - cur.pos),
        });
    }
    let params = ModelParams::from_named(&cfg, stored)?;
    Ok((cfg, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(c: usize) -> ModelConfig {
        ModelConfig { base_channels: c, height: 64, width: 64, ..Default::default() }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = ModelParams::init(&cfg(8), 3).unwrap();
        let bytes = checkpoint_bytes(&cfg(8), &p);
        let (c, q) = read_checkpoint(&bytes, Some(&cfg(8))).unwrap();
        assert_eq!(c, cfg(8));
        for (a, b) in p.tensors().iter().zip(q.tensors()) {
            assert_eq!(a.name, b.name);
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(checkpoint_bytes(&c, &q), bytes);
    }

    #[test]
    fn distinct_errors() {
        let p = ModelParams::init(&cfg(8), 3).unwrap();
        let bytes = checkpoint_bytes(&cfg(8), &p);

        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(read_checkpoint(&magic, None), Err(DataError::BadMagic)));

        let mut version = bytes.clone();
        version[4] = 9;
        assert!(matches!(read_checkpoint(&version, None), Err(DataError::UnsupportedVersion(9))));

        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(read_checkpoint(cut, None), Err(DataError::Truncated { .. })));

        assert!(matches!(
            read_checkpoint(&bytes, Some(&cfg(16))),
            Err(DataError::ConfigMismatch { ref key, .. }) if key == "base_channels"
        ));

        // First dim of the first tensor's shape.
        let echo_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let first = 12 + echo_len + 4;
        let name_len = u32::from_le_bytes(bytes[first..first + 4].try_into().unwrap()) as usize;
        let dim0 = first + 4 + name_len + 4;
        let mut tampered = bytes.clone();
        tampered[dim0] ^= 1;
        let err = read_checkpoint(&tampered, None).unwrap_err();
        assert!(matches!(err, DataError::TensorShape { ref name, .. } if name == "backbone.enc1a.weight"), "{err}");
    }
}
