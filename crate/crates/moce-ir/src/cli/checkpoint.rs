//! Checkpoint container.
//!
//! Layout: magic `MOCE`, format version (u16 LE), manifest length (u32 LE),
//! a textual manifest (`key=value` lines plus one `tensor=` directory line
//! per tensor: name, shape, byte offset, element count), the payload of
//! little-endian f32 values in directory order, and a trailing CRC32 (IEEE)
//! of the payload. CRC mismatches are hard errors.

use std::fs;
use std::path::Path;

use crate::error::{MoceError, Result};
use crate::moce::params::ParamId;
use crate::network::Model;
use crate::trainer::AdamState;

pub const MAGIC: &[u8; 4] = b"MOCE";
pub const VERSION: u16 = 1;

/// Table-driven CRC32 (IEEE 802.3 polynomial, reflected).
pub fn crc32(data: &[u8]) -> u32 {
    const POLY: u32 = 0xEDB8_8320;
    let mut table = [0u32; 256];
    for (i, entry) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { POLY ^ (c >> 1) } else { c >> 1 };
        }
        *entry = c;
    }
    let mut crc = 0xFFFF_FFFFu32;
    for &b in data {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    crc ^ 0xFFFF_FFFF
}

#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    /// Ordered `key=value` metadata.
    pub meta: Vec<(String, String)>,
    /// Named tensors, f64 values round-tripped through f32 storage.
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, d)| (s.as_slice(), d.as_slice()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut manifest = String::new();
        for (k, v) in &self.meta {
            manifest.push_str(&format!("{k}={v}\n"));
        }
        let mut offset = 0usize;
        for (name, shape, data) in &self.tensors {
            let dims = shape
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x");
            manifest.push_str(&format!("tensor={name};{dims};{offset};{}\n", data.len()));
            offset += data.len() * 4;
        }

        let mut payload = Vec::with_capacity(offset);
        for (_, _, data) in &self.tensors {
            for v in data {
                payload.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }

        let mut bytes = Vec::with_capacity(10 + manifest.len() + payload.len() + 4);
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        bytes.extend_from_slice(manifest.as_bytes());
        bytes.extend_from_slice(&payload);
        bytes.extend_from_slice(&crc32(&payload).to_le_bytes());
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path)?;
        if bytes.len() < 14 || &bytes[0..4] != MAGIC {
            return Err(MoceError::Corrupt(format!(
                "{}: missing MOCE magic",
                path.display()
            )));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(MoceError::Corrupt(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mlen = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
        if bytes.len() < 10 + mlen + 4 {
            return Err(MoceError::Corrupt("truncated manifest".into()));
        }
        let manifest = std::str::from_utf8(&bytes[10..10 + mlen])
            .map_err(|_| MoceError::Corrupt("manifest is not utf-8".into()))?;
        let payload = &bytes[10 + mlen..bytes.len() - 4];
        let stored_crc = u32::from_le_bytes(
            bytes[bytes.len() - 4..]
                .try_into()
                .expect("4 trailing bytes"),
        );
        let actual = crc32(payload);
        if actual != stored_crc {
            return Err(MoceError::Corrupt(format!(
                "payload CRC mismatch: stored {stored_crc:#010x}, computed {actual:#010x}"
            )));
        }

        let mut ck = Checkpoint::default();
        for line in manifest.lines() {
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(MoceError::Corrupt(format!("manifest line '{line}'")));
            };
            if key == "tensor" {
                let parts: Vec<&str> = value.split(';').collect();
                if parts.len() != 4 {
                    return Err(MoceError::Corrupt(format!("tensor line '{value}'")));
                }
                let name = parts[0].to_string();
                let shape: Vec<usize> = if parts[1].is_empty() {
                    Vec::new()
                } else {
                    parts[1]
                        .split('x')
                        .map(|d| {
                            d.parse::<usize>()
                                .map_err(|_| MoceError::Corrupt(format!("bad dim in '{value}'")))
                        })
                        .collect::<Result<_>>()?
                };
                let offset: usize = parts[2]
                    .parse()
                    .map_err(|_| MoceError::Corrupt(format!("bad offset in '{value}'")))?;
                let count: usize = parts[3]
                    .parse()
                    .map_err(|_| MoceError::Corrupt(format!("bad count in '{value}'")))?;
                if shape.iter().product::<usize>() != count {
                    return Err(MoceError::Corrupt(format!(
                        "tensor {name}: shape {shape:?} does not cover {count} elements"
                    )));
                }
                if offset + count * 4 > payload.len() {
                    return Err(MoceError::Corrupt(format!(
                        "tensor {name} extends past the payload"
                    )));
                }
                let mut data = Vec::with_capacity(count);
                for i in 0..count {
                    let at = offset + i * 4;
                    let v = f32::from_le_bytes(
                        payload[at..at + 4].try_into().expect("4-byte slice"),
                    );
                    data.push(v as f64);
                }
                ck.tensors.push((name, shape, data));
            } else {
                ck.meta.push((key.to_string(), value.to_string()));
            }
        }
        Ok(ck)
    }
}

/// Bundle a model (and optionally optimizer state) into a checkpoint.
pub fn checkpoint_from_model(
    model: &Model,
    adam: Option<&AdamState>,
    meta: Vec<(String, String)>,
) -> Checkpoint {
    let mut ck = Checkpoint {
        meta,
        tensors: Vec::new(),
    };
    for (_, name, t) in model.params.iter() {
        ck.tensors
            .push((name.to_string(), t.shape().to_vec(), t.data().to_vec()));
    }
    if let Some(state) = adam {
        for (idx, (_, name, t)) in model.params.iter().enumerate() {
            ck.tensors.push((
                format!("adam.m.{name}"),
                t.shape().to_vec(),
                state.m[idx].clone(),
            ));
            ck.tensors.push((
                format!("adam.v.{name}"),
                t.shape().to_vec(),
                state.v[idx].clone(),
            ));
        }
    }
    ck
}

/// Write checkpoint tensors back into a freshly built model; optionally
/// restore the optimizer moments.
pub fn restore_into_model(ck: &Checkpoint, model: &mut Model) -> Result<Option<AdamState>> {
    let ids: Vec<(ParamId, String, Vec<usize>)> = model
        .params
        .iter()
        .map(|(id, name, t)| (id, name.to_string(), t.shape().to_vec()))
        .collect();
    for (id, name, shape) in &ids {
        let Some((ck_shape, data)) = ck.tensor(name) else {
            return Err(MoceError::Corrupt(format!(
                "checkpoint is missing tensor {name}"
            )));
        };
        if ck_shape != shape.as_slice() {
            return Err(MoceError::Corrupt(format!(
                "tensor {name}: shape {ck_shape:?} in checkpoint, {shape:?} in model"
            )));
        }
        model
            .params
            .tensor_mut(*id)
            .data_mut()
            .copy_from_slice(data);
    }

    let has_adam = ids
        .iter()
        .all(|(_, name, _)| ck.tensor(&format!("adam.m.{name}")).is_some());
    if !has_adam {
        return Ok(None);
    }
    let mut state = AdamState::new(&model.params);
    for (idx, (_, name, _)) in ids.iter().enumerate() {
        let (_, m) = ck
            .tensor(&format!("adam.m.{name}"))
            .expect("checked above");
        let (_, v) = ck
            .tensor(&format!("adam.v.{name}"))
            .ok_or_else(|| MoceError::Corrupt(format!("adam.v.{name} missing")))?;
        state.m[idx].copy_from_slice(m);
        state.v[idx].copy_from_slice(v);
    }
    state.step = ck
        .meta_value("adam.step")
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    Ok(Some(state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ModelConfig;

    #[test]
    fn crc32_known_vector() {
        // The classic check value for the IEEE polynomial.
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
    }

    #[test]
    fn round_trip_is_exact_at_f32() {
        let model = Model::build(ModelConfig::desk_default(), 9).unwrap();
        let ck = checkpoint_from_model(
            &model,
            None,
            vec![("train.step".into(), "0".into())],
        );
        let dir = std::env::temp_dir().join("moce_ck_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.moce");
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.meta_value("train.step"), Some("0"));
        for (name, shape, data) in &ck.tensors {
            let (ls, ld) = loaded.tensor(name).unwrap();
            assert_eq!(ls, shape.as_slice());
            for (a, b) in data.iter().zip(ld) {
                assert_eq!(*a as f32, *b as f32, "tensor {name} not exact at f32");
            }
        }

        // A fresh model restored from the file matches at f32 precision.
        let mut restored = Model::build(ModelConfig::desk_default(), 1234).unwrap();
        restore_into_model(&loaded, &mut restored).unwrap();
        for ((_, _, a), (_, _, b)) in model.params.iter().zip(restored.params.iter()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn corrupted_payload_fails_crc() {
        let model = Model::build(ModelConfig::desk_default(), 9).unwrap();
        let ck = checkpoint_from_model(&model, None, Vec::new());
        let dir = std::env::temp_dir().join("moce_ck_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("corrupt.moce");
        ck.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xFF;
        std::fs::write(&path, bytes).unwrap();
        match Checkpoint::load(&path) {
            Err(MoceError::Corrupt(msg)) => assert!(msg.contains("CRC")),
            other => panic!("expected CRC error, got {other:?}"),
        }
        std::fs::remove_file(&path).ok();
    }
}
