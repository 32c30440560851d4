//! Bit-exact binary checkpoints.
//!
//! Little-endian layout: magic `"FPNT"`, version `u32` = 1, metadata count
//! `u32` then (key-len `u16`, key UTF-8, val-len `u16`, val UTF-8) pairs,
//! tensor count `u32`, then per tensor: name-len `u16`, name UTF-8, rank
//! `u8`, each dim `u32`, then rank-product IEEE-754 binary32 values in
//! row-major order. Parameters come first in model order, then batch-norm
//! running statistics.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Element;

use super::{build_resnet, Model, ModelConfig, Variant};

pub const MAGIC: &[u8; 4] = b"FPNT";
pub const VERSION: u32 = 1;

/// Serialize a model (parameters, running statistics, metadata) to bytes.
pub fn checkpoint_to_bytes<E: Element>(model: &Model<E>) -> Vec<u8> {
    let meta = model.metadata();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());

    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    for (k, v) in &meta {
        write_str(&mut buf, k);
        write_str(&mut buf, v);
    }

    let params = model.params();
    let bns = model.bn_layers();
    let tensor_count = params.len() + 2 * bns.len();
    buf.extend_from_slice(&(tensor_count as u32).to_le_bytes());
    for p in params {
        write_tensor(&mut buf, &p.name, p.value.shape(), &p.value.data());
    }
    for bn in bns {
        let (mean_name, var_name) = bn.buffer_names();
        let mean = bn.running_mean().borrow();
        write_tensor(&mut buf, &mean_name, &[mean.len()], &mean);
        drop(mean);
        let var = bn.running_var().borrow();
        write_tensor(&mut buf, &var_name, &[var.len()], &var);
    }
    buf
}

/// Save a checkpoint file; see the module docs for the byte format.
pub fn save_checkpoint<E: Element>(model: &Model<E>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint_to_bytes(model)).map_err(|e| Error::io(path, e))
}

/// Load a checkpoint file back into a model.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

/// Rebuild a model from checkpoint bytes, validating magic, version, and
/// per-tensor shape consistency against the embedded configuration.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Model<f32>> {
    let (meta, tensors) = read_raw(bytes)?;
    let config = config_from_meta(&meta)?;
    let model: Model<f32> = build_resnet(config, 0)?;

    let mut loaded = std::collections::HashMap::new();
    for (name, shape, data) in tensors {
        loaded.insert(name, (shape, data));
    }

    for p in model.params() {
        let (shape, data) = loaded.remove(&p.name).ok_or_else(|| Error::CheckpointShape {
            name: p.name.clone(),
            expected: p.value.shape().to_vec(),
            found: vec![],
        })?;
        if shape != p.value.shape() {
            return Err(Error::CheckpointShape {
                name: p.name.clone(),
                expected: p.value.shape().to_vec(),
                found: shape,
            });
        }
        p.value.set_data(&data);
    }
    for bn in model.bn_layers() {
        let (mean_name, var_name) = bn.buffer_names();
        for (name, slot) in [(mean_name, bn.running_mean()), (var_name, bn.running_var())] {
            let expected = vec![slot.borrow().len()];
            let (shape, data) = loaded.remove(&name).ok_or_else(|| Error::CheckpointShape {
                name: name.clone(),
                expected: expected.clone(),
                found: vec![],
            })?;
            if shape != expected {
                return Err(Error::CheckpointShape {
                    name,
                    expected,
                    found: shape,
                });
            }
            slot.borrow_mut().copy_from_slice(&data);
        }
    }
    if let Some(name) = loaded.keys().next() {
        return Err(Error::Data(format!(
            "checkpoint carries tensor \"{name}\" that does not exist in the {} layout",
            model.config.variant.as_str()
        )));
    }

    model.set_metadata(meta);
    Ok(model)
}

/// Metadata and raw named tensors of a checkpoint, without reconstructing a
/// model. Useful for inspection and tests.
pub type RawTensors = Vec<(String, Vec<usize>, Vec<f32>)>;

pub fn read_raw(bytes: &[u8]) -> Result<(Vec<(String, String)>, RawTensors)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }

    let meta_count = r.u32("metadata count")? as usize;
    let mut meta = Vec::with_capacity(meta_count);
    for i in 0..meta_count {
        let k = r.string(&format!("metadata key {i}"))?;
        let v = r.string(&format!("metadata value for \"{k}\""))?;
        meta.push((k, v));
    }

    let tensor_count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(tensor_count);
    for i in 0..tensor_count {
        let name = r.string(&format!("tensor name {i}"))?;
        let rank = r.take(1, &format!("rank of \"{name}\""))?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for d in 0..rank {
            shape.push(r.u32(&format!("dim {d} of \"{name}\""))? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Truncated {
                context: format!("tensor \"{name}\" declares an impossible shape {shape:?}"),
            })?;
        let raw = r.take(numel, &format!("values of \"{name}\""))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push((name, shape, data));
    }
    if r.pos != bytes.len() {
        return Err(Error::Data(format!(
            "checkpoint has {} trailing bytes after the declared contents",
            bytes.len() - r.pos
        )));
    }
    Ok((meta, tensors))
}

fn config_from_meta(meta: &[(String, String)]) -> Result<ModelConfig> {
    let get = |key: &str| -> Result<&str> {
        meta.iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Data(format!("checkpoint metadata is missing \"{key}\"")))
    };
    let parse_usize = |key: &str| -> Result<usize> {
        get(key)?
            .parse()
            .map_err(|_| Error::Data(format!("checkpoint metadata \"{key}\" is not an integer")))
    };
    ModelConfig::new(
        Variant::parse(get("variant")?)?,
        parse_usize("input_channels")?,
        parse_usize("input_size")?,
        parse_usize("num_classes")?,
    )
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                context: format!(
                    "{context} needs {n} bytes at offset {} but only {} remain",
                    self.pos,
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, context: &str) -> Result<u32> {
        let b = self.take(4, context)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u16(&mut self, context: &str) -> Result<u16> {
        let b = self.take(2, context)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn string(&mut self, context: &str) -> Result<String> {
        let len = self.u16(context)? as usize;
        let raw = self.take(len, context)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::Data(format!("{context}: not valid UTF-8")))
    }
}

fn write_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u16).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn write_tensor<E: Element>(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[E]) {
    write_str(buf, name);
    buf.push(shape.len() as u8);
    for &d in shape {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;
    use crate::tensor::no_grad;
    use crate::tensor::ops::Phase;
    use rand::Rng;

    fn mini() -> Model<f32> {
        let config = ModelConfig::new(Variant::ResnetMini, 1, 32, 6).unwrap();
        let model = build_resnet(config, 77).unwrap();
        model.set_meta("epoch", "3");
        model.set_meta("val_accuracy", "0.5");
        model
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let model = mini();
        let bytes1 = checkpoint_to_bytes(&model);
        let loaded = checkpoint_from_bytes(&bytes1).unwrap();
        let bytes2 = checkpoint_to_bytes(&loaded);
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn load_then_forward_matches_original_bitwise() {
        let model = mini();
        // Push the running stats away from their init so they round-trip too.
        let mut r = crate::rng::stream(5);
        let x = crate::tensor::Tensor::from_vec(
            &[3, 1, 32, 32],
            (0..3 * 32 * 32).map(|_| r.gen_range(-1.0f32..1.0)).collect(),
        )
        .unwrap();
        no_grad(|| model.forward(&x, Phase::Train)).unwrap();

        let loaded = checkpoint_from_bytes(&checkpoint_to_bytes(&model)).unwrap();
        let a = no_grad(|| model.forward(&x, Phase::Eval)).unwrap();
        let b = no_grad(|| loaded.forward(&x, Phase::Eval)).unwrap();
        let bits = |t: &crate::tensor::Tensor<f32>| {
            t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn bad_magic_is_distinct() {
        let mut bytes = checkpoint_to_bytes(&mini());
        bytes[0] ^= 0xff;
        match checkpoint_from_bytes(&bytes) {
            Err(Error::BadMagic { .. }) => {}
            other => panic!("expected BadMagic, got {:?}", other.err()),
        }
    }

    #[test]
    fn version_mismatch_is_distinct() {
        let mut bytes = checkpoint_to_bytes(&mini());
        bytes[4] = 9;
        match checkpoint_from_bytes(&bytes) {
            Err(Error::VersionMismatch { expected: 1, found: 9 }) => {}
            other => panic!("expected VersionMismatch, got {:?}", other.err()),
        }
    }

    #[test]
    fn truncation_is_distinct() {
        let bytes = checkpoint_to_bytes(&mini());
        let cut = &bytes[..bytes.len() - 3];
        match checkpoint_from_bytes(cut) {
            Err(Error::Truncated { .. }) => {}
            other => panic!("expected Truncated, got {:?}", other.err()),
        }
    }

    #[test]
    fn shape_inconsistency_is_distinct() {
        let model = mini();
        let bytes = checkpoint_to_bytes(&model);
        // Find the stem conv tensor and corrupt its first dim.
        let name = b"stem.conv.weight";
        let pos = bytes
            .windows(name.len())
            .position(|w| w == name)
            .expect("tensor name present");
        let dim_pos = pos + name.len() + 1; // skip rank byte
        let mut corrupt = bytes.clone();
        // [16,1,3,3] -> [16,1,9,1]: same element count, so the file still
        // parses and the shape validation is what rejects it.
        corrupt[dim_pos + 8] = 9;
        corrupt[dim_pos + 12] = 1;
        match checkpoint_from_bytes(&corrupt) {
            Err(Error::CheckpointShape { name, .. }) => {
                assert_eq!(name, "stem.conv.weight");
            }
            other => panic!("expected CheckpointShape, got {:?}", other.err()),
        }
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fpnt");
        let model = mini();
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config.num_classes, 6);
        assert_eq!(loaded.metadata(), model.metadata());
    }
}
