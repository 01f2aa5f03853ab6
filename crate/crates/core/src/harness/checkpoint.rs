//! Binary model checkpoints.
//!
//! Layout: `"EVCK"`, format version (u32 LE), header length (u64 LE), JSON
//! header, little-endian f32 payload, and a CRC-64/XZ of everything before it
//! (u64 LE). The header lists every tensor as `{group, name, shape, offset}`
//! with `offset` counted in f32 elements. Batch-norm running statistics use the
//! pseudo-group `"buffers"`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crc::{Crc, CRC_64_XZ};
use serde::{Deserialize, Serialize};

use super::output::write_atomic;
use crate::backbone::{BackboneConfig, Model};
use crate::error::{Error, Result};
use crate::tensor::{ParamGroup, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EVCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const BUFFERS: &str = "buffers";
const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub group: String,
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: BackboneConfig,
    pub tensors: Vec<TensorEntry>,
    /// Free-form metadata such as the training seed or best epoch.
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

/// Named tensors of a model in checkpoint order.
fn model_tensors(model: &Model) -> Vec<(String, String, Vec<usize>, Vec<f64>)> {
    let mut out = Vec::new();
    for group in [&model.theta, &model.phi, &model.w] {
        for (name, t) in group.entries() {
            out.push((group.tag().as_str().to_string(), name.clone(), t.shape().to_vec(), t.data().to_vec()));
        }
    }
    for (i, rs) in model.bn_stats.iter().enumerate() {
        let c = rs.mean.len();
        out.push((BUFFERS.into(), format!("bn{i}.running_mean"), vec![c], rs.mean.clone()));
        out.push((BUFFERS.into(), format!("bn{i}.running_var"), vec![c], rs.var.clone()));
    }
    out
}

pub fn checkpoint_bytes(model: &Model, meta: &BTreeMap<String, serde_json::Value>) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    let mut offset = 0;
    for (group, name, shape, data) in model_tensors(model) {
        tensors.push(TensorEntry {
            group,
            name,
            shape,
            offset,
        });
        offset += data.len();
        for v in data {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&CheckpointHeader {
        config: model.config.clone(),
        tensors,
        meta: meta.clone(),
    })?;
    let mut bytes = Vec::with_capacity(16 + header.len() + payload.len() + 8);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&payload);
    let crc = CRC64.checksum(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    Ok(bytes)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

fn read_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes(b.try_into().expect("4 bytes"))
}

fn read_u64(b: &[u8]) -> u64 {
    u64::from_le_bytes(b.try_into().expect("8 bytes"))
}

/// Parses and verifies a checkpoint, returning the model and its metadata.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<(Model, CheckpointHeader)> {
    if bytes.len() < 24 {
        return Err(corrupt(format!("file is only {} bytes", bytes.len())));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = read_u32(&bytes[4..8]);
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    if CRC64.checksum(body) != read_u64(tail) {
        return Err(corrupt("checksum mismatch"));
    }
    let header_len = usize::try_from(read_u64(&body[8..16])).map_err(|_| corrupt("header length overflow"))?;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| corrupt("header extends past end of file"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&body[16..header_end]).map_err(|e| corrupt(format!("header: {e}")))?;
    let payload = &body[header_end..];
    if payload.len() % 4 != 0 {
        return Err(corrupt("payload is not a whole number of f32 values"));
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();

    header.config.validate().map_err(|e| corrupt(format!("config: {e}")))?;
    let mut model = Model::new(header.config.clone(), 0)?;
    let expected = model_tensors(&model);
    if expected.len() != header.tensors.len() {
        return Err(corrupt(format!(
            "{} tensors listed, {} expected for this config",
            header.tensors.len(),
            expected.len()
        )));
    }
    let mut total = 0;
    for ((group, name, shape, _), entry) in expected.iter().zip(&header.tensors) {
        if (group, name, shape) != (&entry.group, &entry.name, &entry.shape) {
            return Err(corrupt(format!(
                "tensor {}/{} {:?} does not match expected {group}/{name} {shape:?}",
                entry.group, entry.name, entry.shape
            )));
        }
        total += shape.iter().product::<usize>();
    }
    if total != values.len() {
        return Err(corrupt(format!("payload holds {} values, header needs {total}", values.len())));
    }
    let slice = |e: &TensorEntry| -> Result<Vec<f64>> {
        let n = e.shape.iter().product::<usize>();
        values
            .get(e.offset..e.offset + n)
            .map(<[f64]>::to_vec)
            .ok_or_else(|| corrupt(format!("tensor {}/{} out of bounds", e.group, e.name)))
    };
    for entry in &header.tensors {
        let data = slice(entry)?;
        if entry.group == BUFFERS {
            let (layer, field) = entry.name.split_once('.').expect("validated name");
            let i: usize = layer[2..].parse().expect("validated name");
            let rs = &mut model.bn_stats[i];
            match field {
                "running_mean" => rs.mean = data,
                _ => rs.var = data,
            }
            continue;
        }
        let group: &mut ParamGroup = match entry.group.as_str() {
            "theta" => &mut model.theta,
            "phi" => &mut model.phi,
            _ => &mut model.w,
        };
        *group.get_mut(&entry.name).expect("validated name") = Tensor::new(&entry.shape, data)?;
    }
    Ok((model, header))
}

pub fn save_checkpoint(
    model: &Model,
    meta: &BTreeMap<String, serde_json::Value>,
    path: impl AsRef<Path>,
) -> Result<()> {
    write_atomic(path.as_ref(), &checkpoint_bytes(model, meta)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, CheckpointHeader)> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    parse_checkpoint(&bytes).map_err(|e| e.context(format!("checkpoint {}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model {
        let mut m = Model::new(BackboneConfig::compact(6, 5, 3), 9).unwrap();
        m.bn_stats[2].mean[1] = 0.25;
        m
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let meta = BTreeMap::from([("seed".to_string(), serde_json::json!(9))]);
        let bytes = checkpoint_bytes(&model(), &meta).unwrap();
        let (loaded, header) = parse_checkpoint(&bytes).unwrap();
        assert_eq!(header.meta, meta);
        assert_eq!(loaded.bn_stats[2].mean[1], 0.25);
        assert_eq!(checkpoint_bytes(&loaded, &meta).unwrap(), bytes);
    }

    #[test]
    fn truncation_and_bit_flips_are_corrupt() {
        let bytes = checkpoint_bytes(&model(), &BTreeMap::new()).unwrap();
        for cut in [0, 10, 30, bytes.len() / 2, bytes.len() - 1] {
            let r = parse_checkpoint(&bytes[..cut]);
            assert!(matches!(r, Err(Error::CorruptCheckpoint(_))), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        let i = flipped.len() - 20;
        flipped[i] ^= 1;
        assert!(matches!(parse_checkpoint(&flipped), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn version_is_gated() {
        let mut bytes = checkpoint_bytes(&model(), &BTreeMap::new()).unwrap();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            parse_checkpoint(&bytes),
            Err(Error::CheckpointVersion { found: 7, expected: 1 })
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model();
        save_checkpoint(&m, &BTreeMap::new(), &path).unwrap();
        let (loaded, _) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, m.config);
        let diff = m.theta.entries()[1].1.max_abs_diff(&loaded.theta.entries()[1].1);
        assert!(diff < 1e-6);
    }
}
