//! Single-file parameter archive.
//!
//! Byte layout (all integers little-endian):
//!
//! | offset   | size | content                                              |
//! |----------|------|------------------------------------------------------|
//! | 0        | 8    | magic `CLFDCKPT`                                     |
//! | 8        | 4    | format version (`u32`, currently 1)                  |
//! | 12       | 1    | precision: bytes per value, 4 (`f32`) or 8 (`f64`)   |
//! | 13       | 3    | reserved, zero                                       |
//! | 16       | 8    | header length `H` (`u64`)                            |
//! | 24       | H    | UTF-8 JSON header                                    |
//! | 24 + H   | ...  | tensor values in header order, row-major             |
//! | end - 32 | 32   | SHA-256 of every preceding byte                      |
//!
//! The JSON header has the shape
//! `{"tensors": [{"name": str, "shape": [int]}], "optimizer_step": int|null, "metadata": any}`.
//! Adam moments, when saved, appear as tensors named `adam.m/<param>` and
//! `adam.v/<param>` after the parameters.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::tensor::{Precision, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"CLFDCKPT";
pub const FORMAT_VERSION: u32 = 1;
const FIXED_HEADER: usize = 24;
const DIGEST_LEN: usize = 32;
const FIRST_MOMENT: &str = "adam.m/";
const SECOND_MOMENT: &str = "adam.v/";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorEntry>,
    optimizer_step: Option<u64>,
    metadata: serde_json::Value,
}

/// Parameters plus free-form metadata as stored on disk.
#[derive(Clone, Debug)]
pub struct Checkpoint<T: Scalar = f32> {
    pub params: ParameterSet<T>,
    pub metadata: serde_json::Value,
    pub has_optimizer_state: bool,
}

pub fn encode<T: Scalar>(
    params: &ParameterSet<T>,
    metadata: &serde_json::Value,
    with_optimizer: bool,
) -> Result<Vec<u8>> {
    let mut tensors: Vec<(String, &Tensor<T>)> =
        params.iter().map(|(n, t)| (n.to_string(), t)).collect();
    if with_optimizer {
        for (name, _) in params.iter() {
            let (m, v) = params.moments(name).expect("moments exist for every parameter");
            tensors.push((format!("{FIRST_MOMENT}{name}"), m));
            tensors.push((format!("{SECOND_MOMENT}{name}"), v));
        }
    }
    let header = Header {
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        optimizer_step: with_optimizer.then(|| params.step()),
        metadata: metadata.clone(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(FIXED_HEADER + header_bytes.len() + params.num_values() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(T::PRECISION.byte_width() as u8);
    out.extend_from_slice(&[0, 0, 0]);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, t) in &tensors {
        t.data().iter().for_each(|v| v.write_le(&mut out));
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let bad = |msg: &str| Error::Checkpoint(msg.to_string());
    if bytes.len() < FIXED_HEADER + DIGEST_LEN {
        return Err(bad("file too short"));
    }
    if &bytes[..8] != MAGIC {
        return Err(bad("bad magic"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch (truncated or corrupted file)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let width = bytes[12] as usize;
    let precision = match width {
        4 => Precision::F32,
        8 => Precision::F64,
        w => return Err(Error::Checkpoint(format!("unsupported value width {w}"))),
    };
    let header_len = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let data_start = FIXED_HEADER
        .checked_add(header_len)
        .filter(|&s| s <= body.len())
        .ok_or_else(|| bad("header length exceeds file"))?;
    let header: Header = serde_json::from_slice(&body[FIXED_HEADER..data_start])?;

    let mut cursor = data_start;
    let mut read_tensor = |shape: &[usize]| -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        let end = cursor + n * width;
        if end > body.len() {
            return Err(bad("tensor data exceeds file"));
        }
        let values = body[cursor..end]
            .chunks_exact(width)
            .map(|c| match precision {
                Precision::F32 => T::from_f64(f32::read_le(c) as f64),
                Precision::F64 => T::from_f64(f64::read_le(c)),
            })
            .collect();
        cursor = end;
        Tensor::new(shape.to_vec(), values)
    };

    let mut params = ParameterSet::new();
    let mut moments = Vec::new();
    for entry in &header.tensors {
        let t = read_tensor(&entry.shape)?;
        if entry.name.starts_with(FIRST_MOMENT) || entry.name.starts_with(SECOND_MOMENT) {
            moments.push((entry.name.clone(), t));
        } else {
            params.insert(entry.name.clone(), t);
        }
    }
    if cursor != body.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    let has_optimizer_state = header.optimizer_step.is_some();
    if let Some(step) = header.optimizer_step {
        let find = |prefix: &str, name: &str| {
            moments
                .iter()
                .find(|(n, _)| n.strip_prefix(prefix) == Some(name))
                .map(|(_, t)| t.clone())
        };
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            let m = find(FIRST_MOMENT, &name)
                .ok_or_else(|| Error::Checkpoint(format!("missing first moment for `{name}`")))?;
            let v = find(SECOND_MOMENT, &name)
                .ok_or_else(|| Error::Checkpoint(format!("missing second moment for `{name}`")))?;
            params.set_optimizer_state(&name, m, v)?;
        }
        params.set_step(step);
    }
    Ok(Checkpoint {
        params,
        metadata: header.metadata,
        has_optimizer_state,
    })
}

pub fn save<T: Scalar>(
    path: &Path,
    params: &ParameterSet<T>,
    metadata: &serde_json::Value,
    with_optimizer: bool,
) -> Result<()> {
    let bytes = encode(params, metadata, with_optimizer)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// SHA-256 of a checkpoint file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::params::AdamConfig;

    fn sample_params() -> ParameterSet<f32> {
        let mut p = ParameterSet::new();
        p.insert("a.weight", Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.5, 0.25]).unwrap());
        p.insert("a.bias", Tensor::new(vec![2], vec![0.0, 1.0]).unwrap());
        p
    }

    #[test]
    fn round_trip_preserves_params_metadata_and_optimizer() {
        let mut p = sample_params();
        let tape = Tape::new();
        let w = p.var(&tape, "a.weight").unwrap();
        let loss = tape.sum(w).unwrap();
        let grads = tape.backward(loss).unwrap();
        p.adam_step(&grads, &AdamConfig::default()).unwrap();

        let meta = serde_json::json!({"epoch": 3, "kind": "test"});
        let bytes = encode(&p, &meta, true).unwrap();
        let ck: Checkpoint<f32> = decode(&bytes).unwrap();
        assert_eq!(ck.params, p);
        assert_eq!(ck.metadata, meta);
        assert!(ck.has_optimizer_state);
    }

    #[test]
    fn header_layout_is_as_documented() {
        let bytes = encode(&sample_params(), &serde_json::Value::Null, false).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(bytes[12], 4);
        let h = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[24..24 + h]).unwrap();
        // BTreeMap ordering: bias before weight.
        assert_eq!(header["tensors"][0]["name"], "a.bias");
        let first = f32::from_le_bytes(bytes[24 + h..28 + h].try_into().unwrap());
        assert_eq!(first, 0.0);
        let third = f32::from_le_bytes(bytes[32 + h..36 + h].try_into().unwrap());
        assert_eq!(third, 1.0);
        assert_eq!(bytes.len(), 24 + h + 6 * 4 + 32);
    }

    #[test]
    fn truncated_or_flipped_bytes_fail_to_load() {
        let bytes = encode(&sample_params(), &serde_json::Value::Null, true).unwrap();
        assert!(decode::<f32>(&bytes[..bytes.len() - 5]).is_err());
        let mut flipped = bytes.clone();
        flipped[40] ^= 0xff;
        assert!(matches!(decode::<f32>(&flipped), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn f32_archive_reads_at_f64() {
        let bytes = encode(&sample_params(), &serde_json::Value::Null, false).unwrap();
        let ck: Checkpoint<f64> = decode(&bytes).unwrap();
        assert_eq!(ck.params.get("a.weight").unwrap().data(), &[1.0, -2.0, 3.5, 0.25]);
    }
}
