//! Named-tensor container files.
//!
//! Layout: an 8-byte little-endian `u64` header length `N`, then `N` bytes of
//! JSON mapping each tensor name to `{"dtype", "shape", "data_offsets"}`, then
//! the raw little-endian data. Offsets are relative to the start of the data
//! region. Tensors are written in name order, back to back.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::float::{DType, Float};
use crate::tensor::Tensor;

/// A tensor of either supported element type.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to `T`, rounding if the stored precision is higher.
    pub fn to_float<T: Float>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }

    fn write_data(&self, out: &mut Vec<u8>) {
        match self {
            AnyTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(out)),
            AnyTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(out)),
        }
    }

    pub fn bitwise_eq(&self, other: &AnyTensor) -> bool {
        match (self, other) {
            (AnyTensor::F32(a), AnyTensor::F32(b)) => a.bitwise_eq(b),
            (AnyTensor::F64(a), AnyTensor::F64(b)) => a.bitwise_eq(b),
            _ => false,
        }
    }
}

impl<T: Float> From<Tensor<T>> for AnyTensor {
    fn from(t: Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => AnyTensor::F32(t.cast()),
            DType::F64 => AnyTensor::F64(t.cast()),
        }
    }
}

/// Ordered name → tensor map, the in-memory form of a container file.
pub type NamedTensors = BTreeMap<String, AnyTensor>;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    dtype: DType,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

pub fn encode(tensors: &NamedTensors) -> Result<Vec<u8>> {
    let mut header = BTreeMap::new();
    let mut data = Vec::new();
    for (name, t) in tensors {
        let begin = data.len() as u64;
        t.write_data(&mut data);
        header.insert(
            name.as_str(),
            Entry { dtype: t.dtype(), shape: t.shape().to_vec(), data_offsets: [begin, data.len() as u64] },
        );
    }
    let json = serde_json::to_vec(&header).map_err(|e| TensorError::format(None, e.to_string()))?;
    let mut out = Vec::with_capacity(8 + json.len() + data.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<NamedTensors> {
    let len_bytes: [u8; 8] = bytes
        .get(..8)
        .ok_or_else(|| TensorError::format(None, "file shorter than the 8-byte header length"))?
        .try_into()
        .unwrap();
    let header_len = u64::from_le_bytes(len_bytes);
    let data_start = 8u64
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len() as u64)
        .ok_or_else(|| TensorError::format(None, format!("header length {header_len} exceeds file size")))?
        as usize;
    let header: BTreeMap<String, Entry> = serde_json::from_slice(&bytes[8..data_start])
        .map_err(|e| TensorError::format(None, format!("malformed header: {e}")))?;
    let region = &bytes[data_start..];

    let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(header.len());
    let mut out = NamedTensors::new();
    for (name, entry) in &header {
        let [begin, end] = entry.data_offsets;
        let numel = entry.shape.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
        let expected = numel.and_then(|n| n.checked_mul(entry.dtype.size_of() as u64));
        if begin > end || end > region.len() as u64 {
            return Err(TensorError::format(
                Some(name),
                format!("offsets [{begin}, {end}] outside data region of {} bytes", region.len()),
            ));
        }
        if expected != Some(end - begin) {
            return Err(TensorError::format(
                Some(name),
                format!("shape {:?} does not match {} data bytes", entry.shape, end - begin),
            ));
        }
        spans.push((begin, end, name));
        let raw = &region[begin as usize..end as usize];
        let tensor = match entry.dtype {
            DType::F32 => AnyTensor::F32(read_tensor(name, &entry.shape, raw)?),
            DType::F64 => AnyTensor::F64(read_tensor(name, &entry.shape, raw)?),
        };
        out.insert(name.clone(), tensor);
    }
    spans.sort();
    for pair in spans.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(TensorError::format(Some(pair[1].2), format!("data overlaps tensor '{}'", pair[0].2)));
        }
    }
    Ok(out)
}

fn read_tensor<T: Float>(name: &str, shape: &[usize], raw: &[u8]) -> Result<Tensor<T>> {
    let width = T::DTYPE.size_of();
    let data = raw.chunks_exact(width).map(T::read_le).collect();
    Tensor::new(shape.to_vec(), data).map_err(|e| TensorError::format(Some(name), e.to_string()))
}

pub fn save(path: impl AsRef<Path>, tensors: &NamedTensors) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(tensors)?;
    fs::write(path, bytes).map_err(|source| TensorError::Io { path: path.to_owned(), source })
}

pub fn load(path: impl AsRef<Path>) -> Result<NamedTensors> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| TensorError::Io { path: path.to_owned(), source })?;
    decode(&bytes)
}

/// Removes and returns the tensor `name`, checking its shape.
pub fn take_tensor<T: Float>(tensors: &mut NamedTensors, name: &str, shape: &[usize]) -> Result<Tensor<T>> {
    let t = tensors.remove(name).ok_or_else(|| TensorError::format(Some(name), "missing"))?;
    if t.shape() != shape {
        return Err(TensorError::format(
            Some(name),
            format!("shape {:?} does not match expected {shape:?}", t.shape()),
        ));
    }
    Ok(t.to_float())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> NamedTensors {
        let mut m = NamedTensors::new();
        m.insert("a".into(), AnyTensor::F32(Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE]).unwrap()));
        m.insert("b".into(), AnyTensor::F64(Tensor::new(vec![3], vec![0.1, 1e-300, -0.0]).unwrap()));
        m.insert("s".into(), AnyTensor::F64(Tensor::scalar(7.0)));
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = sample();
        let back = decode(&encode(&m).unwrap()).unwrap();
        assert_eq!(back.len(), m.len());
        for (k, v) in &m {
            assert!(v.bitwise_eq(&back[k]), "{k}");
        }
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&sample()).unwrap();
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + n]).unwrap();
        assert_eq!(header["a"]["dtype"], "f32");
        assert_eq!(header["a"]["data_offsets"], serde_json::json!([0, 16]));
        assert_eq!(header["b"]["data_offsets"], serde_json::json!([16, 40]));
        assert_eq!(bytes.len(), 8 + n + 48);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = encode(&sample()).unwrap();
        for cut in [0, 4, 12, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(TensorError::Format { .. })), "cut {cut}");
        }
    }

    #[test]
    fn overlapping_offsets_are_rejected() {
        let json = br#"{"x":{"dtype":"f32","shape":[2],"data_offsets":[0,8]},"y":{"dtype":"f32","shape":[2],"data_offsets":[4,12]}}"#;
        let mut bytes = (json.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(json);
        bytes.extend_from_slice(&[0u8; 12]);
        match decode(&bytes) {
            Err(TensorError::Format { name: Some(n), msg }) => {
                assert_eq!(n, "y");
                assert!(msg.contains("overlaps"));
            }
            other => panic!("expected overlap error, got {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_names_the_tensor() {
        let json = br#"{"w":{"dtype":"f64","shape":[3],"data_offsets":[0,16]}}"#;
        let mut bytes = (json.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(json);
        bytes.extend_from_slice(&[0u8; 16]);
        let err = decode(&bytes).unwrap_err().to_string();
        assert!(err.contains("'w'"), "{err}");
    }

    #[test]
    fn take_checks_expected_shape() {
        let mut m = sample();
        assert!(take_tensor::<f32>(&mut m, "a", &[4]).is_err());
        assert!(take_tensor::<f32>(&mut m, "missing", &[1]).is_err());
        let b: Tensor<f64> = take_tensor(&mut m, "b", &[3]).unwrap();
        assert_eq!(b.data()[0], 0.1);
    }
}
