//! Named-array containers (safetensors) and atomic file writes.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Key of the single metadata entry; one entry keeps headers byte-stable.
const META_KEY: &str = "mcmri";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape {
                expected: shape.to_vec(),
                got: vec![data.len()],
            });
        }
        Ok(NamedArray {
            shape: shape.to_vec(),
            data,
        })
    }
}

pub type NamedArrays = BTreeMap<String, NamedArray>;

/// Writes to a sibling temporary file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Validation(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Serializes arrays as little-endian f64 plus an optional metadata string.
pub fn encode_named(arrays: &NamedArrays, meta: Option<&str>) -> Result<Vec<u8>> {
    let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = arrays
        .iter()
        .map(|(k, a)| {
            let b = a.data.iter().flat_map(|v| v.to_le_bytes()).collect();
            (k.clone(), a.shape.clone(), b)
        })
        .collect();
    let views = bytes
        .iter()
        .map(|(k, shape, b)| {
            TensorView::new(Dtype::F64, shape.clone(), b)
                .map(|v| (k.clone(), v))
                .map_err(|e| Error::Format(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let info = meta.map(|m| HashMap::from([(META_KEY.to_string(), m.to_string())]));
    safetensors::serialize(views, info).map_err(|e| Error::Format(e.to_string()))
}

/// Reads f32 or f64 arrays; everything is widened to f64.
pub fn decode_named(bytes: &[u8]) -> Result<(NamedArrays, Option<String>)> {
    let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Format(e.to_string()))?;
    let (_, header) =
        SafeTensors::read_metadata(bytes).map_err(|e| Error::Format(e.to_string()))?;
    let meta = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY).cloned());
    let mut out = NamedArrays::new();
    for (name, view) in st.tensors() {
        let raw = view.data();
        let data: Vec<f64> = match view.dtype() {
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect(),
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
                .collect(),
            other => {
                return Err(Error::Format(format!(
                    "array {name} has unsupported element type {other:?}"
                )))
            }
        };
        out.insert(name, NamedArray::new(view.shape(), data)?);
    }
    Ok((out, meta))
}

pub fn save_named(path: &Path, arrays: &NamedArrays, meta: Option<&str>) -> Result<()> {
    write_atomic(path, &encode_named(arrays, meta)?)
}

/// Generic loader for named-array volumes (f32 or f64).
pub fn load_named(path: &Path) -> Result<(NamedArrays, Option<String>)> {
    decode_named(&fs::read(path)?)
}
