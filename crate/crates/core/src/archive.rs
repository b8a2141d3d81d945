//! Single-file weight archive: named little-endian float arrays in a
//! safetensors container, with a JSON manifest stored in the header metadata.
//!
//! The manifest lists `{name, shape, dtype, sha256}` for every array and is
//! validated before any array is handed out.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::{Dtype as StDtype, SafeTensors};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FORMAT: &str = "colorista-archive/1";
const MANIFEST_KEY: &str = "manifest";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub sha256: String,
}

/// Per-channel input normalization applied before the encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Preprocessing {
    /// The ImageNet constants the public VGG checkpoints were trained with.
    fn default() -> Self {
        Self { mean: [0.485, 0.456, 0.406], std: [0.229, 0.224, 0.225] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub kind: String,
    pub arrays: Vec<ArrayEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preprocessing: Option<Preprocessing>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
struct RawArray {
    dtype: DType,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub kind: String,
    pub preprocessing: Option<Preprocessing>,
    pub extra: serde_json::Value,
    arrays: BTreeMap<String, RawArray>,
}

fn dtype_name(dtype: DType) -> Result<&'static str> {
    match dtype {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::InvalidInput(format!("unsupported archive dtype {other:?}"))),
    }
}

fn st_dtype(dtype: DType) -> StDtype {
    match dtype {
        DType::F64 => StDtype::F64,
        _ => StDtype::F32,
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        other => return Err(Error::InvalidInput(format!("unsupported archive dtype {other:?}"))),
    })
}

impl Archive {
    pub fn new(kind: impl Into<String>) -> Self {
        Self { kind: kind.into(), preprocessing: None, extra: serde_json::Value::Null, arrays: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: &Tensor) -> Result<()> {
        let dtype = t.dtype();
        dtype_name(dtype)?;
        let raw = RawArray { dtype, shape: t.dims().to_vec(), bytes: tensor_bytes(t)? };
        self.arrays.insert(name.into(), raw);
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn remove(&mut self, name: &str) {
        self.arrays.remove(name);
    }

    pub fn tensor(&self, name: &str, device: &Device) -> Result<Tensor> {
        let raw = self.arrays.get(name).ok_or_else(|| Error::archive(name, "missing array"))?;
        Ok(Tensor::from_raw_buffer(&raw.bytes, raw.dtype, &raw.shape, device)?)
    }

    /// All arrays under `prefix.`, keyed by the remainder of their name.
    pub fn tensors_with_prefix(&self, prefix: &str, device: &Device) -> Result<BTreeMap<String, Tensor>> {
        let dotted = format!("{prefix}.");
        self.arrays
            .keys()
            .filter_map(|k| k.strip_prefix(&dotted).map(|rest| (k, rest)))
            .map(|(full, rest)| Ok((rest.to_string(), self.tensor(full, device)?)))
            .collect()
    }

    pub fn manifest(&self) -> Result<Manifest> {
        let arrays = self
            .arrays
            .iter()
            .map(|(name, raw)| {
                Ok(ArrayEntry {
                    name: name.clone(),
                    shape: raw.shape.clone(),
                    dtype: dtype_name(raw.dtype)?.to_string(),
                    sha256: sha256_hex(&raw.bytes),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Manifest {
            format: FORMAT.to_string(),
            kind: self.kind.clone(),
            arrays,
            preprocessing: self.preprocessing.clone(),
            extra: self.extra.clone(),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_string(&self.manifest()?)?;
        let views = self
            .arrays
            .iter()
            .map(|(name, raw)| {
                safetensors::tensor::TensorView::new(st_dtype(raw.dtype), raw.shape.clone(), &raw.bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| Error::archive(name.clone(), e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta = HashMap::from([(MANIFEST_KEY.to_string(), manifest)]);
        safetensors::serialize(views, Some(meta)).map_err(|e| Error::archive("<container>", e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let container = "<container>";
        let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| Error::archive(container, e.to_string()))?;
        let manifest_json = meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get(MANIFEST_KEY))
            .ok_or_else(|| Error::archive("<manifest>", "missing manifest"))?;
        let manifest: Manifest = serde_json::from_str(manifest_json)?;
        if manifest.format != FORMAT {
            return Err(Error::archive("<manifest>", format!("unknown format `{}`", manifest.format)));
        }
        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::archive(container, e.to_string()))?;
        let mut arrays = BTreeMap::new();
        for entry in &manifest.arrays {
            let view = st.tensor(&entry.name).map_err(|_| Error::archive(&entry.name, "missing array"))?;
            let dtype = match (entry.dtype.as_str(), view.dtype()) {
                ("f32", StDtype::F32) => DType::F32,
                ("f64", StDtype::F64) => DType::F64,
                (declared, actual) => {
                    return Err(Error::archive(
                        &entry.name,
                        format!("dtype mismatch: manifest {declared}, stored {actual:?}"),
                    ))
                }
            };
            if view.shape() != entry.shape.as_slice() {
                return Err(Error::archive(
                    &entry.name,
                    format!("shape mismatch: manifest {:?}, stored {:?}", entry.shape, view.shape()),
                ));
            }
            if sha256_hex(view.data()) != entry.sha256 {
                return Err(Error::archive(&entry.name, "checksum mismatch"));
            }
            arrays.insert(entry.name.clone(), RawArray { dtype, shape: entry.shape.clone(), bytes: view.data().to_vec() });
        }
        if let Some(stray) = st.names().into_iter().find(|n| !arrays.contains_key(*n)) {
            return Err(Error::archive(stray, "array not listed in manifest"));
        }
        Ok(Self { kind: manifest.kind, preprocessing: manifest.preprocessing, extra: manifest.extra, arrays })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Archive {
        let mut a = Archive::new("test");
        a.insert("a.w", &Tensor::new(&[[1.5f32, -2.0], [0.25, 8.0]], &Device::Cpu).unwrap()).unwrap();
        a.insert("b", &Tensor::new(&[std::f64::consts::PI], &Device::Cpu).unwrap()).unwrap();
        a.preprocessing = Some(Preprocessing::default());
        a.extra = serde_json::json!({"epoch": 3});
        a
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let a = sample();
        let back = Archive::from_bytes(&a.to_bytes().unwrap()).unwrap();
        assert_eq!(a, back);
        let t = back.tensor("b", &Device::Cpu).unwrap();
        assert_eq!(t.to_vec1::<f64>().unwrap(), vec![std::f64::consts::PI]);
        assert_eq!(back.tensors_with_prefix("a", &Device::Cpu).unwrap().len(), 1);
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let a = sample();
        let mut bytes = a.to_bytes().unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 0x01;
        let err = Archive::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::Archive { .. }));
        assert!(err.to_string().contains("checksum"));
    }

    #[test]
    fn missing_manifest_is_rejected() {
        let data = vec![1f32.to_le_bytes()].concat();
        let view = safetensors::tensor::TensorView::new(StDtype::F32, vec![1], &data).unwrap();
        let bytes = safetensors::serialize(vec![("x", view)], None).unwrap();
        assert!(Archive::from_bytes(&bytes).unwrap_err().to_string().contains("manifest"));
    }
}
