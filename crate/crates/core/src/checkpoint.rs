//! Model checkpoints: a safetensors file whose metadata carries the schema
//! version, the model kind, its JSON config and free-form JSON extras
//! (metrics, scale factors, linked schemes).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::nn::ParamStore;
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
const HEADER_KEY: &str = "tumor_ldm";

#[derive(Serialize, serde::Deserialize)]
struct Header {
    schema_version: u32,
    kind: String,
    config: serde_json::Value,
    extra: serde_json::Value,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub extra: serde_json::Value,
    pub tensors: HashMap<String, Tensor>,
}

impl Checkpoint {
    pub fn config_as<T: DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.config.clone())?)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Config(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )));
        }
        Ok(())
    }
}

fn tensor_bytes(t: &Tensor) -> Result<(Dtype, Vec<u8>)> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => (
            Dtype::F64,
            flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        _ => (
            Dtype::F32,
            flat.to_dtype(DType::F32)?
                .to_vec1::<f32>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
        ),
    })
}

pub fn encode(kind: &str, config: &impl Serialize, extra: &serde_json::Value, params: &ParamStore) -> Result<Vec<u8>> {
    // a single metadata key keeps the header bytes independent of hash-map order
    let header = Header {
        schema_version: SCHEMA_VERSION,
        kind: kind.to_string(),
        config: serde_json::to_value(config)?,
        extra: extra.clone(),
    };
    let metadata = HashMap::from([(HEADER_KEY.to_string(), serde_json::to_string(&header)?)]);

    let mut raw = BTreeMap::new();
    for (name, var) in params.named() {
        let (dtype, bytes) = tensor_bytes(var.as_tensor())?;
        raw.insert(name.to_string(), (dtype, var.dims().to_vec(), bytes));
    }
    let views = raw
        .iter()
        .map(|(name, (dtype, shape, bytes))| {
            TensorView::new(*dtype, shape.clone(), bytes).map(|v| (name.clone(), v))
        })
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Config(format!("tensor view: {e}")))?;
    safetensors::tensor::serialize(views, Some(metadata))
        .map_err(|e| Error::Config(format!("serialize checkpoint: {e}")))
}

pub fn save(
    path: impl AsRef<Path>,
    kind: &str,
    config: &impl Serialize,
    extra: &serde_json::Value,
    params: &ParamStore,
) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let bytes = encode(kind, config, extra, params)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<Checkpoint> {
    let parse_err = |reason: String| Error::Parse {
        path: origin.to_path_buf(),
        reason,
    };
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| parse_err(e.to_string()))?;
    let info = meta
        .metadata()
        .clone()
        .ok_or_else(|| parse_err("checkpoint has no metadata".into()))?;
    let header: Header = info
        .get(HEADER_KEY)
        .ok_or_else(|| parse_err(format!("checkpoint metadata lacks `{HEADER_KEY}`")))
        .and_then(|h| serde_json::from_str(h).map_err(|e| parse_err(e.to_string())))?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(parse_err(format!(
            "schema version {}, expected {SCHEMA_VERSION}",
            header.schema_version
        )));
    }
    let st = SafeTensors::deserialize(bytes).map_err(|e| parse_err(e.to_string()))?;
    let mut tensors = HashMap::new();
    for (name, view) in st.tensors() {
        let shape = view.shape().to_vec();
        let t = match view.dtype() {
            Dtype::F32 => {
                let v: Vec<f32> = view
                    .data()
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect();
                Tensor::from_vec(v, shape, &Device::Cpu)?
            }
            Dtype::F64 => {
                let v: Vec<f64> = view
                    .data()
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect();
                Tensor::from_vec(v, shape, &Device::Cpu)?
            }
            other => return Err(parse_err(format!("unsupported dtype {other:?}"))),
        };
        tensors.insert(name, t);
    }
    Ok(Checkpoint {
        kind: header.kind,
        config: header.config,
        extra: header.extra,
        tensors,
    })
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(bytes_hash(&bytes))
}

pub fn bytes_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Init, Linear};
    use crate::rng::stream;

    #[test]
    fn round_trip_is_exact_and_versioned() {
        let mut init = Init::new(DType::F32, stream(4, &["ckpt"]));
        Linear::new(&mut init, "head", 5, 3).unwrap();
        let store = init.finish();
        let cfg = serde_json::json!({"width": 5});
        let extra = serde_json::json!({"val_loss": 0.25});
        let bytes = encode("toy", &cfg, &extra, &store).unwrap();
        let ck = decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(ck.kind, "toy");
        assert_eq!(ck.config, cfg);
        assert_eq!(ck.extra, extra);
        for (name, var) in store.named() {
            let a = var.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let b = ck.tensors[name].flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(
                a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
        // encoding is a pure function of the contents
        assert_eq!(bytes, encode("toy", &cfg, &extra, &store).unwrap());
    }

    #[test]
    fn garbage_is_a_parse_error() {
        assert!(matches!(
            decode(b"not a checkpoint", Path::new("x")),
            Err(Error::Parse { .. })
        ));
    }
}
