//! Checkpoint files: `EAVSE1\n`, a little-endian u32 header length, a JSON
//! header (config echo, tensor table, trainer state), then raw f32 LE data.

use std::collections::BTreeMap;
use std::path::Path;

use emoavse_tensor::ndarray::{ArrayD, IxDyn};
use emoavse_tensor::Scalar;
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::util::write_atomic;

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"EAVSE1\n";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    /// Opaque trainer state (step, RNG, statistics).
    pub state: Option<serde_json::Value>,
    /// Additional named arrays, e.g. optimiser moments.
    pub extra: BTreeMap<String, ArrayD<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_model(model: &Model<T>) -> Self {
        Self { config: model.config.clone(), params: model.params.clone(), state: None, extra: BTreeMap::new() }
    }

    pub fn into_model(self) -> Model<T> {
        Model { config: self.config, params: self.params }
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    frozen: bool,
    extra: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    state: Option<serde_json::Value>,
}

pub fn save_checkpoint<T: Scalar>(path: &Path, ck: &Checkpoint<T>) -> Result<()> {
    let mut tensors = Vec::new();
    let mut data: Vec<u8> = Vec::new();
    let mut push = |name: &str, value: &ArrayD<T>, frozen: bool, extra: bool| {
        tensors.push(TensorEntry { name: name.to_string(), shape: value.shape().to_vec(), frozen, extra });
        for v in value.iter() {
            data.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    };
    for (name, p) in ck.params.iter() {
        push(name, &p.value, p.frozen, false);
    }
    for (name, v) in &ck.extra {
        push(name, v, false, true);
    }
    let header = serde_json::to_vec(&Header { version: VERSION, config: ck.config.clone(), tensors, state: ck.state.clone() })?;
    let mut bytes = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 4 + header.len() + data.len());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&data);
    write_atomic(path, &bytes)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bad = |reason: String| Error::Checkpoint { path: path.to_path_buf(), reason };
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let m = CHECKPOINT_MAGIC.len();
    if bytes.len() < m + 4 || &bytes[..m] != CHECKPOINT_MAGIC {
        return Err(bad("not an EAVSE1 checkpoint".into()));
    }
    let hlen = u32::from_le_bytes(bytes[m..m + 4].try_into().expect("4 bytes")) as usize;
    let body = m + 4 + hlen;
    if bytes.len() < body {
        return Err(bad("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[m + 4..body]).map_err(|e| bad(format!("header: {e}")))?;
    if header.version != VERSION {
        return Err(bad(format!("unsupported version {}", header.version)));
    }
    let expected: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if bytes.len() != body + 4 * expected {
        return Err(bad(format!("{} data bytes for {expected} values", bytes.len() - body)));
    }
    let mut floats = bytes[body..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let mut params = ParamSet::new();
    let mut extra = BTreeMap::new();
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        let values: Vec<T> = floats.by_ref().take(n).map(|v| T::lit(v as f64)).collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&t.shape), values).expect("length checked");
        if t.extra {
            extra.insert(t.name.clone(), arr);
        } else {
            params.insert(t.name.clone(), arr, t.frozen);
        }
    }
    // the parameter table must match what the configuration builds
    let reference = Model::<T>::new(header.config.clone()).map_err(|e| bad(e.to_string()))?;
    for (name, p) in reference.params.iter() {
        match params.get(name) {
            Some(q) if q.value.shape() == p.value.shape() && q.frozen == p.frozen => {}
            Some(q) => {
                return Err(bad(format!("parameter {name} has shape {:?}, expected {:?}", q.value.shape(), p.value.shape())))
            }
            None => return Err(bad(format!("missing parameter {name}"))),
        }
    }
    if params.len() != reference.params.len() {
        return Err(bad("checkpoint holds parameters the configuration does not use".into()));
    }
    Ok(Checkpoint { config: header.config, params, state: header.state, extra })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig { channels: vec![2, 2, 3, 3, 4], seed: 1, ..Default::default() }
    }

    #[test]
    fn round_trip_is_exact_for_f32() {
        let m = Model::<f32>::new(tiny()).unwrap();
        let mut ck = Checkpoint::from_model(&m);
        ck.state = Some(serde_json::json!({"step": 3}));
        ck.extra.insert("adam.m.x".into(), ArrayD::from_elem(IxDyn(&[2, 2]), 0.5));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&p, &ck).unwrap();
        let back: Checkpoint<f32> = load_checkpoint(&p).unwrap();
        assert_eq!(back, ck);
        assert_eq!(&std::fs::read(&p).unwrap()[..7], b"EAVSE1\n");
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        std::fs::write(&p, b"nope").unwrap();
        assert!(load_checkpoint::<f32>(&p).is_err());
        let m = Model::<f32>::new(tiny()).unwrap();
        save_checkpoint(&p, &Checkpoint::from_model(&m)).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 4);
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&p), Err(Error::Checkpoint { .. })));
    }
}
