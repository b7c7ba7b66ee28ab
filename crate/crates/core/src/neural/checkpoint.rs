//! Checkpoint files: JSON with named, shaped tensors. Floats are written in
//! shortest round-trip form, so load(save(p)) == p exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{ModelConfig, Parameters};
use super::tensor::Tensor;
use super::NeuralError;

pub const FORMAT: &str = "vrptw-nch-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct File {
    format: String,
    version: u32,
    config: ModelConfig,
    tensors: Vec<NamedTensor>,
}

pub fn to_json(params: &Parameters) -> String {
    let file = File {
        format: FORMAT.into(),
        version: VERSION,
        config: params.config().clone(),
        tensors: params
            .names()
            .into_iter()
            .zip(params.tensors())
            .map(|(name, t)| NamedTensor { name, shape: t.shape.clone(), data: t.data.clone() })
            .collect(),
    };
    serde_json::to_string(&file).expect("parameters serialize")
}

/// Parses a checkpoint and checks it against `expected`, or against its own
/// stored configuration when `expected` is `None`.
pub fn from_json(text: &str, expected: Option<&ModelConfig>) -> Result<Parameters, NeuralError> {
    let file: File = serde_json::from_str(text).map_err(|e| NeuralError::Format(e.to_string()))?;
    if file.format != FORMAT {
        return Err(NeuralError::Format(format!("unknown format tag {:?}", file.format)));
    }
    if file.version != VERSION {
        return Err(NeuralError::Format(format!("unsupported version {}", file.version)));
    }
    let config = match expected {
        Some(cfg) => {
            if cfg.d_emb != file.config.d_emb || cfg.n_static_layers != file.config.n_static_layers {
                return Err(NeuralError::Shape(format!(
                    "checkpoint has d_emb = {}, n_static_layers = {}; expected {} and {}",
                    file.config.d_emb, file.config.n_static_layers, cfg.d_emb, cfg.n_static_layers
                )));
            }
            cfg.clone()
        }
        None => file.config,
    };
    let specs = config.parameter_specs();
    if specs.len() != file.tensors.len() {
        return Err(NeuralError::Shape(format!("expected {} tensors, found {}", specs.len(), file.tensors.len())));
    }
    let mut tensors = Vec::with_capacity(specs.len());
    for ((name, _), t) in specs.iter().zip(file.tensors) {
        if *name != t.name {
            return Err(NeuralError::Format(format!("expected tensor {name}, found {}", t.name)));
        }
        if t.shape.iter().product::<usize>() != t.data.len() {
            return Err(NeuralError::Format(format!("tensor {name}: shape {:?} does not match {} values", t.shape, t.data.len())));
        }
        tensors.push(Tensor::new(t.shape, t.data));
    }
    Parameters::from_tensors(config, tensors)
}

pub fn save_checkpoint(params: &Parameters, path: impl AsRef<Path>) -> Result<(), NeuralError> {
    let path = path.as_ref();
    fs::write(path, to_json(params)).map_err(|source| NeuralError::Io { path: path.display().to_string(), source })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Parameters, NeuralError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| NeuralError::Io { path: path.display().to_string(), source })?;
    from_json(&text, None)
}

/// Loads a checkpoint that must match `config`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, config: &ModelConfig) -> Result<Parameters, NeuralError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| NeuralError::Io { path: path.display().to_string(), source })?;
    from_json(&text, Some(config))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(d: usize) -> ModelConfig {
        ModelConfig { d_emb: d, n_static_layers: 2, k: 10, clip: 10.0 }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let mut p = Parameters::init(cfg(5), 42).unwrap();
        p.tensors_mut()[1].data[0] = 1e-300;
        p.tensors_mut()[1].data[1] = -0.1 - 0.2;
        save_checkpoint(&p, &path).unwrap();
        let q = load_checkpoint(&path).unwrap();
        assert_eq!(p.config(), q.config());
        for (a, b) in p.tensors().iter().zip(q.tensors()) {
            assert_eq!(a.shape, b.shape);
            let bits = |t: &Tensor| t.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn wrong_width_is_a_shape_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        save_checkpoint(&Parameters::init(cfg(5), 1).unwrap(), &path).unwrap();
        assert!(matches!(load_checkpoint_for(&path, &cfg(6)), Err(NeuralError::Shape(_))));
        assert!(load_checkpoint_for(&path, &cfg(5)).is_ok());
    }

    #[test]
    fn tampered_shapes_and_garbage_are_rejected() {
        let p = Parameters::init(cfg(3), 1).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&to_json(&p)).unwrap();
        v["tensors"][0]["shape"] = serde_json::json!([3, 6]);
        assert!(matches!(from_json(&v.to_string(), None), Err(NeuralError::Shape(_))));
        assert!(matches!(from_json("{not json", None), Err(NeuralError::Format(_))));
        let mut v: serde_json::Value = serde_json::from_str(&to_json(&p)).unwrap();
        v["version"] = serde_json::json!(99);
        assert!(matches!(from_json(&v.to_string(), None), Err(NeuralError::Format(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_checkpoint(dir.path().join("nope.json")), Err(NeuralError::Io { .. })));
    }
}
