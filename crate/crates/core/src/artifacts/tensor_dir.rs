//! Tensor-directory checkpoint format.
//!
//! A checkpoint is a directory holding `config.json` (free-form model
//! metadata), `index.json` (parameter names mapped to shapes, files, and
//! offsets), and one raw little-endian float32 file per named parameter.

use crate::error::{Error, Result};
use crate::nn::Param;
use crate::scalar::Scalar;
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Index {
    params: Vec<IndexEntry>,
}

fn tensor_file_name(param_name: &str) -> String {
    let safe: String = param_name
        .chars()
        .map(|c| if c.is_alphanumeric() || c == '.' || c == '_' { c } else { '_' })
        .collect();
    format!("{safe}.f32")
}

/// Write a checkpoint directory for a set of named parameters.
pub fn save_checkpoint<F: Scalar>(
    dir: &Path,
    config: &serde_json::Value,
    named: &[(String, &Param<F>)],
) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), serde_json::to_vec_pretty(config)?)?;
    let mut index = Index { params: Vec::with_capacity(named.len()) };
    for (name, p) in named {
        let file = tensor_file_name(name);
        let mut bytes = Vec::with_capacity(p.value.len() * 4);
        for v in p.value.iter() {
            bytes.extend_from_slice(&v.to_f32_().to_le_bytes());
        }
        fs::write(dir.join(&file), bytes)?;
        index.params.push(IndexEntry {
            name: name.clone(),
            shape: p.value.shape().to_vec(),
            file,
            offset: 0,
        });
    }
    fs::write(dir.join("index.json"), serde_json::to_vec_pretty(&index)?)?;
    Ok(())
}

/// Read back the `config.json` of a checkpoint.
pub fn load_config(dir: &Path) -> Result<serde_json::Value> {
    let path = dir.join("config.json");
    if !path.is_file() {
        return Err(Error::MissingArtifact(path.display().to_string()));
    }
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// Load parameter values into an existing model's named parameter slots.
/// Every slot must be present in the index with a matching shape.
pub fn load_params<F: Scalar>(dir: &Path, named: &mut [(String, &mut Param<F>)]) -> Result<()> {
    let index_path = dir.join("index.json");
    if !index_path.is_file() {
        return Err(Error::MissingArtifact(index_path.display().to_string()));
    }
    let index: Index = serde_json::from_slice(&fs::read(index_path)?)?;
    for (name, p) in named.iter_mut() {
        let entry = index
            .params
            .iter()
            .find(|e| &e.name == name)
            .ok_or_else(|| Error::Artifact(format!("parameter '{name}' missing from index")))?;
        if entry.shape != p.value.shape() {
            return Err(Error::ShapeMismatch {
                context: format!("checkpoint parameter '{name}'"),
                expected: format!("{:?}", p.value.shape()),
                got: format!("{:?}", entry.shape),
            });
        }
        let bytes = fs::read(dir.join(&entry.file))?;
        let want = entry.shape.iter().product::<usize>() * 4;
        if bytes.len() != want + entry.offset as usize {
            return Err(Error::Artifact(format!(
                "parameter '{name}': {} bytes on disk, expected {want}",
                bytes.len()
            )));
        }
        let values: Vec<F> = bytes[entry.offset as usize..]
            .chunks_exact(4)
            .map(|c| F::from_f32_(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        p.value = ArrayD::from_shape_vec(entry.shape.clone(), values)
            .map_err(|e| Error::Artifact(format!("parameter '{name}': {e}")))?;
    }
    Ok(())
}

/// Load every parameter in the index as a raw named tensor, without needing
/// a constructed model.
pub fn load_all_params<F: Scalar>(dir: &Path) -> Result<Vec<(String, ArrayD<F>)>> {
    let index_path = dir.join("index.json");
    if !index_path.is_file() {
        return Err(Error::MissingArtifact(index_path.display().to_string()));
    }
    let index: Index = serde_json::from_slice(&fs::read(index_path)?)?;
    let mut out = Vec::with_capacity(index.params.len());
    for entry in &index.params {
        let bytes = fs::read(dir.join(&entry.file))?;
        let want = entry.shape.iter().product::<usize>() * 4;
        if bytes.len() != want + entry.offset as usize {
            return Err(Error::Artifact(format!(
                "parameter '{}': {} bytes on disk, expected {want}",
                entry.name,
                bytes.len()
            )));
        }
        let values: Vec<F> = bytes[entry.offset as usize..]
            .chunks_exact(4)
            .map(|c| F::from_f32_(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        let tensor = ArrayD::from_shape_vec(entry.shape.clone(), values)
            .map_err(|e| Error::Artifact(format!("parameter '{}': {e}", entry.name)))?;
        out.push((entry.name.clone(), tensor));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    fn probe_params() -> Vec<(String, Param<f32>)> {
        vec![
            (
                "layer.weight".into(),
                Param::new(ArrayD::from_shape_fn(vec![2, 3], |ix| (ix[0] * 3 + ix[1]) as f32 * 0.1)),
            ),
            ("layer.bias".into(), Param::new(ArrayD::from_elem(vec![3], -0.5f32))),
        ]
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let tmp = tempfile::tempdir().unwrap();
        let params = probe_params();
        let named: Vec<(String, &Param<f32>)> =
            params.iter().map(|(n, p)| (n.clone(), p)).collect();
        let config = serde_json::json!({"arch": "probe", "seed": 7});
        save_checkpoint(tmp.path(), &config, &named).unwrap();

        assert_eq!(load_config(tmp.path()).unwrap(), config);
        let mut fresh = probe_params();
        for (_, p) in fresh.iter_mut() {
            p.value.fill(0.0);
        }
        let mut slots: Vec<(String, &mut Param<f32>)> =
            fresh.iter_mut().map(|(n, p)| (n.clone(), p)).collect();
        load_params(tmp.path(), &mut slots).unwrap();
        for ((_, a), (_, b)) in fresh.iter().zip(&params) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn missing_checkpoint_is_reported() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_config(&tmp.path().join("nope")),
            Err(Error::MissingArtifact(_))
        ));
    }

    #[test]
    fn shape_mismatch_names_the_parameter() {
        let tmp = tempfile::tempdir().unwrap();
        let params = probe_params();
        let named: Vec<(String, &Param<f32>)> =
            params.iter().map(|(n, p)| (n.clone(), p)).collect();
        save_checkpoint(tmp.path(), &serde_json::json!({}), &named).unwrap();

        let mut wrong = Param::<f32>::new(ArrayD::zeros(vec![3, 2]));
        let mut slots = vec![("layer.weight".to_string(), &mut wrong)];
        match load_params(tmp.path(), &mut slots) {
            Err(Error::ShapeMismatch { context, .. }) => {
                assert!(context.contains("layer.weight"))
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }
}
