use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ConditionedNet, InputScaler, NetConfig, ParamBundle};
use crate::error::{Error, Result};
use crate::tensor_io::{decode_tensor, encode_tensor, sha256_hex};

pub const MANIFEST_FILE: &str = "manifest.json";
const SCALER_SHIFT: &str = "scaler.shift";
const SCALER_SCALE: &str = "scaler.scale";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: NetConfig,
    pub n_params: usize,
    pub tensors: Vec<TensorEntry>,
    pub scaler: Vec<TensorEntry>,
    /// Free-form training metadata (step, role, seed).
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn write_entry(dir: &Path, name: &str, shape: &[usize], data: &[f32]) -> Result<TensorEntry> {
    let file = format!("{name}.ten");
    let bytes = encode_tensor(shape, data)?;
    fs::write(dir.join(&file), &bytes)?;
    Ok(TensorEntry {
        name: name.to_string(),
        shape: shape.to_vec(),
        file,
        sha256: sha256_hex(&bytes),
    })
}

fn read_entry(dir: &Path, e: &TensorEntry) -> Result<Vec<f32>> {
    let path = dir.join(&e.file);
    let bytes = fs::read(&path)?;
    if sha256_hex(&bytes) != e.sha256 {
        return Err(Error::Checksum(path));
    }
    let t = decode_tensor(&bytes, &path)?;
    if t.dims != e.shape {
        return Err(Error::CorruptTensor {
            path,
            msg: format!("shape {:?}, manifest says {:?}", t.dims, e.shape),
        });
    }
    Ok(t.data)
}

/// Writes one raw tensor per parameter plus a JSON manifest into `dir`.
pub fn save_checkpoint(net: &ConditionedNet<f32>, dir: &Path, meta: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::new();
    for (spec, id) in net.params.entries() {
        tensors.push(write_entry(dir, &spec.name, &spec.shape, net.params.get(id))?);
    }
    let n = net.scaler.shift.len();
    let scaler = vec![
        write_entry(dir, SCALER_SHIFT, &[n], &net.scaler.shift)?,
        write_entry(dir, SCALER_SCALE, &[n], &net.scaler.scale)?,
    ];
    let manifest = CheckpointManifest {
        config: net.config().clone(),
        n_params: net.n_params(),
        tensors,
        scaler,
        meta,
    };
    // manifest last, so a directory with a manifest is complete
    let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
    fs::write(&tmp, serde_json::to_vec_pretty(&manifest)?)?;
    fs::rename(&tmp, dir.join(MANIFEST_FILE))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(ConditionedNet<f32>, CheckpointManifest)> {
    let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    let mut params = ParamBundle::<f32>::default();
    for e in &manifest.tensors {
        let data = read_entry(dir, e)?;
        let mut it = data.into_iter();
        params.add(&e.name, &e.shape, || it.next().expect("length checked by decode"));
    }
    let find = |name: &str| {
        manifest
            .scaler
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Config(format!("checkpoint lacks {name}")))
    };
    let scaler = InputScaler {
        shift: read_entry(dir, find(SCALER_SHIFT)?)?,
        scale: read_entry(dir, find(SCALER_SCALE)?)?,
    };
    let net = ConditionedNet::from_params(manifest.config.clone(), params, Some(scaler))?;
    if net.n_params() != manifest.n_params {
        return Err(Error::Config(format!(
            "manifest counts {} parameters, tensors hold {}",
            manifest.n_params,
            net.n_params()
        )));
    }
    Ok((net, manifest))
}
