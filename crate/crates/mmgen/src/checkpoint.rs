//! Directory checkpoints: a JSON manifest describing what was trained plus
//! one raw little-endian f64 blob per parameter, each integrity-checked by
//! its SHA-256 digest.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tape::ndarray::{ArrayD, IxDyn};
use tape::optim::ParamStore;

use crate::error::Error;
use crate::networks::{JointMode, ModalitySpec, NetworkConfig};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub family: String,
    pub x_spec: ModalitySpec,
    pub y_spec: ModalitySpec,
    pub config: NetworkConfig,
    pub joint_mode: JointMode,
    pub seed: u64,
    pub build: String,
    /// Content hash of the dataset the parameters were trained on.
    #[serde(default)]
    pub data_fingerprint: Option<String>,
    pub params: Vec<ParamEntry>,
}

/// Descriptive header for a checkpoint; parameter entries are filled in at
/// save time.
#[derive(Clone, Debug)]
pub struct CheckpointMeta {
    pub family: String,
    pub x_spec: ModalitySpec,
    pub y_spec: ModalitySpec,
    pub config: NetworkConfig,
    pub joint_mode: JointMode,
    pub seed: u64,
    pub data_fingerprint: Option<String>,
}

/// `git describe` of the working tree, or "unknown" outside a repository.
pub fn build_id() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".to_string())
}

fn blob_name(param: &str, index: usize) -> String {
    let safe: String = param
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' { c } else { '_' })
        .collect();
    format!("{index:04}_{safe}.bin")
}

fn encode_blob(values: &ArrayD<f64>) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for &v in values.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

fn decode_blob(bytes: &[u8], shape: &[usize]) -> Result<ArrayD<f64>, Error> {
    if !bytes.len().is_multiple_of(8) {
        return Err(Error::contract("parameter blob length is not a multiple of 8"));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let expected: usize = shape.iter().product();
    if values.len() != expected {
        return Err(Error::contract(format!(
            "parameter blob holds {} values, manifest shape {:?} needs {}",
            values.len(),
            shape,
            expected
        )));
    }
    ArrayD::from_shape_vec(IxDyn(shape), values)
        .map_err(|e| Error::contract(format!("bad parameter shape: {e}")))
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint(
    dir: &Path,
    meta: &CheckpointMeta,
    store: &ParamStore,
) -> Result<CheckpointManifest, Error> {
    fs::create_dir_all(dir)
        .map_err(|e| Error::contract(format!("cannot create checkpoint dir: {e}")))?;
    let mut params = Vec::new();
    for (i, (name, tensor)) in store.iter().enumerate() {
        let values = tensor.array();
        let bytes = encode_blob(&values);
        let file = blob_name(name, i);
        fs::write(dir.join(&file), &bytes)
            .map_err(|e| Error::contract(format!("cannot write {file}: {e}")))?;
        params.push(ParamEntry {
            name: name.to_string(),
            shape: values.shape().to_vec(),
            file,
            sha256: hex_digest(&bytes),
        });
    }
    let manifest = CheckpointManifest {
        family: meta.family.clone(),
        x_spec: meta.x_spec.clone(),
        y_spec: meta.y_spec.clone(),
        config: meta.config.clone(),
        joint_mode: meta.joint_mode,
        seed: meta.seed,
        build: build_id(),
        data_fingerprint: meta.data_fingerprint.clone(),
        params,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::contract(format!("manifest serialization failed: {e}")))?;
    fs::write(dir.join(MANIFEST_FILE), json)
        .map_err(|e| Error::contract(format!("cannot write manifest: {e}")))?;
    Ok(manifest)
}

pub fn load_checkpoint(
    dir: &Path,
) -> Result<(CheckpointManifest, BTreeMap<String, ArrayD<f64>>), Error> {
    let raw = fs::read_to_string(dir.join(MANIFEST_FILE))
        .map_err(|e| Error::contract(format!("cannot read manifest: {e}")))?;
    let manifest: CheckpointManifest = serde_json::from_str(&raw)
        .map_err(|e| Error::contract(format!("manifest parse failed: {e}")))?;
    let mut values = BTreeMap::new();
    for entry in &manifest.params {
        let bytes = fs::read(dir.join(&entry.file))
            .map_err(|e| Error::contract(format!("cannot read {}: {e}", entry.file)))?;
        let digest = hex_digest(&bytes);
        if digest != entry.sha256 {
            return Err(Error::contract(format!(
                "checkpoint blob {} is corrupt: digest {digest} != manifest {}",
                entry.file, entry.sha256
            )));
        }
        let arr = decode_blob(&bytes, &entry.shape)?;
        if values.insert(entry.name.clone(), arr).is_some() {
            return Err(Error::contract(format!("duplicate parameter {}", entry.name)));
        }
    }
    Ok((manifest, values))
}

/// Writes loaded values into an already-built parameter store. The name
/// sets must match exactly; shapes are checked per parameter.
pub fn restore_params(
    store: &ParamStore,
    values: &BTreeMap<String, ArrayD<f64>>,
) -> Result<(), Error> {
    let names = store.names();
    if names.len() != values.len() {
        return Err(Error::contract(format!(
            "checkpoint has {} parameters, model has {}",
            values.len(),
            names.len()
        )));
    }
    for name in &names {
        let arr = values
            .get(name)
            .ok_or_else(|| Error::contract(format!("checkpoint is missing parameter {name}")))?;
        let current = store.get(name).expect("name came from the store");
        if current.shape() != arr.shape() {
            return Err(Error::contract(format!(
                "parameter {name} has shape {:?} in the checkpoint but {:?} in the model",
                arr.shape(),
                current.shape()
            )));
        }
        store.set(name, arr.clone());
    }
    Ok(())
}
