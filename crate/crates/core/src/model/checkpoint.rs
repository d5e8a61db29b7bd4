//! Checkpoint directories: `manifest.json` plus raw little-endian `f64`
//! arrays, one file per parameter-shaped state (`params.bin`, optimizer
//! moments, ...).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

use super::network::ModelConfig;
use super::params::Group;
use super::LgtseModel;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FORMAT: &str = "lgtse-checkpoint";
/// `major.minor`; readers accept any minor of their major.
pub const CHECKPOINT_VERSION: &str = "1.0";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: Group,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: String,
    pub config: ModelConfig,
    /// training stage that produced the weights
    pub stage: Option<String>,
    pub params: Vec<ParamEntry>,
    /// array file stem -> sha256 of its bytes; always contains `params`
    pub arrays: BTreeMap<String, String>,
    /// opaque resumable training state
    #[serde(default)]
    pub state: serde_json::Value,
}

/// A loaded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub model: LgtseModel,
    /// parameter-shaped arrays other than the weights, by file stem
    pub extra: BTreeMap<String, Vec<Tensor>>,
}

fn encode(ts: &[Tensor]) -> Vec<u8> {
    let mut out = Vec::with_capacity(ts.iter().map(|t| t.len() * 8).sum());
    for t in ts {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn decode(bytes: &[u8], entries: &[ParamEntry], what: &str) -> Result<Vec<Tensor>> {
    let total: usize = entries.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if bytes.len() != total * 8 {
        return Err(Error::Checkpoint(format!(
            "{what}: {} bytes, manifest implies {}",
            bytes.len(),
            total * 8
        )));
    }
    let mut vals = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    Ok(entries
        .iter()
        .map(|e| {
            let n = e.shape.iter().product();
            Tensor::new(e.shape.clone(), vals.by_ref().take(n).collect())
        })
        .collect())
}

fn hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Write a checkpoint atomically: the directory is assembled next to
/// `dir` and renamed into place.
pub fn save_checkpoint(
    dir: &Path,
    model: &LgtseModel,
    stage: Option<&str>,
    state: serde_json::Value,
    extra: &[(&str, &[Tensor])],
) -> Result<()> {
    let params = model.params();
    let entries: Vec<ParamEntry> = params
        .names()
        .iter()
        .zip(params.tensors())
        .zip(params.groups())
        .map(|((n, t), g)| ParamEntry {
            name: n.clone(),
            shape: t.shape().to_vec(),
            group: *g,
        })
        .collect();
    let name = dir
        .file_name()
        .ok_or_else(|| Error::Checkpoint(format!("bad checkpoint path {}", dir.display())))?
        .to_string_lossy()
        .into_owned();
    let parent = dir.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
    let tmp = parent.join(format!(".{name}.tmp"));
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;

    let mut arrays = BTreeMap::new();
    let mut blobs: Vec<(&str, &[Tensor])> = vec![("params", params.tensors())];
    blobs.extend_from_slice(extra);
    for (stem, ts) in blobs {
        if ts.len() != entries.len()
            || ts.iter().zip(&entries).any(|(t, e)| t.shape() != e.shape.as_slice())
        {
            return Err(Error::Checkpoint(format!("array {stem} is not parameter-shaped")));
        }
        let bytes = encode(ts);
        arrays.insert(stem.to_string(), hex(&bytes));
        write(&tmp.join(format!("{stem}.bin")), &bytes)?;
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION.into(),
        config: model.config().clone(),
        stage: stage.map(str::to_owned),
        params: entries,
        arrays,
        state,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    write(&tmp.join(MANIFEST_FILE), format!("{json}\n").as_bytes())?;

    let old = parent.join(format!(".{name}.old"));
    if dir.exists() {
        if old.exists() {
            std::fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
        }
        std::fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
    if old.exists() {
        std::fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    }
    Ok(())
}

fn major(v: &str) -> &str {
    v.split('.').next().unwrap_or(v)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::Checkpoint(format!("no checkpoint at {}", dir.display())));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unknown format {:?}", manifest.format)));
    }
    if major(&manifest.version) != major(CHECKPOINT_VERSION) {
        return Err(Error::Checkpoint(format!(
            "checkpoint version {} incompatible with reader {CHECKPOINT_VERSION}",
            manifest.version
        )));
    }
    let mut extra = BTreeMap::new();
    let mut weights = None;
    for (stem, digest) in &manifest.arrays {
        let p = dir.join(format!("{stem}.bin"));
        let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        if &hex(&bytes) != digest {
            return Err(Error::Checkpoint(format!("{} failed its checksum", p.display())));
        }
        let ts = decode(&bytes, &manifest.params, stem)?;
        if stem == "params" {
            weights = Some(ts);
        } else {
            extra.insert(stem.clone(), ts);
        }
    }
    let weights = weights.ok_or_else(|| Error::Checkpoint("manifest lists no params array".into()))?;
    let mut model = LgtseModel::new(manifest.config.clone())?;
    let names: Vec<&str> = manifest.params.iter().map(|e| e.name.as_str()).collect();
    let expected: Vec<&str> = model.params().names().iter().map(String::as_str).collect();
    if names != expected {
        return Err(Error::Checkpoint("parameter names do not match the architecture".into()));
    }
    for (dst, src) in model.params_mut().tensors_mut().iter_mut().zip(weights) {
        if dst.shape() != src.shape() {
            return Err(Error::Checkpoint("parameter shape mismatch".into()));
        }
        *dst = src;
    }
    Ok(Checkpoint {
        manifest,
        model,
        extra,
    })
}
