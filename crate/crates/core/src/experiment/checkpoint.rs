//! On-disk model checkpoints.
//!
//! ```text
//! <root>/<method>/seed-<s>/manifest.json
//! <root>/<method>/seed-<s>/tensors/<name>.bin      little-endian f64
//! <root>/deep_ensemble-M/seed-<s>/member-<m>/...    one checkpoint per member
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::Method;
use crate::anchoring::AnchorSource;
use crate::autodiff::{Matrix, Params};
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};

pub const CHECKPOINT_VERSION: &str = "v1";
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: String,
    method: Method,
    seed: u64,
    train_seed: u64,
    spec: ModelSpec,
    tensors: Vec<TensorEntry>,
    frozen_backbone: Option<String>,
    anchor_source: Option<AnchorSource>,
}

/// A trained model with everything evaluation needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub method: Method,
    pub seed: u64,
    pub train_seed: u64,
    pub model: Model,
    pub anchor_source: Option<AnchorSource>,
}

pub fn cell_dir(root: &Path, method: Method, seed: u64) -> PathBuf {
    root.join(method.slug()).join(format!("seed-{seed}"))
}

fn member_dir(cell: &Path, m: usize) -> PathBuf {
    cell.join(format!("member-{m}"))
}

fn tensor_file(name: &str) -> String {
    format!("{name}.bin")
}

pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    let tensors_dir = dir.join("tensors");
    fs::create_dir_all(&tensors_dir)?;
    let mut entries = Vec::new();
    for (name, m) in ckpt.model.params.iter() {
        let file = tensor_file(name);
        let bytes: Vec<u8> = m.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(tensors_dir.join(&file), bytes)?;
        entries.push(TensorEntry {
            name: name.to_string(),
            rows: m.rows(),
            cols: m.cols(),
            file,
        });
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION.into(),
        method: ckpt.method,
        seed: ckpt.seed,
        train_seed: ckpt.train_seed,
        spec: ckpt.model.spec,
        tensors: entries,
        frozen_backbone: ckpt.model.frozen_backbone.clone(),
        anchor_source: ckpt.anchor_source.clone(),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join(MANIFEST), text)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::input(format!(
            "{}: unsupported checkpoint version {}",
            path.display(),
            manifest.version
        )));
    }
    let mut params = Params::new();
    for t in &manifest.tensors {
        let file = dir.join("tensors").join(&t.file);
        let bytes = fs::read(&file).map_err(|e| Error::MissingArtifact(format!("{}: {e}", file.display())))?;
        if bytes.len() != t.rows * t.cols * 8 {
            return Err(Error::input(format!(
                "{}: expected {} values, found {} bytes",
                file.display(),
                t.rows * t.cols,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        params.insert(t.name.clone(), Matrix::new(t.rows, t.cols, data)?);
    }
    let reference = crate::model::init_params(&manifest.spec, 0)?;
    for (name, m) in reference.iter() {
        match params.get(name) {
            Some(p) if p.shape() == m.shape() => {}
            _ => {
                return Err(Error::input(format!(
                    "{}: parameter `{name}` missing or mis-shaped",
                    path.display()
                )))
            }
        }
    }
    Ok(Checkpoint {
        method: manifest.method,
        seed: manifest.seed,
        train_seed: manifest.train_seed,
        model: Model {
            spec: manifest.spec,
            params,
            frozen_backbone: manifest.frozen_backbone,
        },
        anchor_source: manifest.anchor_source,
    })
}

/// Saves the member checkpoints of one `(method, seed)` cell.
pub fn save_cell(root: &Path, members: &[Checkpoint]) -> Result<PathBuf> {
    let first = members.first().ok_or_else(|| Error::input("no members to save"))?;
    let cell = cell_dir(root, first.method, first.seed);
    if members.len() == 1 && first.method.members() == 1 {
        save_checkpoint(&cell, first)?;
    } else {
        for (m, ckpt) in members.iter().enumerate() {
            save_checkpoint(&member_dir(&cell, m), ckpt)?;
        }
    }
    Ok(cell)
}

/// Loads every member of one `(method, seed)` cell.
pub fn load_cell(root: &Path, method: Method, seed: u64) -> Result<Vec<Checkpoint>> {
    let cell = cell_dir(root, method, seed);
    let missing = |e: Error| match e {
        Error::MissingArtifact(detail) => {
            Error::MissingArtifact(format!("no checkpoint for method {method}, seed {seed} ({detail})"))
        }
        other => other,
    };
    let dirs: Vec<PathBuf> = match method {
        Method::DeepEnsemble(m) => (0..m).map(|i| member_dir(&cell, i)).collect(),
        _ => vec![cell.clone()],
    };
    let members: Vec<Checkpoint> = dirs
        .iter()
        .map(|d| load_checkpoint(d).map_err(missing))
        .collect::<Result<_>>()?;
    for c in &members {
        if c.method != method || c.seed != seed {
            return Err(Error::input(format!(
                "{} holds method {} seed {}, expected {method} seed {seed}",
                cell.display(),
                c.method,
                c.seed
            )));
        }
    }
    Ok(members)
}
