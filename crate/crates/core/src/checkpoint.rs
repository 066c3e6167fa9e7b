//! On-disk checkpoints: a directory holding `meta.json` and one `.shrt`
//! tensor file per matrix.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::{ModuleAdapter, Scaling, SuperAdapter};
use crate::error::{Result, ShearsError};
use crate::linalg::tensor_io::{read_matrix, write_matrix};
use crate::model::{Model, ModelConfig};

const META: &str = "meta.json";

#[derive(Debug, Serialize, Deserialize)]
struct ModelMeta {
    config: ModelConfig,
    frozen_hash: Option<String>,
    sparsity: Option<f64>,
    tensors: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdapterModuleMeta {
    name: String,
    rank_choices: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdapterMeta {
    alpha: f32,
    scaling: Scaling,
    trained: bool,
    modules: Vec<AdapterModuleMeta>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| ShearsError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| ShearsError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| ShearsError::io(dir, e))
}

/// Writes every tensor plus the recorded frozen hash and sparsity level.
pub fn save_model(model: &Model, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let tensors = model.named_tensors();
    for (name, t) in &tensors {
        write_matrix(&dir.join(format!("{name}.shrt")), t)?;
    }
    write_json(
        &dir.join(META),
        &ModelMeta {
            config: model.config.clone(),
            frozen_hash: model.frozen_hash().map(str::to_string),
            sparsity: model.sparsity_level(),
            tensors: tensors.into_iter().map(|(n, _)| n).collect(),
        },
    )
}

/// Loads a model. The frozen hash is restored as recorded, not recomputed,
/// so a tampered tensor fails [`Model::verify_frozen`].
pub fn load_model(dir: &Path) -> Result<Model> {
    let meta: ModelMeta = read_json(&dir.join(META))?;
    let load = |name: &str| read_matrix(&dir.join(format!("{name}.shrt")));
    let linears = meta
        .config
        .module_names()
        .iter()
        .map(|n| load(n))
        .collect::<Result<Vec<_>>>()?;
    let mut model = Model::from_parts(
        meta.config.clone(),
        load("embedding")?,
        load("positions")?,
        linears,
        load("head")?,
    )?;
    model.set_frozen_hash(meta.frozen_hash);
    model.set_sparsity_level(meta.sparsity);
    Ok(model)
}

pub fn save_adapter(adapter: &SuperAdapter, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    for m in &adapter.modules {
        write_matrix(&dir.join(format!("{}.a.shrt", m.name)), &m.a)?;
        write_matrix(&dir.join(format!("{}.b.shrt", m.name)), &m.b)?;
    }
    write_json(
        &dir.join(META),
        &AdapterMeta {
            alpha: adapter.alpha,
            scaling: adapter.scaling,
            trained: adapter.trained,
            modules: adapter
                .modules
                .iter()
                .map(|m| AdapterModuleMeta {
                    name: m.name.clone(),
                    rank_choices: m.rank_choices.clone(),
                })
                .collect(),
        },
    )
}

pub fn load_adapter(dir: &Path) -> Result<SuperAdapter> {
    let meta: AdapterMeta = read_json(&dir.join(META))?;
    let modules = meta
        .modules
        .into_iter()
        .map(|m| {
            let a = read_matrix(&dir.join(format!("{}.a.shrt", m.name)))?;
            let b = read_matrix(&dir.join(format!("{}.b.shrt", m.name)))?;
            ModuleAdapter::from_parts(m.name, b, a, m.rank_choices)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SuperAdapter {
        modules,
        alpha: meta.alpha,
        scaling: meta.scaling,
        trained: meta.trained,
    })
}
