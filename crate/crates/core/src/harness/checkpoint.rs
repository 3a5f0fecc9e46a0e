//! Model checkpoints: `index.json` mapping each parameter name to a tensor
//! blob in the same directory, plus the architecture, method and class count.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::blob::{read_tensor, write_atomic, write_tensor};
use crate::autodiff::ParamStore;
use crate::backbone::{Backbone, BackboneConfig};
use crate::baselines::AdaptationMethod;
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    file: String,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointIndex {
    arch: BackboneConfig,
    #[serde(flatten)]
    method: AdaptationMethod,
    num_classes: usize,
    tensors: BTreeMap<String, ParamEntry>,
}

pub fn save_checkpoint(model: &Model, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut params = BTreeMap::new();
    for p in model.store.iter() {
        let file = format!("{}.bin", p.name);
        write_tensor(&dir.join(&file), &p.value)?;
        params.insert(
            p.name.clone(),
            ParamEntry {
                file,
                trainable: p.trainable,
            },
        );
    }
    let index = CheckpointIndex {
        arch: model.arch.clone(),
        method: model.method.clone(),
        num_classes: model.num_classes,
        tensors: params,
    };
    write_atomic(&dir.join("index.json"), serde_json::to_string_pretty(&index)?.as_bytes())
}

pub fn load_checkpoint(dir: &Path) -> Result<Model> {
    let path = dir.join("index.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: CheckpointIndex = serde_json::from_str(&text)?;
    index.arch.validate()?;
    let mut store = ParamStore::new();
    for (name, entry) in index.tensors {
        store.insert(name, read_tensor(&dir.join(&entry.file))?, entry.trainable);
    }
    Model::from_store(index.arch, index.method, index.num_classes, store)
}

/// The frozen backbone stored in any model checkpoint.
pub fn load_backbone(dir: &Path) -> Result<Backbone> {
    let model = load_checkpoint(dir)?;
    Ok(extract_backbone(&model))
}

pub fn extract_backbone(model: &Model) -> Backbone {
    let mut store = ParamStore::new();
    for p in model.store.iter().filter(|p| p.name.starts_with("backbone.")) {
        store.insert(p.name.clone(), p.value.clone(), false);
    }
    Backbone {
        cfg: model.arch.clone(),
        store,
    }
}
