use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Model, TrainConfig};
use crate::diffmath::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::posterior::PosteriorParams;
use crate::s2net::NetworkParams;

const FORMAT: &str = "spam-checkpoint/1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    payload: String,
    config: TrainConfig,
    epoch: usize,
    metric: f64,
    network: NetworkParams,
    posterior: PosteriorParams,
    tensors: Vec<TensorEntry>,
}

/// A trained model with the configuration and metric it was saved with.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: usize,
    pub metric: f64,
    pub model: Model,
}

fn payload_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `path` (JSON manifest) and a sibling `.bin` of little-endian `f64`s
/// in manifest order.
pub fn save_checkpoint(path: &Path, model: &Model, cfg: &TrainConfig, epoch: usize, metric: f64) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let bin = payload_path(path);
    let store = &model.store;
    let manifest = Manifest {
        format: FORMAT.into(),
        payload: bin.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
        config: cfg.clone(),
        epoch,
        metric,
        network: model.net.clone(),
        posterior: model.post,
        tensors: store
            .ids()
            .map(|id| TensorEntry {
                name: store.name(id).to_owned(),
                shape: store.get(id).shape().to_vec(),
            })
            .collect(),
    };
    let bytes: Vec<u8> = store.flatten().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&bin, bytes)?;
    fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let manifest: Manifest =
        serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| Error::Corrupt(format!("manifest: {e}")))?;
    if manifest.format != FORMAT {
        return Err(Error::Corrupt(format!("unknown format {:?}", manifest.format)));
    }
    let bin = path.with_file_name(&manifest.payload);
    let bytes = fs::read(&bin)?;
    let expected: usize = manifest.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if bytes.len() != 8 * expected {
        return Err(Error::Corrupt(format!(
            "{} holds {} bytes, manifest needs {}",
            bin.display(),
            bytes.len(),
            8 * expected
        )));
    }
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let mut store = ParamStore::new();
    for t in &manifest.tensors {
        let len = t.shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(len).collect();
        let tensor = Tensor::new(t.shape.clone(), data).map_err(|e| Error::Corrupt(format!("{}: {e}", t.name)))?;
        store.add(t.name.clone(), tensor);
    }
    let ids = manifest.network.ids().into_iter().chain(manifest.posterior.ids());
    for id in ids {
        if id.index() >= store.len() {
            return Err(Error::Corrupt(format!("parameter handle {} outside {} tensors", id.index(), store.len())));
        }
    }
    Ok(Checkpoint {
        config: manifest.config,
        epoch: manifest.epoch,
        metric: manifest.metric,
        model: Model {
            store,
            net: manifest.network,
            post: manifest.posterior,
        },
    })
}
