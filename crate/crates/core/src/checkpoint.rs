//! Training snapshots: a JSON index plus one binary tensor blob.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::mapnet::MapParams;
use crate::optim::{Adam, ParamSet, RmsProp};
use crate::pcl::{PclParams, PercentileState};
use crate::pup::PrototypeStore;
use crate::tensor::{ParamId, Tensor};
use crate::trainer::TrainState;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TENSORS_FILE: &str = "tensors.bin";
pub const CHECKPOINT_FORMAT: &str = "clzsl-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointIndex {
    pub format: String,
    pub version: u32,
    pub epoch: usize,
    pub seen_classes: usize,
    pub config: TrainConfig,
    pub percentile: PercentileState,
    pub rmsprop_steps: u64,
    pub adam_steps: u64,
    pub aux_rmsprop_steps: Option<u64>,
    pub tensors_sha256: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Default)]
struct Blob {
    entries: Vec<TensorEntry>,
    values: Vec<f64>,
}

impl Blob {
    fn push(&mut self, name: String, t: &Tensor) {
        self.entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: self.values.len(),
        });
        self.values.extend_from_slice(t.data());
    }

    fn push_params<P: ParamSet + ?Sized>(&mut self, prefix: &str, params: &P) {
        for (_, name, t) in params.entries() {
            self.push(format!("{prefix}.{name}"), t);
        }
    }

    fn push_state(&mut self, prefix: &str, state: &BTreeMap<ParamId, Vec<f64>>) {
        for (id, v) in state {
            self.push(format!("{prefix}.{}", id.0), &Tensor::vector(v.clone()));
        }
    }
}

struct Table {
    tensors: BTreeMap<String, Tensor>,
}

impl Table {
    fn take(&mut self, name: &str) -> Result<Tensor> {
        self.tensors
            .remove(name)
            .ok_or_else(|| Error::Integrity(format!("checkpoint lacks tensor {name:?}")))
    }

    fn fill<P: ParamSet + ?Sized>(&mut self, prefix: &str, params: &mut P) -> Result<()> {
        for (_, name, slot) in params.entries_mut() {
            let t = self.take(&format!("{prefix}.{name}"))?;
            if t.shape() != slot.shape() {
                return Err(Error::Integrity(format!(
                    "tensor {prefix}.{name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(())
    }

    fn state(&mut self, prefix: &str) -> Result<BTreeMap<ParamId, Vec<f64>>> {
        let dotted = format!("{prefix}.");
        let names: Vec<String> = self
            .tensors
            .keys()
            .filter(|k| k.starts_with(&dotted))
            .cloned()
            .collect();
        let mut out = BTreeMap::new();
        for name in names {
            let id: u32 = name[dotted.len()..]
                .parse()
                .map_err(|_| Error::Integrity(format!("bad optimizer tensor name {name:?}")))?;
            out.insert(ParamId(id), self.take(&name)?.into_data());
        }
        Ok(out)
    }
}

/// Writes `state` under `dir`, creating the directory.
pub fn save(dir: &Path, state: &TrainState, config: &TrainConfig) -> Result<CheckpointIndex> {
    let mut blob = Blob::default();
    blob.push_params("theta", &state.theta);
    blob.push_params("phi", &state.phi);
    blob.push_state("rmsprop.square_avg", &state.rmsprop.square_avg);
    blob.push_state("adam.first", &state.adam.first);
    blob.push_state("adam.second", &state.adam.second);
    blob.push("store.original".into(), state.store.original());
    blob.push("store.current".into(), state.store.current());
    if let Some((aux, opt)) = &state.aux {
        blob.push_params("aux", aux);
        blob.push_state("aux_rmsprop.square_avg", &opt.square_avg);
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(TENSORS_FILE);
    let sha = binio::write_f64_file(&path, &blob.values).map_err(|e| Error::io(&path, e))?;
    let index = CheckpointIndex {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        epoch: state.epochs_done,
        seen_classes: state.store.seen_classes(),
        config: config.clone(),
        percentile: state.percentile.clone(),
        rmsprop_steps: state.rmsprop.steps,
        adam_steps: state.adam.steps,
        aux_rmsprop_steps: state.aux.as_ref().map(|(_, o)| o.steps),
        tensors_sha256: sha,
        tensors: blob.entries,
    };
    let path = dir.join(CHECKPOINT_FILE);
    let mut text = serde_json::to_string_pretty(&index).expect("checkpoint index serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

/// Reads a checkpoint directory (or its `checkpoint.json`), verifying the blob checksum.
pub fn load(path: &Path) -> Result<(TrainState, TrainConfig)> {
    let dir = if path.is_dir() { path } else { path.parent().unwrap_or(Path::new(".")) };
    let index_path = dir.join(CHECKPOINT_FILE);
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let index: CheckpointIndex = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: index_path.clone(),
        source,
    })?;
    if index.format != CHECKPOINT_FORMAT || index.version != CHECKPOINT_VERSION {
        return Err(Error::Integrity(format!(
            "{} is not a version {CHECKPOINT_VERSION} checkpoint",
            index_path.display()
        )));
    }
    let blob_path = dir.join(TENSORS_FILE);
    let bytes = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    if binio::sha256_hex(&bytes) != index.tensors_sha256 {
        return Err(Error::Integrity(format!("checksum mismatch for {}", blob_path.display())));
    }
    let values = binio::decode_f64(&bytes)
        .ok_or_else(|| Error::Integrity(format!("{} is truncated", blob_path.display())))?;
    let mut tensors = BTreeMap::new();
    for e in &index.tensors {
        let len: usize = e.shape.iter().product();
        let slice = values
            .get(e.offset..e.offset + len)
            .ok_or_else(|| Error::Integrity(format!("tensor {:?} runs past the blob", e.name)))?;
        tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), slice.to_vec())?);
    }
    let mut table = Table { tensors };
    let config = index.config.clone();

    let original = table.take("store.original")?;
    let current = table.take("store.current")?;
    if original.rank() != 2 {
        return Err(Error::Integrity("prototype tensor is not a matrix".into()));
    }
    let store = PrototypeStore::new(original, index.seen_classes, config.beta, config.k_neighbors)?
        .with_current(current)?;
    let (k, d) = match table.tensors.get("theta.w1") {
        Some(w1) if w1.rank() == 2 => (w1.rows(), w1.cols()),
        _ => return Err(Error::Integrity("checkpoint lacks a valid theta.w1".into())),
    };
    let mut theta = MapParams::zeros(k, d);
    table.fill("theta", &mut theta)?;
    let buckets = config.pcl_dims;
    let mut phi = PclParams::zeros(buckets, index.seen_classes, config.temperature)?;
    table.fill("phi", &mut phi)?;
    let rmsprop = RmsProp {
        square_avg: table.state("rmsprop.square_avg")?,
        steps: index.rmsprop_steps,
        ..RmsProp::default()
    };
    let adam = Adam {
        first: table.state("adam.first")?,
        second: table.state("adam.second")?,
        steps: index.adam_steps,
        ..Adam::default()
    };
    let aux = match index.aux_rmsprop_steps {
        None => None,
        Some(steps) => {
            let mut aux = MapParams::zeros(k, d);
            table.fill("aux", &mut aux)?;
            let opt = RmsProp {
                square_avg: table.state("aux_rmsprop.square_avg")?,
                steps,
                ..RmsProp::default()
            };
            Some((aux, opt))
        }
    };
    if let Some(name) = table.tensors.keys().next() {
        return Err(Error::Integrity(format!("unexpected tensor {name:?} in checkpoint")));
    }
    let state = TrainState {
        theta,
        phi,
        rmsprop,
        adam,
        percentile: index.percentile,
        store,
        aux,
        epochs_done: index.epoch,
    };
    Ok((state, config))
}
