use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::NeuralError;
use crate::tensor::Tensor;
use crate::Result;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "params.bin";
const FORMAT: &str = "iwol-params-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable parameters plus their Adam moments.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    paths: Vec<String>,
    index: HashMap<String, usize>,
    values: Vec<Tensor>,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
    step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Paths must be unique.
    pub fn insert(&mut self, path: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let path = path.into();
        if self.index.contains_key(&path) {
            return Err(NeuralError::Config(format!("duplicate parameter path `{path}`")));
        }
        let id = self.values.len();
        self.index.insert(path.clone(), id);
        self.paths.push(path);
        self.first_moment.push(Tensor::zeros(value.rows(), value.cols()));
        self.second_moment.push(Tensor::zeros(value.rows(), value.cols()));
        self.values.push(value);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn id(&self, path: &str) -> Option<ParamId> {
        self.index.get(path).copied().map(ParamId)
    }

    pub fn path(&self, id: ParamId) -> &str {
        &self.paths[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub(crate) fn adam_slots(&mut self, id: ParamId) -> (&mut Tensor, &mut Tensor, &mut Tensor) {
        (
            &mut self.values[id.0],
            &mut self.first_moment[id.0],
            &mut self.second_moment[id.0],
        )
    }

    pub(crate) fn increment_step(&mut self) -> u64 {
        self.step += 1;
        self.step
    }

    /// Serializes to a manifest plus a little-endian `f64` payload holding,
    /// per parameter in registration order, its values, first moment, and
    /// second moment.
    pub fn to_parts(&self, metadata: serde_json::Value) -> (Manifest, Vec<u8>) {
        let mut payload = Vec::with_capacity(self.num_scalars() * 3 * 8);
        let mut entries = Vec::with_capacity(self.values.len());
        let mut offset = 0usize;
        for (i, value) in self.values.iter().enumerate() {
            entries.push(ManifestEntry {
                path: self.paths[i].clone(),
                shape: [value.rows(), value.cols()],
                offset,
            });
            for t in [value, &self.first_moment[i], &self.second_moment[i]] {
                for x in t.data() {
                    payload.extend_from_slice(&x.to_le_bytes());
                }
            }
            offset += value.len() * 3;
        }
        let manifest = Manifest {
            format: FORMAT.to_string(),
            dtype: "f64-le".to_string(),
            optimizer_step: self.step,
            params: entries,
            metadata,
        };
        (manifest, payload)
    }

    pub fn from_parts(manifest: &Manifest, payload: &[u8]) -> Result<Self> {
        if manifest.format != FORMAT || manifest.dtype != "f64-le" {
            return Err(NeuralError::Checkpoint(format!(
                "unsupported format {} / {}",
                manifest.format, manifest.dtype
            )));
        }
        if payload.len() % 8 != 0 {
            return Err(NeuralError::Checkpoint("payload length not a multiple of 8".into()));
        }
        let floats: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let mut store = ParameterStore::new();
        for entry in &manifest.params {
            let [r, c] = entry.shape;
            let n = r * c;
            let end = entry.offset + 3 * n;
            if end > floats.len() {
                return Err(NeuralError::Checkpoint(format!(
                    "payload too short for `{}`",
                    entry.path
                )));
            }
            let slice = |k: usize| {
                Tensor::from_vec(r, c, floats[entry.offset + k * n..entry.offset + (k + 1) * n].to_vec())
            };
            let id = store.insert(entry.path.clone(), slice(0)?)?;
            store.first_moment[id.0] = slice(1)?;
            store.second_moment[id.0] = slice(2)?;
        }
        store.step = manifest.optimizer_step;
        Ok(store)
    }

    pub fn save(&self, dir: &Path, metadata: serde_json::Value) -> Result<()> {
        fs::create_dir_all(dir)?;
        let (manifest, payload) = self.to_parts(metadata);
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
        fs::write(dir.join(PAYLOAD_FILE), payload)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, serde_json::Value)> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
        let payload = fs::read(dir.join(PAYLOAD_FILE))?;
        let store = Self::from_parts(&manifest, &payload)?;
        Ok((store, manifest.metadata))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub dtype: String,
    pub optimizer_step: u64,
    pub params: Vec<ManifestEntry>,
    pub metadata: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub shape: [usize; 2],
    /// Offset into the payload, counted in `f64` values.
    pub offset: usize,
}

/// Gradients aligned with a [`ParameterStore`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn empty(n: usize) -> Self {
        Self {
            grads: vec![None; n],
        }
    }

    pub fn zeros_like(store: &ParameterStore) -> Self {
        Self {
            grads: store
                .values
                .iter()
                .map(|v| Some(Tensor::zeros(v.rows(), v.cols())))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn set(&mut self, id: ParamId, grad: Tensor) {
        if id.0 >= self.grads.len() {
            self.grads.resize(id.0 + 1, None);
        }
        self.grads[id.0] = Some(grad);
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &Tensor) {
        if id.0 >= self.grads.len() {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(g) => g.add_assign(grad),
            slot @ None => *slot = Some(grad.clone()),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.grads.iter_mut().filter_map(Option::as_mut)
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(Tensor::sq_norm)
            .sum::<f64>()
            .sqrt()
    }
}
