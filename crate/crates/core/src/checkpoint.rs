//! Self-describing checkpoints: parameters, optimizer state, value
//! normalizer, configuration, and RNG positions.

use std::path::Path;

use iwol_neural::ParameterStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{contract, Result};
use crate::iwol::{IwolModel, ModelConfig, VariantMode};
use crate::trainer::ValueNormalizer;

const FORMAT_VERSION: u32 = 1;

/// Position of one ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// 128-bit word position as a decimal string.
    pub word_pos: String,
}

impl RngState {
    pub fn of(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bytes = hex::decode(&self.seed).map_err(|e| contract(format!("bad rng seed: {e}")))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| contract("rng seed must be 32 bytes"))?;
        let pos: u128 = self.word_pos.parse().map_err(|e| contract(format!("bad word position: {e}")))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Metadata {
    format_version: u32,
    mode: VariantMode,
    config_hash: String,
    model: ModelConfig,
    run: RunConfig,
    normalizer: ValueNormalizer,
    iteration: usize,
    env_steps: u64,
    rng: Vec<RngState>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub run: RunConfig,
    pub model: ModelConfig,
    pub store: ParameterStore,
    pub normalizer: ValueNormalizer,
    pub iteration: usize,
    pub env_steps: u64,
    /// Policy-noise and episode-seed streams, two per worker.
    pub rng: Vec<RngState>,
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = Metadata {
            format_version: FORMAT_VERSION,
            mode: self.model.mode,
            config_hash: self.run.hash(),
            model: self.model.clone(),
            run: self.run.clone(),
            normalizer: self.normalizer.clone(),
            iteration: self.iteration,
            env_steps: self.env_steps,
            rng: self.rng.clone(),
        };
        self.store.save(dir, serde_json::to_value(meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (store, meta) = ParameterStore::load(dir)?;
        let meta: Metadata = serde_json::from_value(meta)?;
        if meta.format_version != FORMAT_VERSION {
            return Err(contract(format!("unsupported checkpoint format {}", meta.format_version)));
        }
        if meta.run.hash() != meta.config_hash {
            return Err(contract("checkpoint configuration does not match its hash"));
        }
        Ok(Self {
            run: meta.run,
            model: meta.model,
            store,
            normalizer: meta.normalizer,
            iteration: meta.iteration,
            env_steps: meta.env_steps,
            rng: meta.rng,
        })
    }

    /// Rebuilds the model structure and checks that the stored parameters
    /// fit it exactly.
    pub fn build_model(&self) -> Result<IwolModel> {
        let mut fresh = ParameterStore::new();
        let model = IwolModel::new(self.model.clone(), &mut fresh, &mut ChaCha8Rng::seed_from_u64(0))?;
        if fresh.len() != self.store.len() {
            return Err(contract(format!(
                "checkpoint holds {} parameters, model expects {}",
                self.store.len(),
                fresh.len()
            )));
        }
        for (a, b) in fresh.ids().zip(self.store.ids()) {
            if fresh.path(a) != self.store.path(b) || fresh.value(a).shape() != self.store.value(b).shape() {
                return Err(contract(format!(
                    "parameter `{}` does not match checkpoint entry `{}`",
                    fresh.path(a),
                    self.store.path(b)
                )));
            }
        }
        Ok(model)
    }
}
