//! Run configuration shared by the trainer, the evaluation harness, and the
//! command-line front end.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::envs::{NavigationConfig, TrafficJunctionConfig, TransportConfig};
use crate::error::{config, Result};
use crate::iwol::VariantMode;

/// Learning hyperparameters. Defaults follow the reference hyperparameter
/// table; `d_comm = None` means unlimited communication range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlobalConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub huber_delta: f64,
    pub entropy_coef: f64,
    pub lambda_w: f64,
    pub lambda_i: f64,
    pub latent_dim: usize,
    pub msg_dim: usize,
    pub feat_dim: usize,
    pub hidden_dim: usize,
    pub graph_dim: usize,
    pub num_heads: usize,
    pub comm_rounds: usize,
    pub d_comm: Option<f64>,
    pub gumbel_temperature: f64,
    pub feature_norm: bool,
    pub learning_rate: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub ppo_epochs: usize,
    pub num_minibatches: usize,
    pub normalize_advantages: bool,
    pub value_normalization: bool,
    /// Timesteps each worker collects per iteration.
    pub rollout_len: usize,
    pub num_workers: usize,
    /// OS threads used to step the workers; does not affect results.
    pub rollout_threads: usize,
    pub seed: u64,
}

impl Default for GlobalConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            huber_delta: 10.0,
            entropy_coef: 0.01,
            lambda_w: 0.05,
            lambda_i: 0.05,
            latent_dim: 32,
            msg_dim: 128,
            feat_dim: 64,
            hidden_dim: 128,
            graph_dim: 32,
            num_heads: 4,
            comm_rounds: 2,
            d_comm: None,
            gumbel_temperature: 1.0,
            feature_norm: true,
            learning_rate: 3e-4,
            adam_eps: 1e-5,
            weight_decay: 0.0,
            grad_clip_norm: 10.0,
            ppo_epochs: 5,
            num_minibatches: 1,
            normalize_advantages: true,
            value_normalization: true,
            rollout_len: 200,
            num_workers: 1,
            rollout_threads: 1,
            seed: 1,
        }
    }
}

impl GlobalConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(config(msg.to_string())) };
        check((0.0..1.0).contains(&self.gamma), "gamma must lie in [0, 1)")?;
        check((0.0..=1.0).contains(&self.gae_lambda), "gae_lambda must lie in [0, 1]")?;
        check(self.clip_eps > 0.0, "clip_eps must be positive")?;
        check(self.huber_delta > 0.0, "huber_delta must be positive")?;
        check(self.entropy_coef >= 0.0, "entropy_coef must be non-negative")?;
        check(self.lambda_w >= 0.0, "lambda_w must be non-negative")?;
        check(self.lambda_i >= 0.0, "lambda_i must be non-negative")?;
        for (name, v) in [
            ("latent_dim", self.latent_dim),
            ("msg_dim", self.msg_dim),
            ("feat_dim", self.feat_dim),
            ("hidden_dim", self.hidden_dim),
            ("graph_dim", self.graph_dim),
            ("num_heads", self.num_heads),
            ("comm_rounds", self.comm_rounds),
            ("ppo_epochs", self.ppo_epochs),
            ("num_minibatches", self.num_minibatches),
            ("rollout_len", self.rollout_len),
            ("num_workers", self.num_workers),
            ("rollout_threads", self.rollout_threads),
        ] {
            check(v > 0, &format!("{name} must be positive"))?;
        }
        if let Some(d) = self.d_comm {
            check(d > 0.0, "d_comm must be positive (omit it for unlimited range)")?;
        }
        check(self.gumbel_temperature > 0.0, "gumbel_temperature must be positive")?;
        check(self.learning_rate >= 0.0, "learning_rate must be non-negative")?;
        check(self.grad_clip_norm > 0.0, "grad_clip_norm must be positive")?;
        check(
            self.msg_dim % self.num_heads == 0,
            "msg_dim must be divisible by num_heads",
        )?;
        check(
            self.feat_dim % self.num_heads == 0,
            "feat_dim must be divisible by num_heads",
        )?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    TrafficJunction,
    SimpleNavigation,
    MaterialTransport,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    Mappo,
    ImIwol,
    ExIwol,
}

impl Algo {
    pub fn mode(self) -> VariantMode {
        match self {
            Algo::Mappo => VariantMode::MappoBaseline,
            Algo::ImIwol => VariantMode::Implicit,
            Algo::ExIwol => VariantMode::Explicit,
        }
    }
}

/// Everything needed to reproduce a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvKind,
    pub algo: Algo,
    /// Environment timesteps summed over workers.
    pub total_steps: u64,
    /// Iterations between evaluations; 0 disables periodic evaluation.
    pub eval_interval: usize,
    pub eval_episodes: usize,
    /// Iterations between checkpoints; 0 keeps only the final one.
    pub checkpoint_interval: usize,
    pub out_dir: Option<std::path::PathBuf>,
    pub train: GlobalConfig,
    pub traffic_junction: TrafficJunctionConfig,
    pub simple_navigation: NavigationConfig,
    pub material_transport: TransportConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: EnvKind::SimpleNavigation,
            algo: Algo::ImIwol,
            total_steps: 200_000,
            eval_interval: 0,
            eval_episodes: 20,
            checkpoint_interval: 0,
            out_dir: None,
            train: GlobalConfig::default(),
            traffic_junction: TrafficJunctionConfig::default(),
            simple_navigation: NavigationConfig::default(),
            material_transport: TransportConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        match self.env {
            EnvKind::TrafficJunction => self.traffic_junction.validate(),
            EnvKind::SimpleNavigation => self.simple_navigation.validate(),
            EnvKind::MaterialTransport => self.material_transport.validate(),
        }
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config(e.to_string()))
    }
}
