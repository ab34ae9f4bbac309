//! Interactive-world latent model: encoder, communication protocol, latent
//! heads, decoders, and the policy/value networks for every variant.

use iwol_neural::{Activation, Mlp, ParameterStore, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::comm::{build_graph, GateMode, GraphScheduler, MessageProtocol, ObservationEncoder, TopologyGraph};
use crate::config::GlobalConfig;
use crate::error::{config, contract, Result};
use crate::rollout::EnvSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantMode {
    /// Latent from local features; messages reach only the value network.
    Implicit,
    /// Latent is the processed message; the policy consumes it.
    Explicit,
    /// No communication and no latent.
    MappoBaseline,
}

impl VariantMode {
    pub fn uses_comm(self) -> bool {
        self != VariantMode::MappoBaseline
    }
}

/// Architecture of an [`IwolModel`]; stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: VariantMode,
    pub num_agents: usize,
    pub obs_dim: usize,
    pub obs_token_layout: Vec<(usize, usize)>,
    pub num_actions: usize,
    pub privileged_dim: usize,
    pub feat_dim: usize,
    pub msg_dim: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub graph_dim: usize,
    pub num_heads: usize,
    pub comm_rounds: usize,
    pub d_comm: Option<f64>,
    pub gumbel_temperature: f64,
    pub feature_norm: bool,
}

impl ModelConfig {
    pub fn new(spec: &EnvSpec, global: &GlobalConfig, mode: VariantMode) -> Self {
        Self {
            mode,
            num_agents: spec.num_agents,
            obs_dim: spec.obs_dim,
            obs_token_layout: spec.obs_token_layout.clone(),
            num_actions: spec.num_actions,
            privileged_dim: spec.privileged_dim,
            feat_dim: global.feat_dim,
            msg_dim: global.msg_dim,
            latent_dim: if mode == VariantMode::Explicit {
                global.msg_dim
            } else {
                global.latent_dim
            },
            hidden_dim: global.hidden_dim,
            graph_dim: global.graph_dim,
            num_heads: global.num_heads,
            comm_rounds: global.comm_rounds,
            d_comm: global.d_comm,
            gumbel_temperature: global.gumbel_temperature,
            feature_norm: global.feature_norm,
        }
    }
}

/// Row-aligned inputs for `B` timesteps of `I` agents.
#[derive(Clone, Copy, Debug)]
pub struct BatchInputs<'a> {
    pub obs: &'a Tensor,
    pub positions: Option<&'a [[f64; 2]]>,
    pub active: &'a [bool],
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub features: Var,
    pub initial_messages: Option<Var>,
    pub graph: Option<TopologyGraph>,
    /// Messages after the protocol (and after any channel filter).
    pub messages: Option<Var>,
    pub latent: Option<Var>,
    pub logits: Var,
    pub value: Var,
}

#[derive(Clone, Debug)]
pub struct IwolModel {
    pub config: ModelConfig,
    encoder: ObservationEncoder,
    message_head: Option<Mlp>,
    scheduler: Option<GraphScheduler>,
    protocol: Option<MessageProtocol>,
    latent_encoder: Option<Mlp>,
    world_decoder: Option<Mlp>,
    interactive_decoder: Option<Mlp>,
    policy: Mlp,
    value: Mlp,
}

impl IwolModel {
    /// Creates the model and registers its parameters (only those the mode
    /// uses) in `store`.
    pub fn new<R: Rng + ?Sized>(cfg: ModelConfig, store: &mut ParameterStore, rng: &mut R) -> Result<Self> {
        if cfg.mode == VariantMode::Explicit && cfg.latent_dim != cfg.msg_dim {
            return Err(config("the explicit variant needs latent_dim = msg_dim"));
        }
        let h = cfg.hidden_dim;
        let hidden_gain = 2f64.sqrt();
        let mlp = |store: &mut ParameterStore, rng: &mut R, path: &str, dims: &[usize], out_gain: f64| {
            Mlp::new(store, path, dims, Activation::Tanh, hidden_gain, out_gain, rng)
        };
        let encoder = ObservationEncoder::new(
            store,
            "encoder",
            cfg.obs_dim,
            &cfg.obs_token_layout,
            cfg.feat_dim,
            cfg.num_heads,
            cfg.feature_norm,
            rng,
        )?;
        let comm = cfg.mode.uses_comm();
        let message_head = if comm {
            Some(mlp(store, rng, "message_head", &[cfg.feat_dim, cfg.msg_dim, cfg.msg_dim], 1.0)?)
        } else {
            None
        };
        let scheduler = if comm {
            Some(GraphScheduler::new(store, "scheduler", cfg.feat_dim, cfg.graph_dim, rng)?)
        } else {
            None
        };
        let protocol = if comm {
            Some(MessageProtocol::new(store, "protocol", cfg.msg_dim, cfg.num_heads, cfg.comm_rounds, rng)?)
        } else {
            None
        };
        let latent_encoder = if cfg.mode == VariantMode::Implicit {
            Some(mlp(store, rng, "latent_encoder", &[cfg.feat_dim, h, cfg.latent_dim], 1.0)?)
        } else {
            None
        };
        let world_decoder = if comm {
            Some(mlp(store, rng, "world_decoder", &[cfg.latent_dim, h, cfg.privileged_dim], 1.0)?)
        } else {
            None
        };
        let interactive_decoder = if cfg.mode == VariantMode::Implicit {
            Some(mlp(store, rng, "interactive_decoder", &[cfg.latent_dim, h, cfg.msg_dim], 1.0)?)
        } else {
            None
        };
        let policy_in = match cfg.mode {
            VariantMode::Implicit => cfg.latent_dim,
            VariantMode::Explicit => cfg.latent_dim + cfg.feat_dim,
            VariantMode::MappoBaseline => cfg.feat_dim,
        };
        let value_in = if comm { cfg.msg_dim + cfg.feat_dim } else { cfg.feat_dim };
        let policy = mlp(store, rng, "policy", &[policy_in, h, cfg.num_actions], 0.01)?;
        let value = mlp(store, rng, "value", &[value_in, h, 1], 1.0)?;
        Ok(Self {
            config: cfg,
            encoder,
            message_head,
            scheduler,
            protocol,
            latent_encoder,
            world_decoder,
            interactive_decoder,
            policy,
            value,
        })
    }

    pub fn mode(&self) -> VariantMode {
        self.config.mode
    }

    /// Features `f` (and initial messages `m⁽⁰⁾` when the mode communicates).
    pub fn encode(&self, tape: &mut Tape, store: &ParameterStore, obs: Var) -> Result<(Var, Option<Var>)> {
        let f = self.encoder.forward(tape, store, obs)?;
        let m0 = match &self.message_head {
            Some(head) => Some(head.forward(tape, store, f)?),
            None => None,
        };
        Ok((f, m0))
    }

    pub fn build_graph(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        f: Var,
        inputs: &BatchInputs<'_>,
        gate: GateMode<'_>,
    ) -> Result<TopologyGraph> {
        let scheduler = self
            .scheduler
            .as_ref()
            .ok_or_else(|| contract("the baseline has no communication graph"))?;
        build_graph(
            tape,
            store,
            scheduler,
            f,
            inputs.positions,
            inputs.active,
            self.config.num_agents,
            self.config.d_comm,
            self.config.gumbel_temperature,
            gate,
        )
    }

    pub fn process_messages(&self, tape: &mut Tape, store: &ParameterStore, m0: Var, graph: &TopologyGraph) -> Result<Var> {
        let protocol = self
            .protocol
            .as_ref()
            .ok_or_else(|| contract("the baseline has no message protocol"))?;
        protocol.forward(tape, store, m0, graph.adjacency, graph.agents)
    }

    pub fn make_latent(&self, tape: &mut Tape, store: &ParameterStore, f: Var, m: Var) -> Result<Var> {
        match self.config.mode {
            VariantMode::Implicit => Ok(self
                .latent_encoder
                .as_ref()
                .expect("implicit mode has a latent encoder")
                .forward(tape, store, f)?),
            VariantMode::Explicit => Ok(m),
            VariantMode::MappoBaseline => Err(contract("the baseline has no latent")),
        }
    }

    pub fn decode_world(&self, tape: &mut Tape, store: &ParameterStore, z: Var) -> Result<Var> {
        let dec = self
            .world_decoder
            .as_ref()
            .ok_or_else(|| contract("the baseline has no world decoder"))?;
        Ok(dec.forward(tape, store, z)?)
    }

    pub fn decode_interactive(&self, tape: &mut Tape, store: &ParameterStore, z: Var) -> Result<Var> {
        let dec = self
            .interactive_decoder
            .as_ref()
            .ok_or_else(|| contract("only the implicit variant has an interactive decoder"))?;
        Ok(dec.forward(tape, store, z)?)
    }

    /// World and interactive reconstruction errors, each a weighted mean
    /// over rows of the per-row mean squared error. Targets are constants.
    /// The interactive term is `None` outside the implicit variant.
    pub fn reconstruction_losses(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        z: Var,
        privileged: &Tensor,
        messages: &Tensor,
        weights: &[f64],
    ) -> Result<(Var, Option<Var>)> {
        let s_hat = self.decode_world(tape, store, z)?;
        let lw = mse(tape, s_hat, privileged, weights)?;
        let li = if self.config.mode == VariantMode::Implicit {
            let m_hat = self.decode_interactive(tape, store, z)?;
            Some(mse(tape, m_hat, messages, weights)?)
        } else {
            None
        };
        Ok((lw, li))
    }

    /// Action logits from the mode's policy input: `z` (implicit), `[z, f]`
    /// (explicit), or `f` (baseline).
    pub fn policy_forward(&self, tape: &mut Tape, store: &ParameterStore, z: Option<Var>, f: Var) -> Result<Var> {
        let input = match (self.config.mode, z) {
            (VariantMode::Implicit, Some(z)) => z,
            (VariantMode::Explicit, Some(z)) => tape.concat_cols(&[z, f])?,
            (VariantMode::MappoBaseline, None) => f,
            (mode, _) => return Err(contract(format!("wrong policy inputs for {mode:?}"))),
        };
        Ok(self.policy.forward(tape, store, input)?)
    }

    /// Per-agent value from `[m, f]` (or `f` for the baseline), in the
    /// normalized units the value head is trained in.
    pub fn value_forward(&self, tape: &mut Tape, store: &ParameterStore, m: Option<Var>, f: Var) -> Result<Var> {
        let input = match (self.config.mode.uses_comm(), m) {
            (true, Some(m)) => tape.concat_cols(&[m, f])?,
            (false, None) => f,
            _ => return Err(contract("wrong value inputs for the variant")),
        };
        Ok(self.value.forward(tape, store, input)?)
    }

    /// Full forward pass. `channel` replaces the processed messages before
    /// any consumer sees them (used for degradation experiments).
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        inputs: &BatchInputs<'_>,
        gate: GateMode<'_>,
        channel: Option<&mut dyn FnMut(&Tensor) -> Tensor>,
    ) -> Result<ForwardOutput> {
        let (n, d) = inputs.obs.shape();
        if d != self.config.obs_dim || n % self.config.num_agents != 0 || inputs.active.len() != n {
            return Err(contract(format!(
                "batch of {n}×{d} observations with {} flags for {} agents",
                inputs.active.len(),
                self.config.num_agents
            )));
        }
        let obs = tape.constant(inputs.obs.clone());
        let (f, m0) = self.encode(tape, store, obs)?;
        let Some(m0) = m0 else {
            let logits = self.policy_forward(tape, store, None, f)?;
            let value = self.value_forward(tape, store, None, f)?;
            return Ok(ForwardOutput {
                features: f,
                initial_messages: None,
                graph: None,
                messages: None,
                latent: None,
                logits,
                value,
            });
        };
        let graph = self.build_graph(tape, store, f, inputs, gate)?;
        let mut m = self.process_messages(tape, store, m0, &graph)?;
        if let Some(filter) = channel {
            let replaced = filter(tape.value(m));
            if replaced.shape() != tape.value(m).shape() {
                return Err(contract("message channel changed the message shape"));
            }
            m = tape.constant(replaced);
        }
        let z = self.make_latent(tape, store, f, m)?;
        let logits = self.policy_forward(tape, store, Some(z), f)?;
        let value = self.value_forward(tape, store, Some(m), f)?;
        Ok(ForwardOutput {
            features: f,
            initial_messages: Some(m0),
            graph: Some(graph),
            messages: Some(m),
            latent: Some(z),
            logits,
            value,
        })
    }
}

/// Weighted mean over rows of the per-row mean squared error against a
/// constant target.
pub fn mse(tape: &mut Tape, pred: Var, target: &Tensor, weights: &[f64]) -> Result<Var> {
    if tape.value(pred).shape() != target.shape() {
        return Err(contract(format!(
            "prediction {:?} vs target {:?}",
            tape.value(pred).shape(),
            target.shape()
        )));
    }
    let c = target.cols() as f64;
    Ok(tape.row_loss(pred, weights, |i, row, d| {
        let t = target.row(i);
        let mut acc = 0.0;
        for k in 0..row.len() {
            let e = row[k] - t[k];
            acc += e * e;
            d[k] = 2.0 * e / c;
        }
        acc / c
    })?)
}
