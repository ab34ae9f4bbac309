//! Graph-attention communication: an observation encoder, a Gumbel-gated
//! topology scheduler, and L rounds of masked Transformer message passing.
//!
//! Batches hold `B` timesteps of `I` agents as `B·I` consecutive rows; every
//! cross-agent operation acts within blocks of `I` rows.

use iwol_neural::{Activation, EdgeState, LayerNorm, Linear, Mlp, ParamId, ParameterStore, SelfAttentionBlock, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{config, contract, Result};

/// Observation encoder: per-token embeddings, self-attention across the
/// agent's own tokens, mean pooling, and optional layer normalization.
#[derive(Clone, Debug)]
pub struct ObservationEncoder {
    layout: Vec<(usize, usize)>,
    obs_dim: usize,
    tokens: Vec<Linear>,
    attention: SelfAttentionBlock,
    norm: Option<LayerNorm>,
}

impl ObservationEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        path: &str,
        obs_dim: usize,
        layout: &[(usize, usize)],
        feat_dim: usize,
        heads: usize,
        feature_norm: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let mut next = 0;
        for &(offset, len) in layout {
            if offset != next || len == 0 {
                return Err(config(format!("token layout {layout:?} is not contiguous")));
            }
            next += len;
        }
        if next != obs_dim {
            return Err(config(format!(
                "token layout {layout:?} does not cover {obs_dim} observation entries"
            )));
        }
        let tokens = layout
            .iter()
            .enumerate()
            .map(|(k, &(_, len))| Linear::new(store, &format!("{path}.token{k}"), len, feat_dim, 1.0, rng))
            .collect::<iwol_neural::Result<Vec<_>>>()?;
        Ok(Self {
            layout: layout.to_vec(),
            obs_dim,
            tokens,
            attention: SelfAttentionBlock::new(store, &format!("{path}.attention"), feat_dim, heads, rng)?,
            norm: if feature_norm {
                Some(LayerNorm::new(store, &format!("{path}.feature_norm"), feat_dim)?)
            } else {
                None
            },
        })
    }

    /// Maps `N × obs_dim` observations to `N × feat_dim` features. Row `i` of
    /// the output depends on row `i` of the input only.
    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, obs: Var) -> Result<Var> {
        let cols = tape.value(obs).cols();
        if cols != self.obs_dim {
            return Err(config(format!(
                "observation width {cols} does not match the encoder's {}",
                self.obs_dim
            )));
        }
        let mut embedded = Vec::with_capacity(self.tokens.len());
        for (&(offset, len), lin) in self.layout.iter().zip(&self.tokens) {
            let slice = tape.slice_cols(obs, offset, len)?;
            embedded.push(lin.forward(tape, store, slice)?);
        }
        let t = embedded.len();
        let seq = tape.interleave_rows(&embedded)?;
        let attended = self.attention.forward(tape, store, seq, t, None)?;
        let pooled = tape.mean_pool(attended, t)?;
        match &self.norm {
            Some(n) => Ok(n.forward(tape, store, pooled)?),
            None => Ok(pooled),
        }
    }
}

/// Additive-attention edge scorer: `e_ij = a·[W f_i ‖ W f_j]`.
#[derive(Clone, Debug)]
pub struct GraphScheduler {
    pub projection: ParamId,
    pub attention: ParamId,
}

impl GraphScheduler {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        path: &str,
        feat_dim: usize,
        graph_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            projection: store.insert(
                format!("{path}.projection"),
                iwol_neural::init::orthogonal(feat_dim, graph_dim, 1.0, rng),
            )?,
            attention: store.insert(
                format!("{path}.attention"),
                iwol_neural::init::orthogonal(graph_dim, 2, 1.0, rng),
            )?,
        })
    }

    /// `N × I` score matrix, row `b·I + i` holding `e_ij` for block `b`.
    pub fn scores(&self, tape: &mut Tape, store: &ParameterStore, f: Var, agents: usize) -> Result<Var> {
        let w = tape.param(store, self.projection);
        let a = tape.param(store, self.attention);
        let proj = tape.matmul(f, w)?;
        let uv = tape.matmul(proj, a)?;
        Ok(tape.pair_scores(uv, agents)?)
    }
}

/// How the keep/drop gate of every directed edge is chosen.
#[derive(Clone, Copy, Debug)]
pub enum GateMode<'a> {
    /// Gumbel-Softmax with the given `(N·I) × 2` keep/drop noise.
    Sampled { noise: &'a Tensor, hard: bool },
    /// Keep an edge exactly when its score favors keeping (noise-free).
    Argmax,
    /// Keep every edge the masks allow.
    AllKeep,
}

#[derive(Clone, Debug)]
pub struct TopologyGraph {
    /// `N × I` gates, `g_ij = 1` when agent `i` receives from agent `j`.
    pub adjacency: Var,
    /// Row-major `N × I` proximity mask.
    pub proximity: Vec<bool>,
    pub scores: Option<Var>,
    pub agents: usize,
}

impl TopologyGraph {
    pub fn adjacency_matrix(&self, tape: &Tape) -> Tensor {
        tape.value(self.adjacency).clone()
    }
}

/// `‖x_i − x_j‖ ≤ d_comm` for every pair inside each block of `agents` rows.
pub fn proximity_mask(positions: Option<&[[f64; 2]]>, rows: usize, agents: usize, d_comm: Option<f64>) -> Result<Vec<bool>> {
    let Some(d) = d_comm else {
        return Ok(vec![true; rows * agents]);
    };
    let pos = positions.ok_or_else(|| config("a finite d_comm requires agent positions"))?;
    if pos.len() != rows {
        return Err(contract(format!("{} positions for {rows} rows", pos.len())));
    }
    let mut mask = vec![false; rows * agents];
    for blk in 0..rows / agents {
        for i in 0..agents {
            let p = pos[blk * agents + i];
            for j in 0..agents {
                let q = pos[blk * agents + j];
                let dist = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
                mask[(blk * agents + i) * agents + j] = i == j || dist <= d;
            }
        }
    }
    Ok(mask)
}

/// Builds the gated adjacency: hard Gumbel keep/drop per directed edge over
/// logits `[e_ij, 0]`, intersected with the proximity mask and the activity
/// of both endpoints, with the diagonal forced on.
#[allow(clippy::too_many_arguments)]
pub fn build_graph(
    tape: &mut Tape,
    store: &ParameterStore,
    scheduler: &GraphScheduler,
    f: Var,
    positions: Option<&[[f64; 2]]>,
    active: &[bool],
    agents: usize,
    d_comm: Option<f64>,
    temperature: f64,
    mode: GateMode<'_>,
) -> Result<TopologyGraph> {
    let n = tape.value(f).rows();
    if agents == 0 || n % agents != 0 {
        return Err(contract(format!("{n} rows do not split into blocks of {agents} agents")));
    }
    if active.len() != n {
        return Err(contract(format!("{} activity flags for {n} rows", active.len())));
    }
    let proximity = proximity_mask(positions, n, agents, d_comm)?;
    let mut states = Vec::with_capacity(n * agents);
    for row in 0..n {
        let blk = row / agents;
        let i = row % agents;
        for j in 0..agents {
            let peer = blk * agents + j;
            states.push(if i == j {
                EdgeState::On
            } else if !proximity[row * agents + j] || !active[row] || !active[peer] {
                EdgeState::Off
            } else {
                EdgeState::Free
            });
        }
    }

    let (gate, scores) = match mode {
        GateMode::AllKeep => (tape.constant(Tensor::filled(n, agents, 1.0)), None),
        GateMode::Sampled { .. } | GateMode::Argmax => {
            let e = scheduler.scores(tape, store, f, agents)?;
            let col = tape.reshape(e, n * agents, 1)?;
            let zeros = tape.constant(Tensor::zeros(n * agents, 1));
            let logits = tape.concat_cols(&[col, zeros])?;
            let g = match mode {
                GateMode::Sampled { noise, hard } => tape.gumbel_softmax(logits, noise, temperature, hard)?,
                _ => tape.gumbel_softmax(logits, &Tensor::zeros(n * agents, 2), temperature, true)?,
            };
            let keep = tape.slice_cols(g, 0, 1)?;
            (tape.reshape(keep, n, agents)?, Some(e))
        }
    };
    let adjacency = tape.edge_mask(gate, states)?;
    Ok(TopologyGraph {
        adjacency,
        proximity,
        scores,
        agents,
    })
}

/// One round: `h = LN(x + MHA_G(x))`, then `LN(h + FFN(h))`.
#[derive(Clone, Debug)]
struct ProtocolRound {
    attention: SelfAttentionBlock,
    ffn: Mlp,
    norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct MessageProtocol {
    rounds: Vec<ProtocolRound>,
    heads: usize,
}

impl MessageProtocol {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        path: &str,
        msg_dim: usize,
        heads: usize,
        rounds: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if rounds == 0 {
            return Err(config("at least one communication round is required"));
        }
        let rounds = (0..rounds)
            .map(|l| -> Result<ProtocolRound> {
                let p = format!("{path}.round{l}");
                Ok(ProtocolRound {
                    attention: SelfAttentionBlock::new(store, &format!("{p}.attention"), msg_dim, heads, rng)?,
                    ffn: Mlp::new(
                        store,
                        &format!("{p}.ffn"),
                        &[msg_dim, msg_dim, msg_dim],
                        Activation::Tanh,
                        2f64.sqrt(),
                        1.0,
                        rng,
                    )?,
                    norm: LayerNorm::new(store, &format!("{p}.norm"), msg_dim)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { rounds, heads })
    }

    pub fn num_rounds(&self) -> usize {
        self.rounds.len()
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Runs every round with agent `i` attending only to agents `j` whose
    /// gate `g_ij` is non-zero.
    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, m0: Var, adjacency: Var, agents: usize) -> Result<Var> {
        let (n, _) = tape.value(m0).shape();
        if tape.value(adjacency).shape() != (n, agents) {
            return Err(contract(format!(
                "graph of shape {:?} for {n} messages in blocks of {agents}",
                tape.value(adjacency).shape()
            )));
        }
        let mut x = m0;
        for k in 0..self.rounds.len() {
            x = self.round(tape, store, k, x, agents, Some(adjacency))?;
        }
        Ok(x)
    }

    /// Round `k` alone, attending within blocks of `group` rows.
    pub fn round(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        k: usize,
        x: Var,
        group: usize,
        gate: Option<Var>,
    ) -> Result<Var> {
        let round = self
            .rounds
            .get(k)
            .ok_or_else(|| contract(format!("no communication round {k}")))?;
        let h = round.attention.forward(tape, store, x, group, gate)?;
        let ff = round.ffn.forward(tape, store, h)?;
        let r = tape.add(h, ff)?;
        Ok(round.norm.forward(tape, store, r)?)
    }
}
