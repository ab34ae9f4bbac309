use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::shape_err;
use crate::init::orthogonal;
use crate::params::{ParamId, ParameterStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
            Activation::Identity => x,
        }
    }
}

/// Affine map `x·W + b` with orthogonally initialized `W` and zero `b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        path: &str,
        in_dim: usize,
        out_dim: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.insert(format!("{path}.weight"), orthogonal(in_dim, out_dim, gain, rng))?;
        let bias = store.insert(format!("{path}.bias"), Tensor::zeros(1, out_dim))?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let cols = tape.value(x).cols();
        if cols != self.in_dim {
            return Err(shape_err(
                "linear",
                format!("input has {cols} features, layer expects {}", self.in_dim),
            ));
        }
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let h = tape.matmul(x, w)?;
        tape.add_bias(h, b)
    }
}

/// A stack of [`Linear`] layers with an activation between them (none after
/// the last layer).
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
    activation: Activation,
}

impl Mlp {
    /// `dims` lists every layer width including input and output, e.g.
    /// `[64, 128, 5]` is one hidden layer of 128.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        path: &str,
        dims: &[usize],
        activation: Activation,
        hidden_gain: f64,
        output_gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(crate::NeuralError::Config(format!(
                "mlp `{path}` needs at least input and output widths"
            )));
        }
        let n = dims.len() - 1;
        let mut layers = Vec::with_capacity(n);
        for (i, w) in dims.windows(2).enumerate() {
            let gain = if i + 1 == n { output_gain } else { hidden_gain };
            layers.push(Linear::new(store, &format!("{path}.{i}"), w[0], w[1], gain, rng)?);
        }
        Ok(Self { layers, activation })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            if i != last {
                h = self.activation.apply(tape, h);
            }
        }
        Ok(h)
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParameterStore, path: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.insert(format!("{path}.gamma"), Tensor::filled(1, dim, 1.0))?,
            beta: store.insert(format!("{path}.beta"), Tensor::zeros(1, dim))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// Multi-head self-attention with a residual connection and layer norm:
/// `LN(x + Wo·Attn(Wq·x, Wk·x, Wv·x))`, attending within blocks of `group`
/// rows.
#[derive(Clone, Debug)]
pub struct SelfAttentionBlock {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm: LayerNorm,
    pub heads: usize,
}

impl SelfAttentionBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        path: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(crate::NeuralError::Config(format!(
                "attention width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{path}.query"), dim, dim, 1.0, rng)?,
            key: Linear::new(store, &format!("{path}.key"), dim, dim, 1.0, rng)?,
            value: Linear::new(store, &format!("{path}.value"), dim, dim, 1.0, rng)?,
            output: Linear::new(store, &format!("{path}.output"), dim, dim, 1.0, rng)?,
            norm: LayerNorm::new(store, &format!("{path}.norm"), dim)?,
            heads,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        x: Var,
        group: usize,
        gate: Option<Var>,
    ) -> Result<Var> {
        let q = self.query.forward(tape, store, x)?;
        let k = self.key.forward(tape, store, x)?;
        let v = self.value.forward(tape, store, x)?;
        let a = tape.attention(q, k, v, group, self.heads, gate)?;
        let o = self.output.forward(tape, store, a)?;
        let r = tape.add(x, o)?;
        self.norm.forward(tape, store, r)
    }
}
