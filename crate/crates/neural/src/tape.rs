//! Reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation as it is evaluated. Calling
//! [`Tape::backward`] on a 1x1 output walks the record in reverse and returns
//! gradients for every leaf that asked for one. Composite operations that are
//! hot during training (attention, layer norm, the PPO losses) are fused into
//! single nodes with hand-written backward passes.

use std::collections::HashMap;

use crate::error::shape_err;
use crate::params::{Gradients, ParamId, ParameterStore};
use crate::tensor::{gemm_nt, gemm_tn, Tensor};
use crate::{NeuralError, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How [`Tape::edge_mask`] treats one entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeState {
    /// Pass the input through (and its gradient).
    Free,
    /// Force to 0.
    Off,
    /// Force to 1.
    On,
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    InterleaveRows(Vec<Var>),
    MeanPool {
        x: Var,
        group: usize,
    },
    Reshape(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        gate: Option<Var>,
        group: usize,
        heads: usize,
        weights: Vec<f64>,
        ratios: Vec<f64>,
    },
    PairScores {
        uv: Var,
        group: usize,
    },
    GumbelSoftmax {
        logits: Var,
        soft: Tensor,
        inv_tau: f64,
    },
    EdgeMask {
        x: Var,
        states: Vec<EdgeState>,
    },
    LogSoftmax {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    GatherCols {
        x: Var,
        idx: Vec<usize>,
    },
    Entropy {
        logits: Var,
        probs: Tensor,
        logp: Tensor,
    },
    Sum(Var),
    Mean(Var),
    RowLoss {
        x: Var,
        /// d loss / d x, already divided by the weight total.
        dx: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    param_leaves: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

macro_rules! ensure {
    ($cond:expr, $op:literal, $($fmt:tt)+) => {
        if !$cond {
            return Err(shape_err($op, format!($($fmt)+)));
        }
    };
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_leaves: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; `backward` is unavailable.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        let op = if self.grad_enabled { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// A constant: no gradient is tracked.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient can be read back with [`TapeGrads::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        let needs_grad = self.grad_enabled;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// The leaf for a stored parameter. Repeated calls return the same leaf so
    /// gradients accumulate in one place.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_leaves.get(&id) {
            return v;
        }
        let needs_grad = self.grad_enabled;
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param,
            needs_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_leaves.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Adds a 1×cols row vector to every row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        ensure!(self.dims(b) == (1, c), "add_bias", "bias {:?} for {r}x{c}", self.dims(b));
        let mut out = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for i in 0..r {
            for (o, bv) in out.row_mut(i).iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddBias(x, b), &[x, b]))
    }

    fn zip_op(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.dims(a) != self.dims(b) {
            return Err(shape_err(name, format!("{:?} vs {:?}", self.dims(a), self.dims(b))));
        }
        let (r, c) = self.dims(a);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_vec(r, c, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_op(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_op(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_op(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (1×cols).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        ensure!(
            self.dims(gamma) == (1, c) && self.dims(beta) == (1, c),
            "layer_norm",
            "affine params {:?}/{:?} for {c} features",
            self.dims(gamma),
            self.dims(beta)
        );
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Tensor::zeros(r, c);
        let mut out = Tensor::zeros(r, c);
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(i);
            for (h, &v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * is;
            }
            let xh = xhat.row(i).to_vec();
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = xh[j] * g[j] + b[j];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        ensure!(!parts.is_empty(), "concat_cols", "no inputs");
        let r = self.dims(parts[0]).0;
        ensure!(
            parts.iter().all(|p| self.dims(*p).0 == r),
            "concat_cols",
            "row counts differ"
        );
        let total: usize = parts.iter().map(|p| self.dims(*p).1).sum();
        let mut out = Tensor::zeros(r, total);
        for i in 0..r {
            let mut off = 0;
            for p in parts {
                let src = self.value(*p).row(i);
                out.row_mut(i)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        ensure!(start + len <= c, "slice_cols", "[{start}, {}) of {c}", start + len);
        let mut out = Tensor::zeros(r, len);
        for i in 0..r {
            out.row_mut(i)
                .copy_from_slice(&self.value(x).row(i)[start..start + len]);
        }
        Ok(self.push(out, Op::SliceCols { x, start }, &[x]))
    }

    /// Stacks equally shaped n×d parts into (n·k)×d with row `i·k + j` taken
    /// from row `i` of part `j`.
    pub fn interleave_rows(&mut self, parts: &[Var]) -> Result<Var> {
        ensure!(!parts.is_empty(), "interleave_rows", "no inputs");
        let (n, d) = self.dims(parts[0]);
        ensure!(
            parts.iter().all(|p| self.dims(*p) == (n, d)),
            "interleave_rows",
            "parts differ in shape"
        );
        let k = parts.len();
        let mut out = Tensor::zeros(n * k, d);
        for i in 0..n {
            for (j, p) in parts.iter().enumerate() {
                out.row_mut(i * k + j).copy_from_slice(self.value(*p).row(i));
            }
        }
        Ok(self.push(out, Op::InterleaveRows(parts.to_vec()), parts))
    }

    /// Averages each block of `group` consecutive rows.
    pub fn mean_pool(&mut self, x: Var, group: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        ensure!(group > 0 && r % group == 0, "mean_pool", "{r} rows in groups of {group}");
        let mut out = Tensor::zeros(r / group, c);
        let inv = 1.0 / group as f64;
        for g in 0..r / group {
            for k in 0..group {
                let src = self.value(x).row(g * group + k).to_vec();
                for (o, v) in out.row_mut(g).iter_mut().zip(&src) {
                    *o += v;
                }
            }
            for o in out.row_mut(g) {
                *o *= inv;
            }
        }
        Ok(self.push(out, Op::MeanPool { x, group }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.value(x).clone().reshape(rows, cols)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Multi-head scaled dot-product attention within blocks of `group` rows.
    ///
    /// With a `gate` (N×group, row `g·group + i` holding the gates of query
    /// `i` in block `g`), the weights are `gate_ij·exp(s_ij) / Σ_k gate_ik·exp(s_ik)`.
    /// A hard 0/1 gate therefore behaves exactly like a masked softmax, while a
    /// soft gate still receives gradient. Every row's gate must admit at least
    /// one key.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        group: usize,
        heads: usize,
        gate: Option<Var>,
    ) -> Result<Var> {
        let (n, d) = self.dims(q);
        ensure!(
            self.dims(k) == (n, d) && self.dims(v) == (n, d),
            "attention",
            "q/k/v shapes {:?} {:?} {:?}",
            self.dims(q),
            self.dims(k),
            self.dims(v)
        );
        ensure!(group > 0 && n % group == 0, "attention", "{n} rows in groups of {group}");
        if heads == 0 || d % heads != 0 {
            return Err(NeuralError::Config(format!(
                "model width {d} is not divisible by {heads} heads"
            )));
        }
        if let Some(g) = gate {
            ensure!(self.dims(g) == (n, group), "attention", "gate {:?}", self.dims(g));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let gv = gate.map(|g| self.value(g));
        let mut out = Tensor::zeros(n, d);
        let mut weights = vec![0.0; n * heads * group];
        let mut ratios = if gate.is_some() {
            vec![0.0; n * heads * group]
        } else {
            Vec::new()
        };
        let mut scores = vec![0.0; group];
        for blk in 0..n / group {
            let base = blk * group;
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..group {
                    let row = base + i;
                    let qi = &qv.row(row)[cols.clone()];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kj = &kv.row(base + j)[cols.clone()];
                        *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    let w = &mut weights[(row * heads + h) * group..(row * heads + h + 1) * group];
                    match gv {
                        None => {
                            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let mut z = 0.0;
                            for (wj, s) in w.iter_mut().zip(&scores) {
                                *wj = (s - max).exp();
                                z += *wj;
                            }
                            for wj in w.iter_mut() {
                                *wj /= z;
                            }
                        }
                        Some(gt) => {
                            let grow = gt.row(row);
                            let mut max = f64::NEG_INFINITY;
                            for (s, g) in scores.iter().zip(grow) {
                                if *g > 0.0 && *s > max {
                                    max = *s;
                                }
                            }
                            if max == f64::NEG_INFINITY {
                                return Err(NeuralError::Contract(format!(
                                    "attention row {row} has no admitted key"
                                )));
                            }
                            let r = &mut ratios[(row * heads + h) * group..(row * heads + h + 1) * group];
                            let mut z = 0.0;
                            for j in 0..group {
                                r[j] = (scores[j] - max).min(80.0).exp();
                                z += grow[j] * r[j];
                            }
                            for j in 0..group {
                                r[j] /= z;
                                w[j] = grow[j] * r[j];
                            }
                        }
                    }
                    let orow = &mut out.row_mut(row)[cols.clone()];
                    for (j, &wj) in w.iter().enumerate() {
                        let vj = &vv.row(base + j)[cols.clone()];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += wj * x;
                        }
                    }
                }
            }
        }
        let mut parents = vec![q, k, v];
        parents.extend(gate);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                gate,
                group,
                heads,
                weights,
                ratios,
            },
            &parents,
        ))
    }

    /// Pairwise scores within blocks: `out[b·n + i, j] = uv[b·n + i, 0] + uv[b·n + j, 1]`.
    pub fn pair_scores(&mut self, uv: Var, group: usize) -> Result<Var> {
        let (n, c) = self.dims(uv);
        ensure!(c == 2, "pair_scores", "expected two columns, got {c}");
        ensure!(group > 0 && n % group == 0, "pair_scores", "{n} rows in groups of {group}");
        let src = self.value(uv);
        let mut out = Tensor::zeros(n, group);
        for blk in 0..n / group {
            for i in 0..group {
                let u = src.get(blk * group + i, 0);
                for j in 0..group {
                    out.set(blk * group + i, j, u + src.get(blk * group + j, 1));
                }
            }
        }
        Ok(self.push(out, Op::PairScores { uv, group }, &[uv]))
    }

    /// Row-wise Gumbel-Softmax with caller-supplied noise.
    ///
    /// The soft sample is `softmax((logits + noise) / tau)`. With `hard`, the
    /// forward value is the one-hot argmax of the soft sample while the
    /// gradient is that of the soft sample (straight-through).
    pub fn gumbel_softmax(&mut self, logits: Var, noise: &Tensor, tau: f64, hard: bool) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(NeuralError::Config(format!("temperature must be positive, got {tau}")));
        }
        ensure!(
            noise.shape() == self.dims(logits),
            "gumbel_softmax",
            "noise {:?} for logits {:?}",
            noise.shape(),
            self.dims(logits)
        );
        let (r, c) = self.dims(logits);
        let inv_tau = 1.0 / tau;
        let lv = self.value(logits);
        let mut soft = Tensor::zeros(r, c);
        for i in 0..r {
            let y: Vec<f64> = lv
                .row(i)
                .iter()
                .zip(noise.row(i))
                .map(|(l, g)| (l + g) * inv_tau)
                .collect();
            softmax_into(&y, soft.row_mut(i));
        }
        let out = if hard {
            let mut h = Tensor::zeros(r, c);
            for i in 0..r {
                let a = soft.argmax_row(i);
                h.set(i, a, 1.0);
            }
            h
        } else {
            soft.clone()
        };
        Ok(self.push(out, Op::GumbelSoftmax { logits, soft, inv_tau }, &[logits]))
    }

    pub fn edge_mask(&mut self, x: Var, states: Vec<EdgeState>) -> Result<Var> {
        ensure!(
            states.len() == self.value(x).len(),
            "edge_mask",
            "{} states for {} entries",
            states.len(),
            self.value(x).len()
        );
        let mut out = self.value(x).clone();
        for (o, s) in out.data_mut().iter_mut().zip(&states) {
            match s {
                EdgeState::Free => {}
                EdgeState::Off => *o = 0.0,
                EdgeState::On => *o = 1.0,
            }
        }
        Ok(self.push(out, Op::EdgeMask { x, states }, &[x]))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = Tensor::zeros(xv.rows(), xv.cols());
        for i in 0..xv.rows() {
            log_softmax_into(xv.row(i), out.row_mut(i));
        }
        self.push(out, Op::LogSoftmax { x }, &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = Tensor::zeros(xv.rows(), xv.cols());
        for i in 0..xv.rows() {
            softmax_into(xv.row(i), out.row_mut(i));
        }
        self.push(out, Op::Softmax { x }, &[x])
    }

    /// Picks `x[i, idx[i]]` for every row, giving an N×1 column.
    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(x);
        ensure!(idx.len() == r, "gather_cols", "{} indices for {r} rows", idx.len());
        ensure!(idx.iter().all(|&j| j < c), "gather_cols", "index out of range for {c} columns");
        let data = idx.iter().enumerate().map(|(i, &j)| self.value(x).get(i, j)).collect();
        let out = Tensor::from_vec(r, 1, data)?;
        Ok(self.push(
            out,
            Op::GatherCols {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    /// Entropy of the categorical distribution given by each row of logits (N×1).
    pub fn entropy(&mut self, logits: Var) -> Var {
        let lv = self.value(logits);
        let (r, c) = lv.shape();
        let mut probs = Tensor::zeros(r, c);
        let mut logp = Tensor::zeros(r, c);
        let mut out = Tensor::zeros(r, 1);
        for i in 0..r {
            log_softmax_into(lv.row(i), logp.row_mut(i));
            let mut h = 0.0;
            for j in 0..c {
                let p = logp.get(i, j).exp();
                probs.set(i, j, p);
                h -= p * logp.get(i, j);
            }
            out.set(i, 0, h);
        }
        self.push(out, Op::Entropy { logits, probs, logp }, &[logits])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.value(x).sum() / n;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Generic weighted row loss: `Σ_i w_i ℓ_i / Σ_i w_i` where `ℓ_i` and its
    /// derivative with respect to row `i` of `x` come from `row_fn`. Rows with
    /// zero weight are skipped entirely.
    pub fn row_loss(
        &mut self,
        x: Var,
        weights: &[f64],
        mut row_fn: impl FnMut(usize, &[f64], &mut [f64]) -> f64,
    ) -> Result<Var> {
        let (r, c) = self.dims(x);
        ensure!(weights.len() == r, "row_loss", "{} weights for {r} rows", weights.len());
        let total: f64 = weights.iter().filter(|w| **w != 0.0).sum();
        let mut dx = Tensor::zeros(r, c);
        let mut acc = 0.0;
        if total > 0.0 {
            for i in 0..r {
                let w = weights[i];
                if w == 0.0 {
                    continue;
                }
                let l = row_fn(i, self.value(x).row(i), dx.row_mut(i));
                acc += w * l;
                for g in dx.row_mut(i) {
                    *g *= w / total;
                }
            }
            acc /= total;
        }
        Ok(self.push(Tensor::scalar(acc), Op::RowLoss { x, dx }, &[x]))
    }

    /// Backpropagates from a 1x1 output.
    pub fn backward(&self, output: Var) -> Result<TapeGrads> {
        if !self.grad_enabled {
            return Err(NeuralError::Contract("backward on an inference tape".into()));
        }
        if self.dims(output) != (1, 1) {
            return Err(shape_err("backward", format!("output is {:?}", self.dims(output))));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf | Op::Param => continue,
                _ => match grads[idx].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backward_node(node, &g, &mut grads)?;
        }
        Ok(TapeGrads { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let acc = |grads: &mut [Option<Tensor>], v: Var, t: Tensor| match &mut grads[v.0] {
            Some(x) => x.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let mut da = Tensor::zeros(av.rows(), av.cols());
                    gemm_nt(g, bv, &mut da);
                    acc(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = Tensor::zeros(bv.rows(), bv.cols());
                    gemm_tn(av, g, &mut db);
                    acc(grads, *b, db);
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(*b) {
                    let mut db = Tensor::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (d, v) in db.data_mut().iter_mut().zip(g.row(i)) {
                            *d += v;
                        }
                    }
                    acc(grads, *b, db);
                }
                if self.wants(*x) {
                    acc(grads, *x, g.clone());
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    acc(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    acc(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, hadamard(g, self.value(*b)));
                }
                if self.wants(*b) {
                    acc(grads, *b, hadamard(g, self.value(*a)));
                }
            }
            Op::Scale(a, s) => acc(grads, *a, g.map(|x| x * s)),
            Op::Tanh(a) => {
                let y = &node.value;
                let d = zip_map(g, y, |gv, yv| gv * (1.0 - yv * yv));
                acc(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let d = zip_map(g, y, |gv, yv| gv * yv * (1.0 - yv));
                acc(grads, *a, d);
            }
            Op::Relu(a) => {
                let d = zip_map(g, self.value(*a), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                acc(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (r, c) = xhat.shape();
                let gam = self.value(*gamma).data();
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dg = Tensor::zeros(1, c);
                    let mut db = Tensor::zeros(1, c);
                    for i in 0..r {
                        for j in 0..c {
                            dg.data_mut()[j] += g.get(i, j) * xhat.get(i, j);
                            db.data_mut()[j] += g.get(i, j);
                        }
                    }
                    if self.wants(*gamma) {
                        acc(grads, *gamma, dg);
                    }
                    if self.wants(*beta) {
                        acc(grads, *beta, db);
                    }
                }
                if self.wants(*x) {
                    let mut dx = Tensor::zeros(r, c);
                    let mut dxh = vec![0.0; c];
                    for i in 0..r {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            dxh[j] = g.get(i, j) * gam[j];
                            m1 += dxh[j];
                            m2 += dxh[j] * xhat.get(i, j);
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            dx.set(i, j, inv_std[i] * (dxh[j] - m1 - xhat.get(i, j) * m2));
                        }
                    }
                    acc(grads, *x, dx);
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let (r, c) = self.dims(*p);
                    if self.wants(*p) {
                        let mut d = Tensor::zeros(r, c);
                        for i in 0..r {
                            d.row_mut(i).copy_from_slice(&g.row(i)[off..off + c]);
                        }
                        acc(grads, *p, d);
                    }
                    off += c;
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.dims(*x);
                let mut d = Tensor::zeros(r, c);
                for i in 0..r {
                    d.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                acc(grads, *x, d);
            }
            Op::InterleaveRows(parts) => {
                let k = parts.len();
                for (j, p) in parts.iter().enumerate() {
                    if !self.wants(*p) {
                        continue;
                    }
                    let (n, d) = self.dims(*p);
                    let mut t = Tensor::zeros(n, d);
                    for i in 0..n {
                        t.row_mut(i).copy_from_slice(g.row(i * k + j));
                    }
                    acc(grads, *p, t);
                }
            }
            Op::MeanPool { x, group } => {
                let (r, c) = self.dims(*x);
                let inv = 1.0 / *group as f64;
                let mut d = Tensor::zeros(r, c);
                for i in 0..r {
                    for (o, v) in d.row_mut(i).iter_mut().zip(g.row(i / group)) {
                        *o = v * inv;
                    }
                }
                acc(grads, *x, d);
            }
            Op::Reshape(x) => {
                let (r, c) = self.dims(*x);
                acc(grads, *x, g.clone().reshape(r, c)?);
            }
            Op::Attention {
                q,
                k,
                v,
                gate,
                group,
                heads,
                weights,
                ratios,
            } => self.attention_backward(g, *q, *k, *v, *gate, *group, *heads, weights, ratios, grads),
            Op::PairScores { uv, group } => {
                let n = g.rows();
                let mut d = Tensor::zeros(n, 2);
                for blk in 0..n / group {
                    for i in 0..*group {
                        for j in 0..*group {
                            let gv = g.get(blk * group + i, j);
                            d.data_mut()[(blk * group + i) * 2] += gv;
                            d.data_mut()[(blk * group + j) * 2 + 1] += gv;
                        }
                    }
                }
                acc(grads, *uv, d);
            }
            Op::GumbelSoftmax { logits, soft, inv_tau } => {
                let (r, c) = soft.shape();
                let mut d = Tensor::zeros(r, c);
                for i in 0..r {
                    let s = soft.row(i);
                    let gr = g.row(i);
                    let dot: f64 = s.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d.set(i, j, inv_tau * s[j] * (gr[j] - dot));
                    }
                }
                acc(grads, *logits, d);
            }
            Op::EdgeMask { x, states } => {
                let mut d = g.clone();
                for (o, s) in d.data_mut().iter_mut().zip(states) {
                    if *s != EdgeState::Free {
                        *o = 0.0;
                    }
                }
                acc(grads, *x, d);
            }
            Op::LogSoftmax { x } => {
                let y = &node.value;
                let (r, c) = y.shape();
                let mut d = Tensor::zeros(r, c);
                for i in 0..r {
                    let gs: f64 = g.row(i).iter().sum();
                    for j in 0..c {
                        d.set(i, j, g.get(i, j) - y.get(i, j).exp() * gs);
                    }
                }
                acc(grads, *x, d);
            }
            Op::Softmax { x } => {
                let y = &node.value;
                let (r, c) = y.shape();
                let mut d = Tensor::zeros(r, c);
                for i in 0..r {
                    let dot: f64 = y.row(i).iter().zip(g.row(i)).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                    }
                }
                acc(grads, *x, d);
            }
            Op::GatherCols { x, idx } => {
                let (r, c) = self.dims(*x);
                let mut d = Tensor::zeros(r, c);
                for (i, &j) in idx.iter().enumerate() {
                    d.set(i, j, g.get(i, 0));
                }
                acc(grads, *x, d);
            }
            Op::Entropy { logits, probs, logp } => {
                let (r, c) = probs.shape();
                let mut d = Tensor::zeros(r, c);
                for i in 0..r {
                    let h = node.value.get(i, 0);
                    let gi = g.get(i, 0);
                    for j in 0..c {
                        d.set(i, j, -gi * probs.get(i, j) * (logp.get(i, j) + h));
                    }
                }
                acc(grads, *logits, d);
            }
            Op::Sum(x) => {
                let (r, c) = self.dims(*x);
                acc(grads, *x, Tensor::filled(r, c, g.item()));
            }
            Op::Mean(x) => {
                let (r, c) = self.dims(*x);
                acc(grads, *x, Tensor::filled(r, c, g.item() / (r * c).max(1) as f64));
            }
            Op::RowLoss { x, dx } => {
                let s = g.item();
                acc(grads, *x, dx.map(|v| v * s));
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Tensor,
        q: Var,
        k: Var,
        v: Var,
        gate: Option<Var>,
        group: usize,
        heads: usize,
        weights: &[f64],
        ratios: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let (n, d) = self.dims(q);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut dq = Tensor::zeros(n, d);
        let mut dk = Tensor::zeros(n, d);
        let mut dv = Tensor::zeros(n, d);
        let mut dgate = gate.map(|_| Tensor::zeros(n, group));
        let mut dw = vec![0.0; group];
        for blk in 0..n / group {
            let base = blk * group;
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..group {
                    let row = base + i;
                    let off = (row * heads + h) * group;
                    let w = &weights[off..off + group];
                    let go = &g.row(row)[cols.clone()];
                    for j in 0..group {
                        let vj = &vv.row(base + j)[cols.clone()];
                        dw[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                        let dvj = &mut dv.row_mut(base + j)[cols.clone()];
                        for (o, x) in dvj.iter_mut().zip(go) {
                            *o += w[j] * x;
                        }
                    }
                    let wdw: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
                    if let Some(dg) = dgate.as_mut() {
                        let r = &ratios[off..off + group];
                        for j in 0..group {
                            dg.data_mut()[row * group + j] += r[j] * (dw[j] - wdw);
                        }
                    }
                    let qi: Vec<f64> = qv.row(row)[cols.clone()].to_vec();
                    for j in 0..group {
                        let ds = w[j] * (dw[j] - wdw) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &kv.row(base + j)[cols.clone()];
                        let dqi = &mut dq.row_mut(row)[cols.clone()];
                        for (o, x) in dqi.iter_mut().zip(kj) {
                            *o += ds * x;
                        }
                        let dkj = &mut dk.row_mut(base + j)[cols.clone()];
                        for (o, x) in dkj.iter_mut().zip(&qi) {
                            *o += ds * x;
                        }
                    }
                }
            }
        }
        let mut acc = |var: Var, t: Tensor| {
            if self.wants(var) {
                match &mut grads[var.0] {
                    Some(x) => x.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
        };
        acc(q, dq);
        acc(k, dk);
        acc(v, dv);
        if let (Some(gv), Some(dg)) = (gate, dgate) {
            acc(gv, dg);
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct TapeGrads {
    grads: Vec<Option<Tensor>>,
}

impl TapeGrads {
    /// Gradient with respect to a leaf created with [`Tape::input`] or
    /// [`Tape::param`]; zeros if the output does not depend on it.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        self.grads[v.0].clone().unwrap_or_else(|| {
            let (r, c) = tape.dims(v);
            Tensor::zeros(r, c)
        })
    }

    /// Collects parameter gradients. Parameters that were placed on the tape
    /// but did not influence the output receive explicit zeros.
    pub fn params(&self, tape: &Tape, store: &ParameterStore) -> Gradients {
        let mut out = Gradients::empty(store.len());
        for (id, v) in &tape.param_leaves {
            out.set(*id, self.wrt(tape, *v));
        }
        out
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

pub fn log_softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for (o, v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    zip_map(a, b, |x, y| x * y)
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("same shape")
}
