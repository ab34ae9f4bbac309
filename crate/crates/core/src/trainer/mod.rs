//! Synchronous multi-worker PPO training of every model variant.
//!
//! Each iteration, `num_workers` environment streams roll out fixed-length
//! segments with shared read-only parameters (spread over
//! `rollout_threads` OS threads), the segments are merged, and the
//! composite loss is optimized centrally for `ppo_epochs` epochs.

mod loss;
mod normalizer;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use iwol_neural::{clip_grad_norm, gumbel, Adam, AdamConfig, Gradients, ParameterStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use loss::{
    clipped_surrogate, clipped_value_term, composite_loss, composite_on_tape, huber, policy_loss, policy_loss_on_tape,
    value_loss, value_loss_on_tape,
};
pub use normalizer::ValueNormalizer;

use crate::checkpoint::{Checkpoint, RngState};
use crate::comm::GateMode;
use crate::config::RunConfig;
use crate::envs::{make_env, Environment, Observation};
use crate::error::{contract, IwolError, Result};
use crate::harness::{evaluate, DegradationSpec};
use crate::iwol::{BatchInputs, IwolModel, ModelConfig};
use crate::rollout::{EnvSpec, RolloutBuffer, Transition};

/// One environment stream with its own RNGs.
struct Worker {
    env: Box<dyn Environment>,
    /// Gumbel noise and action sampling.
    rng: ChaCha8Rng,
    /// Episode reset seeds.
    seeds: ChaCha8Rng,
    current: Observation,
}

impl Worker {
    fn new(config: &RunConfig, id: u64) -> Result<Self> {
        let mut env = make_env(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        rng.set_stream(2 * id);
        let mut seeds = ChaCha8Rng::seed_from_u64(config.train.seed);
        seeds.set_stream(2 * id + 1);
        let current = env.reset(seeds.gen());
        Ok(Self {
            env,
            rng,
            seeds,
            current,
        })
    }
}

/// A worker's trajectory segment plus the episodes it completed.
#[derive(Clone, Debug)]
pub struct Segment {
    pub buffer: RolloutBuffer,
    pub bootstrap: Vec<f64>,
    /// `(team return, success)` for each finished episode.
    pub episodes: Vec<(f64, bool)>,
}

/// Flattened training batch of whole timestep groups (`agents` rows each).
/// Inactive rows stay in place so message passing can be recomputed, but
/// carry zero loss weight.
#[derive(Clone, Debug, Serialize)]
pub struct UpdateBatch {
    pub agents: usize,
    pub obs: Tensor,
    pub positions: Option<Vec<[f64; 2]>>,
    pub active: Vec<bool>,
    pub weights: Vec<f64>,
    pub actions: Vec<usize>,
    pub logp_old: Vec<f64>,
    /// Old value-head outputs (normalized units).
    pub value_old: Vec<f64>,
    /// Normalized return targets.
    pub returns: Vec<f64>,
    pub advantages: Vec<f64>,
    pub privileged: Tensor,
    /// `(rows·agents) × 2` keep/drop Gumbel noise used during the rollout.
    pub noise: Tensor,
}

impl UpdateBatch {
    pub fn num_groups(&self) -> usize {
        self.active.len() / self.agents
    }

    /// The sub-batch made of the listed timestep groups, in order.
    pub fn select(&self, groups: &[usize]) -> UpdateBatch {
        let a = self.agents;
        let rows: Vec<usize> = groups.iter().flat_map(|&g| g * a..(g + 1) * a).collect();
        let pick_t = |t: &Tensor, stride: usize| {
            let cols = t.cols();
            let mut data = Vec::with_capacity(rows.len() * stride * cols);
            for &r in &rows {
                for k in 0..stride {
                    data.extend_from_slice(t.row(r * stride + k));
                }
            }
            Tensor::from_vec(rows.len() * stride, cols, data).expect("consistent selection")
        };
        let pick = |v: &[f64]| rows.iter().map(|&r| v[r]).collect::<Vec<f64>>();
        UpdateBatch {
            agents: a,
            obs: pick_t(&self.obs, 1),
            positions: self.positions.as_ref().map(|p| rows.iter().map(|&r| p[r]).collect()),
            active: rows.iter().map(|&r| self.active[r]).collect(),
            weights: pick(&self.weights),
            actions: rows.iter().map(|&r| self.actions[r]).collect(),
            logp_old: pick(&self.logp_old),
            value_old: pick(&self.value_old),
            returns: pick(&self.returns),
            advantages: pick(&self.advantages),
            privileged: pick_t(&self.privileged, 1),
            noise: if self.noise.rows() == 0 { self.noise.clone() } else { pick_t(&self.noise, a) },
        }
    }

    pub fn inputs(&self) -> BatchInputs<'_> {
        BatchInputs {
            obs: &self.obs,
            positions: self.positions.as_deref(),
            active: &self.active,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub policy: f64,
    pub value: f64,
    pub world: f64,
    pub interactive: f64,
    pub entropy: f64,
}

/// One metrics record per training iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub env_steps: u64,
    pub episodes: usize,
    pub mean_return: Option<f64>,
    pub success_rate: Option<f64>,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub world_loss: f64,
    pub interactive_loss: f64,
    pub entropy: f64,
    pub grad_norm: f64,
    pub eval_success_rate: Option<f64>,
    pub eval_mean_return: Option<f64>,
}

pub struct Trainer {
    pub config: RunConfig,
    pub spec: EnvSpec,
    pub model: IwolModel,
    pub store: ParameterStore,
    pub normalizer: ValueNormalizer,
    adam: Adam,
    workers: Vec<Worker>,
    shuffle: ChaCha8Rng,
    iteration: usize,
    env_steps: u64,
    dump_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let g = &config.train;
        let probe = make_env(&config)?;
        let spec = probe.spec().clone();
        let model_cfg = ModelConfig::new(&spec, g, config.algo.mode());
        let mut init_rng = ChaCha8Rng::seed_from_u64(g.seed);
        init_rng.set_stream(u64::MAX);
        let mut store = ParameterStore::new();
        let model = IwolModel::new(model_cfg, &mut store, &mut init_rng)?;
        let workers = (0..g.num_workers as u64)
            .map(|id| Worker::new(&config, id))
            .collect::<Result<Vec<_>>>()?;
        let mut shuffle = ChaCha8Rng::seed_from_u64(g.seed);
        shuffle.set_stream(u64::MAX - 1);
        Ok(Self {
            adam: Adam::new(AdamConfig {
                lr: g.learning_rate,
                eps: g.adam_eps,
                weight_decay: g.weight_decay,
                ..AdamConfig::default()
            }),
            normalizer: ValueNormalizer::new(g.value_normalization),
            dump_dir: config.out_dir.clone(),
            config,
            spec,
            model,
            store,
            workers,
            shuffle,
            iteration: 0,
            env_steps: 0,
        })
    }

    /// Continues a run from a checkpoint. Episodes in progress when the
    /// checkpoint was written are restarted.
    pub fn resume(checkpoint: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(checkpoint.run.clone())?;
        checkpoint.build_model()?;
        if checkpoint.rng.len() != 2 * t.workers.len() {
            return Err(contract("checkpoint RNG state does not match the worker count"));
        }
        t.store = checkpoint.store.clone();
        t.normalizer = checkpoint.normalizer.clone();
        t.iteration = checkpoint.iteration;
        t.env_steps = checkpoint.env_steps;
        for (w, pair) in t.workers.iter_mut().zip(checkpoint.rng.chunks(2)) {
            w.rng = pair[0].restore()?;
            w.seeds = pair[1].restore()?;
            w.current = w.env.reset(w.seeds.gen());
        }
        Ok(t)
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    /// Rollout phase: every worker collects `rollout_len` steps.
    pub fn collect(&mut self) -> Result<Vec<Segment>> {
        let threads = self.config.train.rollout_threads.min(self.workers.len()).max(1);
        let len = self.config.train.rollout_len;
        let (model, store, norm) = (&self.model, &self.store, &self.normalizer);
        let chunk = self.workers.len().div_ceil(threads);
        let segments = if threads == 1 {
            rollout_chunk(&mut self.workers, model, store, norm, len)?
        } else {
            let results: Vec<Result<Vec<Segment>>> = std::thread::scope(|s| {
                let handles: Vec<_> = self
                    .workers
                    .chunks_mut(chunk)
                    .map(|ws| s.spawn(move || rollout_chunk(ws, model, store, norm, len)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("rollout thread panicked"))
                    .collect()
            });
            let mut all = Vec::with_capacity(self.workers.len());
            for r in results {
                all.extend(r?);
            }
            all
        };
        self.env_steps += (len * self.workers.len()) as u64;
        Ok(segments)
    }

    /// Computes returns and advantages, updates the value normalizer from
    /// active records, and flattens the segments.
    pub fn prepare(&mut self, segments: &mut [Segment]) -> Result<UpdateBatch> {
        let g = &self.config.train;
        let agents = self.spec.num_agents;
        for seg in segments.iter_mut() {
            seg.buffer.compute_targets(g.gamma, g.gae_lambda, &seg.bootstrap)?;
        }
        let mut active_returns = Vec::new();
        for seg in segments.iter() {
            let rets = seg.buffer.returns()?;
            for t in 0..seg.buffer.len() {
                for (a, ret) in rets.iter().enumerate() {
                    if seg.buffer.get(a, t).active {
                        active_returns.push(ret[t]);
                    }
                }
            }
        }
        self.normalizer.update(&active_returns);

        let mut b = BatchBuilder::default();
        for seg in segments.iter() {
            let rets = seg.buffer.returns()?;
            let advs = seg.buffer.advantages()?;
            for t in 0..seg.buffer.len() {
                for a in 0..agents {
                    let tr = seg.buffer.get(a, t);
                    b.obs.extend_from_slice(&tr.obs);
                    b.privileged.extend_from_slice(&tr.privileged);
                    b.noise.extend_from_slice(&tr.edge_noise);
                    if let Some(p) = tr.position {
                        b.positions.push(p);
                    }
                    b.active.push(tr.active);
                    b.weights.push(if tr.active { 1.0 } else { 0.0 });
                    b.actions.push(tr.action);
                    b.logp_old.push(tr.log_prob);
                    b.value_old.push(tr.value_head);
                    b.returns.push(self.normalizer.normalize(rets[a][t]));
                    b.advantages.push(if tr.active { advs[a][t] } else { 0.0 });
                }
            }
        }
        if g.normalize_advantages {
            standardize(&mut b.advantages, &b.active);
        }
        let rows = b.active.len();
        let has_pos = b.positions.len() == rows && rows > 0;
        Ok(UpdateBatch {
            agents,
            obs: Tensor::from_vec(rows, self.spec.obs_dim, b.obs)?,
            positions: if has_pos { Some(b.positions) } else { None },
            active: b.active,
            weights: b.weights,
            actions: b.actions,
            logp_old: b.logp_old,
            value_old: b.value_old,
            returns: b.returns,
            advantages: b.advantages,
            privileged: Tensor::from_vec(rows, self.spec.privileged_dim, b.privileged)?,
            noise: if b.noise.is_empty() {
                Tensor::zeros(0, 2)
            } else {
                Tensor::from_vec(rows * agents, 2, b.noise)?
            },
        })
    }

    /// Builds the composite loss on `tape` for a (sub-)batch.
    pub fn loss(&self, tape: &mut Tape, batch: &UpdateBatch) -> Result<(iwol_neural::Var, LossBreakdown)> {
        let g = &self.config.train;
        let out = self.model.forward(
            tape,
            &self.store,
            &batch.inputs(),
            GateMode::Sampled {
                noise: &batch.noise,
                hard: true,
            },
            None,
        )?;
        let (pi, entropy) = policy_loss_on_tape(
            tape,
            out.logits,
            &batch.actions,
            &batch.logp_old,
            &batch.advantages,
            &batch.weights,
            g.clip_eps,
            g.entropy_coef,
        )?;
        let v = value_loss_on_tape(
            tape,
            out.value,
            &batch.value_old,
            &batch.returns,
            &batch.weights,
            g.clip_eps,
            g.huber_delta,
        )?;
        let (lw, li) = match (out.latent, out.messages) {
            (Some(z), Some(m)) => {
                let target_m = tape.value(m).clone();
                self.model
                    .reconstruction_losses(tape, &self.store, z, &batch.privileged, &target_m, &batch.weights)
                    .map(|(w, i)| (Some(w), i))?
            }
            _ => (None, None),
        };
        let rl = composite_on_tape(tape, self.model.mode(), pi, lw, li, g.lambda_w, g.lambda_i)?;
        let total = tape.add(rl, v)?;
        let val = |v: Option<iwol_neural::Var>| v.map_or(0.0, |v| tape.value(v).item());
        let breakdown = LossBreakdown {
            total: tape.value(total).item(),
            policy: tape.value(pi).item(),
            value: tape.value(v).item(),
            world: val(lw),
            interactive: val(li),
            entropy,
        };
        Ok((total, breakdown))
    }

    /// Loss gradients for every parameter (unclipped).
    pub fn gradients(&self, batch: &UpdateBatch) -> Result<(Gradients, LossBreakdown)> {
        let mut tape = Tape::new();
        let (total, breakdown) = self.loss(&mut tape, batch)?;
        if !breakdown.total.is_finite() {
            let dump = self.dump_batch(batch)?;
            return Err(IwolError::NonFiniteLoss {
                iteration: self.iteration,
                dump,
            });
        }
        let grads = tape.backward(total)?.params(&tape, &self.store);
        Ok((grads, breakdown))
    }

    fn dump_batch(&self, batch: &UpdateBatch) -> Result<String> {
        let dir = self.dump_dir.clone().unwrap_or_else(std::env::temp_dir);
        fs::create_dir_all(&dir)?;
        let path = dir.join(format!("nonfinite_minibatch_iter{}.json", self.iteration));
        serde_json::to_writer(BufWriter::new(File::create(&path)?), batch)?;
        Ok(path.display().to_string())
    }

    /// Applies `ppo_epochs` epochs of minibatch updates to the batch.
    pub fn update(&mut self, batch: &UpdateBatch) -> Result<(LossBreakdown, f64)> {
        let g = self.config.train.clone();
        let groups = batch.num_groups();
        let mut sum = LossBreakdown::default();
        let mut norm_sum = 0.0;
        let mut count = 0.0;
        for _ in 0..g.ppo_epochs {
            let mut order: Vec<usize> = (0..groups).collect();
            if g.num_minibatches > 1 {
                for i in (1..order.len()).rev() {
                    let j = self.shuffle.gen_range(0..=i);
                    order.swap(i, j);
                }
            }
            let per = groups.div_ceil(g.num_minibatches).max(1);
            for part in order.chunks(per) {
                let mb = if g.num_minibatches > 1 { batch.select(part) } else { batch.clone() };
                let (mut grads, lb) = self.gradients(&mb)?;
                let norm = clip_grad_norm(&mut grads, g.grad_clip_norm);
                self.adam.step(&mut self.store, &grads)?;
                sum.total += lb.total;
                sum.policy += lb.policy;
                sum.value += lb.value;
                sum.world += lb.world;
                sum.interactive += lb.interactive;
                sum.entropy += lb.entropy;
                norm_sum += norm;
                count += 1.0;
            }
        }
        let avg = LossBreakdown {
            total: sum.total / count,
            policy: sum.policy / count,
            value: sum.value / count,
            world: sum.world / count,
            interactive: sum.interactive / count,
            entropy: sum.entropy / count,
        };
        Ok((avg, norm_sum / count))
    }

    /// One full collect → prepare → update cycle.
    pub fn iterate(&mut self) -> Result<IterationMetrics> {
        let mut segments = self.collect()?;
        let batch = self.prepare(&mut segments)?;
        let (losses, grad_norm) = self.update(&batch)?;
        self.iteration += 1;
        let episodes: Vec<(f64, bool)> = segments.iter().flat_map(|s| s.episodes.iter().cloned()).collect();
        let n = episodes.len();
        let (mean_return, success_rate) = if n == 0 {
            (None, None)
        } else {
            (
                Some(episodes.iter().map(|e| e.0).sum::<f64>() / n as f64),
                Some(episodes.iter().filter(|e| e.1).count() as f64 / n as f64),
            )
        };
        Ok(IterationMetrics {
            iteration: self.iteration,
            env_steps: self.env_steps,
            episodes: n,
            mean_return,
            success_rate,
            policy_loss: losses.policy,
            value_loss: losses.value,
            world_loss: losses.world,
            interactive_loss: losses.interactive,
            entropy: losses.entropy,
            grad_norm,
            eval_success_rate: None,
            eval_mean_return: None,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            run: self.config.clone(),
            model: self.model.config.clone(),
            store: self.store.clone(),
            normalizer: self.normalizer.clone(),
            iteration: self.iteration,
            env_steps: self.env_steps,
            rng: self
                .workers
                .iter()
                .flat_map(|w| [RngState::of(&w.rng), RngState::of(&w.seeds)])
                .collect(),
        }
    }

    /// Deterministic evaluation episodes on a fresh environment.
    pub fn evaluate(&self, episodes: usize) -> Result<crate::harness::EvalReport> {
        let mut env = make_env(&self.config)?;
        evaluate(
            &self.model,
            &self.store,
            env.as_mut(),
            episodes,
            &DegradationSpec::none(),
            eval_seed(self.config.train.seed),
        )
    }

    /// Trains until `total_steps`, calling `observe` after every iteration.
    pub fn run(&mut self, mut observe: impl FnMut(&Trainer, &IterationMetrics) -> Result<()>) -> Result<()> {
        while self.env_steps < self.config.total_steps {
            let mut m = self.iterate()?;
            let every = self.config.eval_interval;
            if every > 0 && self.iteration % every == 0 {
                let report = self.evaluate(self.config.eval_episodes)?;
                m.eval_success_rate = Some(report.success_rate);
                m.eval_mean_return = Some(report.mean_return);
            }
            observe(self, &m)?;
        }
        Ok(())
    }
}

/// Base seed of evaluation episodes for a run seed.
pub fn eval_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x5851_f42d)
}

#[derive(Default)]
struct BatchBuilder {
    obs: Vec<f64>,
    privileged: Vec<f64>,
    noise: Vec<f64>,
    positions: Vec<[f64; 2]>,
    active: Vec<bool>,
    weights: Vec<f64>,
    actions: Vec<usize>,
    logp_old: Vec<f64>,
    value_old: Vec<f64>,
    returns: Vec<f64>,
    advantages: Vec<f64>,
}

/// Zero mean, unit variance over active entries; inactive entries stay 0.
fn standardize(xs: &mut [f64], active: &[bool]) {
    let vals: Vec<f64> = xs.iter().zip(active).filter(|(_, &a)| a).map(|(x, _)| *x).collect();
    if vals.is_empty() {
        return;
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let std = (vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    for (x, &a) in xs.iter_mut().zip(active) {
        *x = if a { (*x - mean) / (std + 1e-8) } else { 0.0 };
    }
}

/// Samples an index from `probs` with a single uniform draw.
pub fn sample_categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.len() - 1
}

struct Stacked {
    obs: Tensor,
    positions: Option<Vec<[f64; 2]>>,
    active: Vec<bool>,
}

fn stack(workers: &[Worker], spec: &EnvSpec) -> Result<Stacked> {
    let rows = workers.len() * spec.num_agents;
    let mut obs = Vec::with_capacity(rows * spec.obs_dim);
    let mut positions = Vec::with_capacity(rows);
    let mut active = Vec::with_capacity(rows);
    for w in workers {
        for o in &w.current.obs {
            obs.extend_from_slice(o);
        }
        if let Some(p) = &w.current.positions {
            positions.extend_from_slice(p);
        }
        active.extend_from_slice(&w.current.active);
    }
    Ok(Stacked {
        obs: Tensor::from_vec(rows, spec.obs_dim, obs)?,
        positions: if positions.len() == rows { Some(positions) } else { None },
        active,
    })
}

fn draw_noise(workers: &mut [Worker], agents: usize, comm: bool) -> Result<(Tensor, Vec<Vec<f64>>)> {
    if !comm {
        return Ok((Tensor::zeros(0, 2), vec![Vec::new(); workers.len()]));
    }
    let mut all = Vec::new();
    let mut per = Vec::with_capacity(workers.len());
    for w in workers.iter_mut() {
        let t = gumbel::sample_tensor(&mut w.rng, agents * agents, 2);
        all.extend_from_slice(t.data());
        per.push(t.into_data());
    }
    let rows = all.len() / 2;
    Ok((Tensor::from_vec(rows, 2, all)?, per))
}

/// Steps a group of workers in lockstep, batching their forward passes.
/// Rows never interact across workers, so results do not depend on how
/// workers are grouped.
fn rollout_chunk(
    workers: &mut [Worker],
    model: &IwolModel,
    store: &ParameterStore,
    normalizer: &ValueNormalizer,
    len: usize,
) -> Result<Vec<Segment>> {
    let spec = workers[0].env.spec().clone();
    let agents = spec.num_agents;
    let comm = model.mode().uses_comm();
    let mut segments: Vec<Segment> = workers
        .iter()
        .map(|_| Segment {
            buffer: RolloutBuffer::new(agents),
            bootstrap: vec![0.0; agents],
            episodes: Vec::new(),
        })
        .collect();
    let mut probs = vec![0.0; spec.num_actions];
    for _ in 0..len {
        let stacked = stack(workers, &spec)?;
        let (noise, per_worker_noise) = draw_noise(workers, agents, comm)?;
        let mut tape = Tape::inference();
        let inputs = BatchInputs {
            obs: &stacked.obs,
            positions: stacked.positions.as_deref(),
            active: &stacked.active,
        };
        let out = model.forward(&mut tape, store, &inputs, GateMode::Sampled { noise: &noise, hard: true }, None)?;
        let log_probs = tape.log_softmax(out.logits);
        let logp = tape.value(log_probs);
        let values = tape.value(out.value);
        for (k, w) in workers.iter_mut().enumerate() {
            let mut actions = Vec::with_capacity(agents);
            let mut logps = Vec::with_capacity(agents);
            for a in 0..agents {
                let row = logp.row(k * agents + a);
                for (p, l) in probs.iter_mut().zip(row) {
                    *p = l.exp();
                }
                let act = sample_categorical(&probs, w.rng.gen::<f64>());
                actions.push(act);
                logps.push(row[act].min(0.0));
            }
            let step = w.env.step(&actions)?;
            let prev = std::mem::replace(&mut w.current, step.observation.clone());
            let noise_k = &per_worker_noise[k];
            let mut transitions = Vec::with_capacity(agents);
            for a in 0..agents {
                let active = prev.active[a];
                let head = values.get(k * agents + a, 0);
                transitions.push(Transition {
                    obs: prev.obs[a].clone(),
                    action: actions[a],
                    log_prob: logps[a],
                    value: normalizer.denormalize(head),
                    value_head: head,
                    reward: step.rewards[a],
                    done: step.agent_done[a],
                    privileged: prev.privileged[a].clone(),
                    position: prev.positions.as_ref().map(|p| p[a]),
                    active,
                    edge_noise: if comm {
                        noise_k[a * agents * 2..(a + 1) * agents * 2].to_vec()
                    } else {
                        Vec::new()
                    },
                });
            }
            segments[k].buffer.push_step(transitions)?;
            if step.done {
                segments[k].episodes.push((step.info.team_return, step.info.success()?));
                let seed = w.seeds.gen();
                w.current = w.env.reset(seed);
            }
        }
    }
    // bootstrap values for segments cut mid-episode
    let stacked = stack(workers, &spec)?;
    let (noise, _) = draw_noise(workers, agents, comm)?;
    let mut tape = Tape::inference();
    let inputs = BatchInputs {
        obs: &stacked.obs,
        positions: stacked.positions.as_deref(),
        active: &stacked.active,
    };
    let out = model.forward(&mut tape, store, &inputs, GateMode::Sampled { noise: &noise, hard: true }, None)?;
    let values = tape.value(out.value);
    for (k, seg) in segments.iter_mut().enumerate() {
        let rows = k * agents..(k + 1) * agents;
        let active: Vec<f64> = rows
            .filter(|&r| stacked.active[r])
            .map(|r| normalizer.denormalize(values.get(r, 0)))
            .collect();
        let shared = if active.is_empty() {
            normalizer.denormalize(0.0)
        } else {
            active.iter().sum::<f64>() / active.len() as f64
        };
        for a in 0..agents {
            let r = k * agents + a;
            seg.bootstrap[a] = if stacked.active[r] {
                normalizer.denormalize(values.get(r, 0))
            } else {
                shared
            };
        }
    }
    Ok(segments)
}

/// Outcome of [`train`].
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub metrics: Vec<IterationMetrics>,
    pub checkpoint: Checkpoint,
}

/// Runs a full training job. With `out_dir` set, writes the resolved config,
/// `run.json` (crate version, config hash, seed), `metrics.jsonl`, `timings.jsonl`, periodic checkpoints under
/// `checkpoints/`, and the final checkpoint under `checkpoint/`.
pub fn train(config: &RunConfig) -> Result<TrainSummary> {
    let mut trainer = Trainer::new(config.clone())?;
    let out = config.out_dir.clone();
    let mut sinks = match &out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("config.toml"), config.to_toml()?)?;
            let provenance = serde_json::json!({
                "version": env!("CARGO_PKG_VERSION"),
                "config_hash": config.hash(),
                "seed": config.train.seed,
            });
            fs::write(dir.join("run.json"), serde_json::to_string_pretty(&provenance)?)?;
            Some((
                BufWriter::new(File::create(dir.join("metrics.jsonl"))?),
                BufWriter::new(File::create(dir.join("timings.jsonl"))?),
            ))
        }
        None => None,
    };
    let start = Instant::now();
    let mut metrics = Vec::new();
    trainer.run(|t, m| {
        if let (Some(dir), Some((mw, tw))) = (&out, sinks.as_mut()) {
            serde_json::to_writer(&mut *mw, m)?;
            mw.write_all(b"\n")?;
            mw.flush()?;
            let timing = serde_json::json!({
                "iteration": m.iteration,
                "wall_clock_s": start.elapsed().as_secs_f64(),
            });
            serde_json::to_writer(&mut *tw, &timing)?;
            tw.write_all(b"\n")?;
            tw.flush()?;
            let every = t.config.checkpoint_interval;
            if every > 0 && m.iteration % every == 0 {
                t.checkpoint()
                    .save(&dir.join("checkpoints").join(format!("iter_{:06}", m.iteration)))?;
            }
        }
        metrics.push(m.clone());
        Ok(())
    })?;
    let checkpoint = trainer.checkpoint();
    if let Some(dir) = &out {
        checkpoint.save(&dir.join("checkpoint"))?;
    }
    Ok(TrainSummary { metrics, checkpoint })
}

/// Reads a metrics stream written by [`train`].
pub fn read_metrics(path: &Path) -> Result<Vec<IterationMetrics>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(IwolError::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn categorical_sampling_edges() {
        assert_eq!(sample_categorical(&[0.2, 0.8], 0.0), 0);
        assert_eq!(sample_categorical(&[0.2, 0.8], 0.2), 1);
        assert_eq!(sample_categorical(&[0.2, 0.8], 0.999_999), 1);
    }

    #[test]
    fn standardize_ignores_inactive() {
        let mut xs = [1.0, 100.0, 3.0];
        standardize(&mut xs, &[true, false, true]);
        assert!((xs[0] + 1.0).abs() < 1e-6 && (xs[2] - 1.0).abs() < 1e-6);
        assert_eq!(xs[1], 0.0);
    }
}
