//! Deterministic evaluation with optional message degradation.

use iwol_neural::{ParameterStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::comm::GateMode;
use crate::envs::{Environment, Observation};
use crate::error::{config, Result};
use crate::iwol::{BatchInputs, IwolModel, VariantMode};
use crate::rollout::EnvSpec;

/// Clamp applied before inverting the squashing map.
pub const UNSQUASH_EPS: f64 = 1e-3;

/// What happens to processed messages before the policy and value heads
/// read them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Degradation {
    None,
    /// Squash, round to `n_bits` uniform levels, unsquash.
    Quantize { n_bits: u32 },
    /// Replace every component with an unsquashed uniform draw.
    Corrupt,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub kind: Degradation,
    pub rng_seed: u64,
}

impl DegradationSpec {
    pub fn none() -> Self {
        Self {
            kind: Degradation::None,
            rng_seed: 0,
        }
    }

    pub fn quantize(n_bits: u32) -> Self {
        Self {
            kind: Degradation::Quantize { n_bits },
            rng_seed: 0,
        }
    }

    pub fn corrupt(rng_seed: u64) -> Self {
        Self {
            kind: Degradation::Corrupt,
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Degradation::Quantize { n_bits } = self.kind {
            if !(1..=52).contains(&n_bits) {
                return Err(config(format!("n_bits must be in 1..=52, got {n_bits}")));
            }
        }
        Ok(())
    }
}

pub fn squash(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn unsquash(y: f64) -> f64 {
    unsquash_within(y, UNSQUASH_EPS)
}

fn unsquash_within(y: f64, eps: f64) -> f64 {
    let y = y.clamp(eps, 1.0 - eps);
    (y / (1.0 - y)).ln()
}

/// Rounds a squashed value in `[0, 1]` to the nearest of `2^n` uniform
/// levels (ties to even).
pub fn quantize_level(y: f64, n_bits: u32) -> Result<f64> {
    if n_bits < 1 {
        return Err(config("n_bits must be at least 1"));
    }
    let levels = ((1u64 << n_bits) - 1) as f64;
    Ok((y.clamp(0.0, 1.0) * levels).round_ties_even() / levels)
}

pub fn quantize_message(m: &Tensor, n_bits: u32) -> Result<Tensor> {
    // Keep the end levels closer to 0 and 1 than half a step so that they
    // quantize back onto themselves.
    let levels = ((1u64 << n_bits.clamp(1, 52)) - 1) as f64;
    let eps = UNSQUASH_EPS.min(0.4 / levels);
    let mut out = m.clone();
    for x in out.data_mut() {
        *x = unsquash_within(quantize_level(squash(*x), n_bits)?, eps);
    }
    Ok(out)
}

pub fn corrupt_message<R: Rng + ?Sized>(m: &Tensor, rng: &mut R) -> Tensor {
    let mut out = m.clone();
    for x in out.data_mut() {
        *x = unsquash(rng.gen::<f64>());
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub seed: u64,
    pub team_return: f64,
    pub success: bool,
    pub collisions: usize,
    pub steps: usize,
    /// Joint action per timestep.
    pub actions: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_return: f64,
    /// Fraction of episodes with at least one collision.
    pub collision_rate: f64,
    pub degradation: DegradationSpec,
    pub records: Vec<EpisodeRecord>,
}

fn check_compatible(model: &IwolModel, spec: &EnvSpec) -> Result<()> {
    let c = &model.config;
    if c.num_agents != spec.num_agents
        || c.obs_dim != spec.obs_dim
        || c.num_actions != spec.num_actions
        || c.privileged_dim != spec.privileged_dim
    {
        return Err(config("environment does not match the model's dimensions"));
    }
    Ok(())
}

/// Chooses a joint action from the current observation.
pub trait ActionPolicy {
    fn act(&mut self, obs: &Observation) -> Result<Vec<usize>>;
}

/// Argmax actions over an argmax communication graph, with messages passed
/// through the degradation channel.
pub struct GreedyPolicy<'a> {
    model: &'a IwolModel,
    store: &'a ParameterStore,
    degradation: DegradationSpec,
    noise: ChaCha8Rng,
}

impl<'a> GreedyPolicy<'a> {
    pub fn new(model: &'a IwolModel, store: &'a ParameterStore, degradation: DegradationSpec) -> Result<Self> {
        degradation.validate()?;
        if model.mode() == VariantMode::MappoBaseline && degradation.kind != Degradation::None {
            return Err(config("message degradation needs a communicating variant"));
        }
        Ok(Self {
            model,
            store,
            degradation,
            noise: ChaCha8Rng::seed_from_u64(degradation.rng_seed),
        })
    }
}

impl ActionPolicy for GreedyPolicy<'_> {
    fn act(&mut self, obs: &Observation) -> Result<Vec<usize>> {
        let rows: Vec<&[f64]> = obs.obs.iter().map(|o| o.as_slice()).collect();
        let x = Tensor::from_rows(&rows);
        let mut tape = Tape::inference();
        let inputs = BatchInputs {
            obs: &x,
            positions: obs.positions.as_deref(),
            active: &obs.active,
        };
        let kind = self.degradation.kind;
        let noise = &mut self.noise;
        let mut filter = |m: &Tensor| -> Tensor {
            match kind {
                Degradation::None => m.clone(),
                Degradation::Quantize { n_bits } => quantize_message(m, n_bits).expect("validated bit width"),
                Degradation::Corrupt => corrupt_message(m, noise),
            }
        };
        let channel: Option<&mut dyn FnMut(&Tensor) -> Tensor> = match kind {
            Degradation::None => None,
            _ => Some(&mut filter),
        };
        let out = self.model.forward(&mut tape, self.store, &inputs, GateMode::Argmax, channel)?;
        let logits = tape.value(out.logits);
        Ok((0..obs.obs.len()).map(|a| logits.argmax_row(a)).collect())
    }
}

/// Plays `episodes` episodes, episode `e` reset with seed `seed + e`.
/// The report's `degradation` is left at none.
pub fn run_episodes(
    policy: &mut dyn ActionPolicy,
    env: &mut dyn Environment,
    episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    let mut records = Vec::with_capacity(episodes);
    for e in 0..episodes {
        let ep_seed = seed.wrapping_add(e as u64);
        let mut obs = env.reset(ep_seed);
        let mut actions_log = Vec::new();
        loop {
            let actions = policy.act(&obs)?;
            let step = env.step(&actions)?;
            actions_log.push(actions);
            if step.done {
                records.push(EpisodeRecord {
                    seed: ep_seed,
                    team_return: step.info.team_return,
                    success: step.info.success()?,
                    collisions: step.info.collisions,
                    steps: step.info.steps,
                    actions: actions_log,
                });
                break;
            }
            obs = step.observation;
        }
    }
    let n = records.len().max(1) as f64;
    let successes = records.iter().filter(|r| r.success).count();
    Ok(EvalReport {
        episodes,
        successes,
        success_rate: successes as f64 / n,
        mean_return: records.iter().map(|r| r.team_return).sum::<f64>() / n,
        collision_rate: records.iter().filter(|r| r.collisions > 0).count() as f64 / n,
        degradation: DegradationSpec::none(),
        records,
    })
}

/// Greedy evaluation of a trained model under a degradation setting.
pub fn evaluate(
    model: &IwolModel,
    store: &ParameterStore,
    env: &mut dyn Environment,
    episodes: usize,
    degradation: &DegradationSpec,
    seed: u64,
) -> Result<EvalReport> {
    check_compatible(model, env.spec())?;
    let mut policy = GreedyPolicy::new(model, store, *degradation)?;
    let mut report = run_episodes(&mut policy, env, episodes, seed)?;
    report.degradation = *degradation;
    Ok(report)
}
