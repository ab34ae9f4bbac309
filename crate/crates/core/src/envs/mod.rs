//! Cooperative multi-agent environments behind a common Dec-POMDP interface.

mod navigation;
mod traffic;
mod transport;

use std::io::Write;

use serde::Serialize;

pub use navigation::{NavAgentState, NavigationConfig, SimpleNavigation};
pub use traffic::{CarState, RewardSharing, Route, TrafficJunction, TrafficJunctionConfig};
pub use transport::{MaterialTransport, SpeedClass, TransportAgentState, TransportConfig};

use crate::config::{EnvKind, RunConfig};
use crate::error::{contract, Result};
use crate::rollout::EnvSpec;

/// Per-agent view of the world after a reset or step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Observation {
    pub obs: Vec<Vec<f64>>,
    pub privileged: Vec<Vec<f64>>,
    pub positions: Option<Vec<[f64; 2]>>,
    pub active: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepResult {
    pub observation: Observation,
    pub rewards: Vec<f64>,
    /// True for an agent whose reward stream ends this step.
    pub agent_done: Vec<bool>,
    pub done: bool,
    pub info: EpisodeInfo,
}

/// Running episode statistics.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EpisodeInfo {
    pub steps: usize,
    pub complete: bool,
    pub collisions: usize,
    pub safety_events: usize,
    pub team_return: f64,
    outcome: bool,
}

impl EpisodeInfo {
    /// Whether the finished episode met the environment's success condition.
    pub fn success(&self) -> Result<bool> {
        if !self.complete {
            return Err(contract("success queried before the episode finished"));
        }
        Ok(self.outcome)
    }

    pub(crate) fn finish(&mut self, outcome: bool) {
        self.complete = true;
        self.outcome = outcome;
    }
}

pub trait Environment: Send {
    fn spec(&self) -> &EnvSpec;

    /// Starts a new episode; a deterministic function of `seed`.
    fn reset(&mut self, seed: u64) -> Observation;

    fn step(&mut self, actions: &[usize]) -> Result<StepResult>;

    fn info(&self) -> &EpisodeInfo;
}

pub(crate) fn check_actions(spec: &EnvSpec, done: bool, actions: &[usize]) -> Result<()> {
    if done {
        return Err(contract("step called after the episode finished"));
    }
    if actions.len() != spec.num_agents {
        return Err(contract(format!(
            "expected {} actions, got {}",
            spec.num_agents,
            actions.len()
        )));
    }
    if let Some(a) = actions.iter().find(|&&a| a >= spec.num_actions) {
        return Err(contract(format!(
            "action {a} outside [0, {})",
            spec.num_actions
        )));
    }
    Ok(())
}

pub fn make_env(config: &RunConfig) -> Result<Box<dyn Environment>> {
    config.validate()?;
    Ok(match config.env {
        EnvKind::TrafficJunction => Box::new(TrafficJunction::new(config.traffic_junction.clone())?),
        EnvKind::SimpleNavigation => Box::new(SimpleNavigation::new(config.simple_navigation.clone())?),
        EnvKind::MaterialTransport => Box::new(MaterialTransport::new(config.material_transport.clone())?),
    })
}

#[derive(Serialize)]
struct TrajectoryRecord<'a> {
    episode: usize,
    t: usize,
    actions: &'a [usize],
    rewards: &'a [f64],
    positions: &'a Option<Vec<[f64; 2]>>,
    active: &'a [bool],
    done: bool,
}

/// Writes one JSON line per environment step.
pub struct TrajectoryWriter<W: Write> {
    out: W,
}

impl<W: Write> TrajectoryWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn record(&mut self, episode: usize, t: usize, actions: &[usize], step: &StepResult) -> Result<()> {
        let rec = TrajectoryRecord {
            episode,
            t,
            actions,
            rewards: &step.rewards,
            positions: &step.observation.positions,
            active: &step.observation.active,
            done: step.done,
        };
        serde_json::to_writer(&mut self.out, &rec)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Mixes individual rewards with the mean of the other agents' rewards.
pub(crate) fn mix_rewards(individual: &[f64], lambda_co: f64) -> Vec<f64> {
    let n = individual.len();
    let total: f64 = individual.iter().sum();
    individual
        .iter()
        .map(|&r| {
            let others = if n > 1 { (total - r) / (n - 1) as f64 } else { 0.0 };
            (1.0 - lambda_co) * r + lambda_co * others
        })
        .collect()
}
