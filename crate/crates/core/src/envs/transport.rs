//! Slow and fast robots ferrying material from two loading zones to a target.
//!
//! Loading and unloading happen automatically whenever a robot is inside the
//! corresponding zone: an empty-handed robot fills up to its capacity, and a
//! loaded robot in the target zone drops everything.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::navigation::{clamped_move, collisions, dist2, MOVES};
use super::{check_actions, mix_rewards, EpisodeInfo, Environment, Observation, StepResult};
use crate::error::{config, Result};
use crate::rollout::EnvSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportConfig {
    pub num_slow: usize,
    pub num_fast: usize,
    pub d_step: f64,
    pub fast_multiplier: f64,
    pub capacity_slow: f64,
    pub capacity_fast: f64,
    pub target: [f64; 2],
    pub zone1: [f64; 2],
    pub zone2: [f64; 2],
    pub zone_radius: f64,
    pub zone1_load: f64,
    pub zone2_load: f64,
    pub c_step: f64,
    pub c_load_close: f64,
    pub c_load_distant: f64,
    pub c_unload: f64,
    pub c_safety: f64,
    pub lambda_co: f64,
    pub agent_radius: f64,
    pub max_steps: usize,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self {
            num_slow: 2,
            num_fast: 2,
            d_step: 0.05,
            fast_multiplier: 2.0,
            capacity_slow: 1.0,
            capacity_fast: 2.0,
            target: [0.1, 0.5],
            zone1: [0.4, 0.25],
            zone2: [0.85, 0.75],
            zone_radius: 0.1,
            zone1_load: 4.0,
            zone2_load: 4.0,
            c_step: -0.01,
            c_load_close: 0.1,
            c_load_distant: 0.3,
            c_unload: 1.0,
            c_safety: -5.0,
            lambda_co: 0.5,
            agent_radius: 0.02,
            max_steps: 60,
        }
    }
}

impl TransportConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_slow + self.num_fast < 2 || self.max_steps < 1 {
            return Err(config("transport needs ≥ 2 robots and ≥ 1 step"));
        }
        if !(self.d_step > 0.0 && self.fast_multiplier > 0.0 && self.zone_radius > 0.0) {
            return Err(config("d_step, fast_multiplier and zone_radius must be positive"));
        }
        if !(self.capacity_slow > 0.0 && self.capacity_fast > 0.0) {
            return Err(config("capacities must be positive"));
        }
        if !(self.zone1_load >= 0.0 && self.zone2_load >= 0.0) {
            return Err(config("zone loads must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.lambda_co) {
            return Err(config("lambda_co must lie in [0, 1]"));
        }
        Ok(())
    }

    fn total(&self) -> f64 {
        self.zone1_load + self.zone2_load
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeedClass {
    Slow,
    Fast,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TransportAgentState {
    pub position: [f64; 2],
    pub load: f64,
    pub speed_class: SpeedClass,
}

pub struct MaterialTransport {
    cfg: TransportConfig,
    spec: EnvSpec,
    agents: Vec<TransportAgentState>,
    zone1: f64,
    zone2: f64,
    delivered: f64,
    t: usize,
    info: EpisodeInfo,
}

impl MaterialTransport {
    pub fn new(cfg: TransportConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.num_slow + cfg.num_fast;
        let spec = EnvSpec {
            num_agents: n,
            obs_dim: 5,
            obs_token_layout: vec![(0, 2), (2, 1), (3, 2)],
            num_actions: 5,
            max_steps: cfg.max_steps,
            privileged_dim: 4 * n + 2,
            has_positions: true,
        };
        spec.validate()?;
        let mut env = Self {
            cfg,
            spec,
            agents: Vec::new(),
            zone1: 0.0,
            zone2: 0.0,
            delivered: 0.0,
            t: 0,
            info: EpisodeInfo::default(),
        };
        env.reset(0);
        Ok(env)
    }

    pub fn agents(&self) -> &[TransportAgentState] {
        &self.agents
    }

    /// `(zone1, zone2, carried, delivered)` amounts.
    pub fn ledger(&self) -> (f64, f64, f64, f64) {
        let carried = self.agents.iter().map(|a| a.load).sum();
        (self.zone1, self.zone2, carried, self.delivered)
    }

    fn capacity(&self, a: &TransportAgentState) -> f64 {
        match a.speed_class {
            SpeedClass::Slow => self.cfg.capacity_slow,
            SpeedClass::Fast => self.cfg.capacity_fast,
        }
    }

    fn step_len(&self, a: &TransportAgentState) -> f64 {
        match a.speed_class {
            SpeedClass::Slow => self.cfg.d_step,
            SpeedClass::Fast => self.cfg.d_step * self.cfg.fast_multiplier,
        }
    }

    fn observe(&self) -> Observation {
        let n = self.agents.len();
        let obs = self
            .agents
            .iter()
            .map(|a| vec![a.position[0], a.position[1], a.load, self.zone1, self.zone2])
            .collect();
        let privileged = (0..n)
            .map(|i| {
                let mut s = Vec::with_capacity(self.spec.privileged_dim);
                for j in std::iter::once(i).chain((0..n).filter(|&j| j != i)) {
                    let a = &self.agents[j];
                    s.extend_from_slice(&[a.position[0], a.position[1], a.load, self.step_len(a)]);
                }
                s.extend_from_slice(&[self.zone1, self.zone2]);
                s
            })
            .collect();
        Observation {
            obs,
            privileged,
            positions: Some(self.agents.iter().map(|a| a.position).collect()),
            active: vec![true; n],
        }
    }
}

impl Environment for MaterialTransport {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Observation {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let min_gap = (2.0 * self.cfg.agent_radius).powi(2);
        let n = self.cfg.num_slow + self.cfg.num_fast;
        let mut agents: Vec<TransportAgentState> = Vec::with_capacity(n);
        while agents.len() < n {
            let position = [rng.gen_range(0.05..0.25), rng.gen_range(0.3..0.7)];
            if agents.iter().all(|a| dist2(a.position, position) > min_gap) {
                let speed_class = if agents.len() < self.cfg.num_slow {
                    SpeedClass::Slow
                } else {
                    SpeedClass::Fast
                };
                agents.push(TransportAgentState {
                    position,
                    load: 0.0,
                    speed_class,
                });
            }
        }
        self.agents = agents;
        self.zone1 = self.cfg.zone1_load;
        self.zone2 = self.cfg.zone2_load;
        self.delivered = 0.0;
        self.t = 0;
        self.info = EpisodeInfo::default();
        self.observe()
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult> {
        check_actions(&self.spec, self.info.complete, actions)?;
        let n = self.agents.len();
        let mut individual = vec![self.cfg.c_step; n];
        let mut unsafe_ = vec![false; n];
        for i in 0..n {
            let (dx, dy) = MOVES[actions[i]];
            let s = self.step_len(&self.agents[i]);
            let (p, hit) = clamped_move(self.agents[i].position, (dx * s, dy * s));
            self.agents[i].position = p;
            unsafe_[i] = hit;
        }
        let positions: Vec<[f64; 2]> = self.agents.iter().map(|a| a.position).collect();
        let (collided, pairs) = collisions(&positions, self.cfg.agent_radius);

        let r2 = self.cfg.zone_radius.powi(2);
        for i in 0..n {
            let p = self.agents[i].position;
            if self.agents[i].load > 0.0 && dist2(p, self.cfg.target) <= r2 {
                let amount = self.agents[i].load;
                self.delivered += amount;
                self.agents[i].load = 0.0;
                individual[i] += self.cfg.c_unload * amount;
            } else if self.agents[i].load == 0.0 {
                let cap = self.capacity(&self.agents[i]);
                if self.zone1 > 0.0 && dist2(p, self.cfg.zone1) <= r2 {
                    let amount = cap.min(self.zone1);
                    self.zone1 -= amount;
                    self.agents[i].load = amount;
                    individual[i] += self.cfg.c_load_close * amount;
                } else if self.zone2 > 0.0 && dist2(p, self.cfg.zone2) <= r2 {
                    let amount = cap.min(self.zone2);
                    self.zone2 -= amount;
                    self.agents[i].load = amount;
                    individual[i] += self.cfg.c_load_distant * amount;
                }
            }
            if collided[i] || unsafe_[i] {
                individual[i] += self.cfg.c_safety;
            }
        }
        let events = (0..n).filter(|&i| collided[i] || unsafe_[i]).count();
        let rewards = mix_rewards(&individual, self.cfg.lambda_co);

        self.t += 1;
        self.info.steps = self.t;
        self.info.collisions += pairs;
        self.info.safety_events += events;
        self.info.team_return += rewards.iter().sum::<f64>() / n as f64;
        let all_delivered = self.delivered >= self.cfg.total();
        let done = all_delivered || self.t >= self.cfg.max_steps;
        if done {
            self.info.finish(all_delivered);
        }
        Ok(StepResult {
            observation: self.observe(),
            rewards,
            agent_done: vec![done; n],
            done,
            info: self.info.clone(),
        })
    }

    fn info(&self) -> &EpisodeInfo {
        &self.info
    }
}
