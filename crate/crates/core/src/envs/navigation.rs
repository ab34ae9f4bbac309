//! Point robots on the unit square moving toward individual goals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_actions, mix_rewards, EpisodeInfo, Environment, Observation, StepResult};
use crate::error::{config, Result};
use crate::rollout::EnvSpec;

/// Displacements for `left, right, up, down, no_action`.
pub(crate) const MOVES: [(f64, f64); 5] = [(-1.0, 0.0), (1.0, 0.0), (0.0, 1.0), (0.0, -1.0), (0.0, 0.0)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NavigationConfig {
    pub num_agents: usize,
    pub d_step: f64,
    pub goal_radius: f64,
    pub lambda_co: f64,
    pub agent_radius: f64,
    pub max_steps: usize,
    pub penalty: f64,
}

impl Default for NavigationConfig {
    fn default() -> Self {
        Self {
            num_agents: 4,
            d_step: 0.05,
            goal_radius: 0.05,
            lambda_co: 0.5,
            agent_radius: 0.02,
            max_steps: 50,
            penalty: -5.0,
        }
    }
}

impl NavigationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_agents < 2 || self.max_steps < 1 {
            return Err(config("navigation needs ≥ 2 agents and ≥ 1 step"));
        }
        if !(self.d_step > 0.0 && self.goal_radius > 0.0 && self.agent_radius > 0.0) {
            return Err(config("d_step, goal_radius and agent_radius must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lambda_co) {
            return Err(config("lambda_co must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct NavAgentState {
    pub position: [f64; 2],
    pub goal: [f64; 2],
}

pub struct SimpleNavigation {
    cfg: NavigationConfig,
    spec: EnvSpec,
    agents: Vec<NavAgentState>,
    t: usize,
    info: EpisodeInfo,
}

/// Moves `p` by `delta`, clamping to the unit square. Returns whether the
/// move would have left it.
pub(crate) fn clamped_move(p: [f64; 2], delta: (f64, f64)) -> ([f64; 2], bool) {
    let raw = [p[0] + delta.0, p[1] + delta.1];
    let clamped = [raw[0].clamp(0.0, 1.0), raw[1].clamp(0.0, 1.0)];
    (clamped, clamped != raw)
}

pub(crate) fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Flags every agent closer than `2·radius` to another.
pub(crate) fn collisions(positions: &[[f64; 2]], radius: f64) -> (Vec<bool>, usize) {
    let limit = (2.0 * radius).powi(2);
    let mut hit = vec![false; positions.len()];
    let mut pairs = 0;
    for i in 0..positions.len() {
        for j in i + 1..positions.len() {
            if dist2(positions[i], positions[j]) < limit {
                hit[i] = true;
                hit[j] = true;
                pairs += 1;
            }
        }
    }
    (hit, pairs)
}

impl SimpleNavigation {
    pub fn new(cfg: NavigationConfig) -> Result<Self> {
        cfg.validate()?;
        let spec = EnvSpec {
            num_agents: cfg.num_agents,
            obs_dim: 4,
            obs_token_layout: vec![(0, 2), (2, 2)],
            num_actions: 5,
            max_steps: cfg.max_steps,
            privileged_dim: 4 * cfg.num_agents,
            has_positions: true,
        };
        spec.validate()?;
        let mut env = Self {
            agents: Vec::new(),
            cfg,
            spec,
            t: 0,
            info: EpisodeInfo::default(),
        };
        env.reset(0);
        Ok(env)
    }

    pub fn agents(&self) -> &[NavAgentState] {
        &self.agents
    }

    /// Overrides the episode state, for scripted scenarios.
    pub fn set_agents(&mut self, agents: Vec<NavAgentState>) {
        assert_eq!(agents.len(), self.cfg.num_agents);
        self.agents = agents;
    }

    pub fn config(&self) -> &NavigationConfig {
        &self.cfg
    }

    fn observe(&self) -> Observation {
        let n = self.agents.len();
        let obs = self
            .agents
            .iter()
            .map(|a| vec![a.position[0], a.position[1], a.goal[0], a.goal[1]])
            .collect();
        let privileged = (0..n)
            .map(|i| {
                let mut s = Vec::with_capacity(4 * n);
                for j in std::iter::once(i).chain((0..n).filter(|&j| j != i)) {
                    let a = &self.agents[j];
                    s.extend_from_slice(&[a.position[0], a.position[1], a.goal[0], a.goal[1]]);
                }
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

impl Environment for SimpleNavigation {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Observation {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let min_gap = (2.0 * self.cfg.agent_radius).powi(2);
        let mut agents: Vec<NavAgentState> = Vec::with_capacity(self.cfg.num_agents);
        while agents.len() < self.cfg.num_agents {
            let position = [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)];
            let goal = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
            if agents.iter().all(|a| dist2(a.position, position) > min_gap) {
                agents.push(NavAgentState { position, goal });
            }
        }
        self.agents = agents;
        self.t = 0;
        self.info = EpisodeInfo::default();
        self.observe()
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult> {
        check_actions(&self.spec, self.info.complete, actions)?;
        let mut violated = vec![false; self.agents.len()];
        for (i, agent) in self.agents.iter_mut().enumerate() {
            let (dx, dy) = MOVES[actions[i]];
            let (p, hit) = clamped_move(agent.position, (dx * self.cfg.d_step, dy * self.cfg.d_step));
            agent.position = p;
            violated[i] = hit;
        }
        let positions: Vec<[f64; 2]> = self.agents.iter().map(|a| a.position).collect();
        let (collided, pairs) = collisions(&positions, self.cfg.agent_radius);
        let individual: Vec<f64> = self.agents.iter().map(|a| -dist2(a.position, a.goal)).collect();
        let mut rewards = mix_rewards(&individual, self.cfg.lambda_co);
        let mut events = 0;
        for i in 0..rewards.len() {
            if collided[i] || violated[i] {
                rewards[i] += self.cfg.penalty;
                events += 1;
            }
        }

        self.t += 1;
        self.info.steps = self.t;
        self.info.collisions += pairs;
        self.info.safety_events += events;
        self.info.team_return += rewards.iter().sum::<f64>() / rewards.len() as f64;
        let done = self.t >= self.cfg.max_steps;
        if done {
            let r2 = self.cfg.goal_radius.powi(2);
            let ok = self.agents.iter().all(|a| dist2(a.position, a.goal) <= r2);
            self.info.finish(ok);
        }
        Ok(StepResult {
            observation: self.observe(),
            rewards,
            agent_done: vec![done; self.agents.len()],
            done,
            info: self.info.clone(),
        })
    }

    fn info(&self) -> &EpisodeInfo {
        &self.info
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(lambda_co: f64) -> SimpleNavigation {
        SimpleNavigation::new(NavigationConfig {
            lambda_co,
            ..Default::default()
        })
        .unwrap()
    }

    fn spread(first: NavAgentState) -> Vec<NavAgentState> {
        let mut v = vec![first];
        for k in 1..4 {
            let p = [0.2 * k as f64, 0.8];
            v.push(NavAgentState { position: p, goal: p });
        }
        v
    }

    #[test]
    fn reward_examples() {
        let mut e = env(0.0);
        e.set_agents(spread(NavAgentState {
            position: [0.5, 0.3],
            goal: [0.5, 0.3],
        }));
        let r = e.step(&[4, 4, 4, 4]).unwrap();
        assert_eq!(r.rewards[0], 0.0);

        let mut e = env(0.0);
        e.set_agents(spread(NavAgentState {
            position: [0.0, 0.0],
            goal: [1.0, 1.0],
        }));
        let r = e.step(&[4, 4, 4, 4]).unwrap();
        assert!((r.rewards[0] + 2.0).abs() < 1e-15);
    }

    #[test]
    fn boundary_violation_is_penalized_and_clamped() {
        let mut e = env(0.0);
        e.set_agents(spread(NavAgentState {
            position: [0.0, 0.5],
            goal: [0.0, 0.5],
        }));
        let r = e.step(&[0, 4, 4, 4]).unwrap();
        assert_eq!(e.agents()[0].position, [0.0, 0.5]);
        assert_eq!(r.rewards[0], -5.0);
    }

    #[test]
    fn reward_mixing() {
        let mut e = env(0.5);
        e.set_agents(spread(NavAgentState {
            position: [0.5, 0.5],
            goal: [0.5, 0.9],
        }));
        let r = e.step(&[4, 4, 4, 4]).unwrap();
        let own = -(0.4f64.powi(2));
        assert!((r.rewards[0] - 0.5 * own).abs() < 1e-12);
        assert!((r.rewards[1] - 0.5 * own / 3.0).abs() < 1e-12);
    }

    #[test]
    fn observation_layout_and_bounds() {
        let mut e = env(0.5);
        let o = e.reset(11);
        assert!(o.obs.iter().all(|v| v.len() == 4));
        assert!(o.privileged.iter().all(|v| v.len() == 16));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        while !e.info().complete {
            let acts: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
            let r = e.step(&acts).unwrap();
            for p in r.observation.positions.unwrap() {
                assert!((0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1]));
            }
        }
        assert_eq!(e.info().steps, 50);
    }
}
