//! Dec-POMDP shapes, per-agent trajectory storage, and return estimation.

use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub num_agents: usize,
    pub obs_dim: usize,
    /// `(offset, length)` segments splitting an observation into entity tokens.
    pub obs_token_layout: Vec<(usize, usize)>,
    pub num_actions: usize,
    pub max_steps: usize,
    pub privileged_dim: usize,
    pub has_positions: bool,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_agents < 2 {
            return Err(config("environments need at least two agents"));
        }
        if self.max_steps < 1 || self.num_actions < 1 || self.obs_dim < 1 || self.privileged_dim < 1 {
            return Err(config("max_steps, num_actions, obs_dim and privileged_dim must be positive"));
        }
        let mut next = 0;
        for &(offset, len) in &self.obs_token_layout {
            if offset != next || len == 0 {
                return Err(config(format!(
                    "token layout {:?} is not a contiguous partition of [0, {})",
                    self.obs_token_layout, self.obs_dim
                )));
            }
            next += len;
        }
        if next != self.obs_dim {
            return Err(config(format!(
                "token layout {:?} covers {next} of {} observation entries",
                self.obs_token_layout, self.obs_dim
            )));
        }
        Ok(())
    }
}

/// One agent's record for one timestep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: usize,
    pub log_prob: f64,
    /// Value estimate in return units.
    pub value: f64,
    /// Raw value-head output (normalized units) behind `value`.
    pub value_head: f64,
    pub reward: f64,
    pub done: bool,
    pub privileged: Vec<f64>,
    pub position: Option<[f64; 2]>,
    pub active: bool,
    /// Keep/drop Gumbel noise for this agent's incoming edges, `2·I` values,
    /// so the sampled graph can be rebuilt exactly at update time.
    pub edge_noise: Vec<f64>,
}

impl Transition {
    pub fn validate(&self) -> Result<()> {
        if !(self.log_prob <= 0.0) {
            return Err(contract(format!("log_prob {} is not ≤ 0", self.log_prob)));
        }
        Ok(())
    }
}

/// Trajectory segment indexed `[agent][timestep]`.
#[derive(Clone, Debug, Default)]
pub struct RolloutBuffer {
    transitions: Vec<Vec<Transition>>,
    returns: Option<Vec<Vec<f64>>>,
    advantages: Option<Vec<Vec<f64>>>,
}

impl RolloutBuffer {
    pub fn new(num_agents: usize) -> Self {
        Self {
            transitions: vec![Vec::new(); num_agents],
            returns: None,
            advantages: None,
        }
    }

    pub fn num_agents(&self) -> usize {
        self.transitions.len()
    }

    pub fn len(&self) -> usize {
        self.transitions.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Appends one joint timestep. Invalidates previously computed targets.
    pub fn push_step(&mut self, step: Vec<Transition>) -> Result<()> {
        if step.len() != self.num_agents() {
            return Err(contract(format!(
                "step has {} transitions for {} agents",
                step.len(),
                self.num_agents()
            )));
        }
        for (agent, t) in step.into_iter().enumerate() {
            t.validate()?;
            self.transitions[agent].push(t);
        }
        self.returns = None;
        self.advantages = None;
        Ok(())
    }

    pub fn transitions(&self) -> &[Vec<Transition>] {
        &self.transitions
    }

    pub fn get(&self, agent: usize, t: usize) -> &Transition {
        &self.transitions[agent][t]
    }

    /// Fills returns and GAE advantages. `bootstrap[i]` is the value estimate
    /// of agent `i`'s state after the last stored step (ignored when that step
    /// is terminal).
    ///
    /// Inactive records never train the value head, so their stored values
    /// are replaced by the mean value of the active agents at the same step,
    /// or by the Monte Carlo return when no agent is active.
    pub fn compute_targets(&mut self, gamma: f64, lam: f64, bootstrap: &[f64]) -> Result<()> {
        if bootstrap.len() != self.num_agents() {
            return Err(contract("one bootstrap value per agent is required"));
        }
        let mut returns = Vec::with_capacity(self.num_agents());
        for (traj, &boot) in self.transitions.iter().zip(bootstrap) {
            let rewards: Vec<f64> = traj.iter().map(|t| t.reward).collect();
            let dones: Vec<bool> = traj.iter().map(|t| t.done).collect();
            returns.push(compute_returns(&rewards, &dones, gamma, Some(boot))?);
        }
        let shared: Vec<Option<f64>> = (0..self.len())
            .map(|t| {
                let vals: Vec<f64> = self
                    .transitions
                    .iter()
                    .map(|traj| &traj[t])
                    .filter(|tr| tr.active)
                    .map(|tr| tr.value)
                    .collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            })
            .collect();
        let mut advantages = Vec::with_capacity(self.num_agents());
        for ((traj, &boot), ret) in self.transitions.iter().zip(bootstrap).zip(&returns) {
            let rewards: Vec<f64> = traj.iter().map(|t| t.reward).collect();
            let dones: Vec<bool> = traj.iter().map(|t| t.done).collect();
            let values: Vec<f64> = traj
                .iter()
                .enumerate()
                .map(|(t, tr)| if tr.active { tr.value } else { shared[t].unwrap_or(ret[t]) })
                .collect();
            advantages.push(compute_gae(&rewards, &values, &dones, gamma, lam, Some(boot))?);
        }
        self.returns = Some(returns);
        self.advantages = Some(advantages);
        Ok(())
    }

    pub fn returns(&self) -> Result<&[Vec<f64>]> {
        self.returns
            .as_deref()
            .ok_or_else(|| contract("returns read before compute_targets"))
    }

    pub fn advantages(&self) -> Result<&[Vec<f64>]> {
        self.advantages
            .as_deref()
            .ok_or_else(|| contract("advantages read before compute_targets"))
    }
}

/// Discounted returns `R^t = r^t + γ·(1 − done^t)·R^{t+1}`, with
/// `R^T = bootstrap` (0 when absent).
pub fn compute_returns(rewards: &[f64], dones: &[bool], gamma: f64, bootstrap: Option<f64>) -> Result<Vec<f64>> {
    if rewards.len() != dones.len() {
        return Err(contract(format!(
            "{} rewards but {} done flags",
            rewards.len(),
            dones.len()
        )));
    }
    let mut out = vec![0.0; rewards.len()];
    let mut next = bootstrap.unwrap_or(0.0);
    for t in (0..rewards.len()).rev() {
        let carry = if dones[t] { 0.0 } else { next };
        out[t] = rewards[t] + gamma * carry;
        next = out[t];
    }
    Ok(out)
}

/// Generalized advantage estimation. `bootstrap` is `V^T` after the segment.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    gamma: f64,
    lam: f64,
    bootstrap: Option<f64>,
) -> Result<Vec<f64>> {
    if rewards.len() != values.len() || rewards.len() != dones.len() {
        return Err(contract(format!(
            "sequence lengths differ: {} rewards, {} values, {} dones",
            rewards.len(),
            values.len(),
            dones.len()
        )));
    }
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = bootstrap.unwrap_or(0.0);
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        adv[t] = delta + gamma * lam * live * next_adv;
        next_adv = adv[t];
        next_value = values[t];
    }
    Ok(adv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn returns_examples() {
        close(&compute_returns(&[0.0], &[true], 0.99, None).unwrap(), &[0.0]);
        close(
            &compute_returns(&[1.0, 1.0, 1.0], &[false, false, true], 0.99, None).unwrap(),
            &[2.9701, 1.99, 1.0],
        );
        close(&compute_returns(&[5.0, 3.0], &[true, true], 0.5, None).unwrap(), &[5.0, 3.0]);
        close(&compute_returns(&[1.0], &[false], 0.5, Some(4.0)).unwrap(), &[3.0]);
        assert!(compute_returns(&[1.0], &[], 0.9, None).is_err());
    }

    #[test]
    fn gae_examples() {
        close(
            &compute_gae(&[1.0], &[0.5], &[true], 0.99, 0.95, None).unwrap(),
            &[0.5],
        );
        // λ = 0 gives one-step TD errors
        let (r, v, d) = ([1.0, -2.0, 0.5], [0.3, 0.1, -0.4], [false, false, true]);
        let a = compute_gae(&r, &v, &d, 0.9, 0.0, None).unwrap();
        close(&a, &[1.0 + 0.9 * 0.1 - 0.3, -2.0 + 0.9 * -0.4 - 0.1, 0.5 + 0.4]);
        assert!(compute_gae(&r, &v[..2], &d, 0.9, 0.0, None).is_err());
    }

    #[test]
    fn spec_layout_validation() {
        let mut spec = EnvSpec {
            num_agents: 2,
            obs_dim: 5,
            obs_token_layout: vec![(0, 2), (2, 3)],
            num_actions: 5,
            max_steps: 10,
            privileged_dim: 3,
            has_positions: true,
        };
        assert!(spec.validate().is_ok());
        spec.obs_token_layout = vec![(0, 2), (3, 2)];
        assert!(spec.validate().is_err());
        spec.obs_token_layout = vec![(0, 2), (2, 2)];
        assert!(spec.validate().is_err());
        spec.obs_token_layout = vec![(0, 5)];
        spec.num_agents = 1;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn targets_are_unreadable_until_computed() {
        let mut buf = RolloutBuffer::new(2);
        let t = Transition {
            obs: vec![0.0],
            action: 0,
            log_prob: -0.5,
            value: 0.0,
            value_head: 0.0,
            reward: 1.0,
            done: true,
            privileged: vec![0.0],
            position: None,
            active: true,
            edge_noise: vec![],
        };
        buf.push_step(vec![t.clone(), t.clone()]).unwrap();
        assert!(buf.returns().is_err());
        assert!(buf.advantages().is_err());
        buf.compute_targets(0.99, 0.95, &[0.0, 0.0]).unwrap();
        assert_eq!(buf.returns().unwrap()[1], vec![1.0]);
        buf.push_step(vec![t.clone(), t.clone()]).unwrap();
        assert!(buf.returns().is_err());
        assert!(buf.push_step(vec![t.clone()]).is_err());
        let bad = Transition { log_prob: 0.1, ..t };
        assert!(buf.push_step(vec![bad.clone(), bad]).is_err());
    }
}
