//! Four-way traffic junction on a square grid with right-hand driving.
//!
//! Southbound traffic uses column `n/2 − 1`, northbound column `n/2`,
//! westbound row `n/2 − 1` and eastbound row `n/2`. Routes are precomputed
//! cell sequences from each entry; `move` advances one cell and a car that
//! steps past its last cell leaves the grid.
//!
//! An active car observes three tokens: its route (one-hot over four), its
//! row (one-hot over `n`) and its column (one-hot over `n`).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_actions, EpisodeInfo, Environment, Observation, StepResult};
use crate::error::{config, Result};
use crate::rollout::EnvSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrafficJunctionConfig {
    pub grid_size: usize,
    pub p_arrive: f64,
    pub n_max: usize,
    /// Agent slots exposed to the learner; must be at least `n_max`.
    pub num_slots: usize,
    pub episode_len: usize,
    pub r_coll: f64,
    pub r_time: f64,
    pub reward_sharing: RewardSharing,
}

/// How the junction's penalties reach the agents.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardSharing {
    /// Every slot receives the team reward `C·r_coll + Σ τ·r_time` until the
    /// episode ends, including slots whose car has left.
    #[default]
    Team,
    /// Each car receives `C_i·r_coll + τ_i·r_time` for the collisions it is
    /// part of and its own age; its trajectory ends when it leaves.
    PerCar,
}

impl Default for TrafficJunctionConfig {
    fn default() -> Self {
        Self {
            grid_size: 14,
            p_arrive: 0.1,
            n_max: 10,
            num_slots: 10,
            episode_len: 40,
            r_coll: -10.0,
            r_time: -0.01,
            reward_sharing: RewardSharing::Team,
        }
    }
}

impl TrafficJunctionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 4 || self.grid_size % 2 != 0 {
            return Err(config("grid_size must be an even number ≥ 4"));
        }
        if !(self.p_arrive > 0.0 && self.p_arrive <= 1.0) {
            return Err(config("p_arrive must lie in (0, 1]"));
        }
        if self.n_max < 1 || self.num_slots < self.n_max || self.num_slots < 2 {
            return Err(config("need n_max ≥ 1 and num_slots ≥ max(n_max, 2)"));
        }
        if self.episode_len < 1 {
            return Err(config("episode_len must be positive"));
        }
        if !(self.r_coll < 0.0 && self.r_time < 0.0) {
            return Err(config("r_coll and r_time must be negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Straight,
    Left,
    Right,
    UTurn,
}

impl Route {
    pub const ALL: [Route; 4] = [Route::Straight, Route::Left, Route::Right, Route::UTurn];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CarState {
    pub cell: (usize, usize),
    pub entry: usize,
    pub route: Route,
    pub route_progress: usize,
    pub age: usize,
    pub active: bool,
}

pub struct TrafficJunction {
    cfg: TrafficJunctionConfig,
    spec: EnvSpec,
    /// `routes[entry][route]` is the list of cells visited.
    routes: Vec<Vec<Vec<(usize, usize)>>>,
    cars: Vec<CarState>,
    rng: ChaCha8Rng,
    t: usize,
    info: EpisodeInfo,
}

impl TrafficJunction {
    pub const MOVE: usize = 0;
    pub const STAY: usize = 1;

    pub fn new(cfg: TrafficJunctionConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.grid_size;
        let spec = EnvSpec {
            num_agents: cfg.num_slots,
            obs_dim: 4 + 2 * n,
            obs_token_layout: vec![(0, 4), (4, n), (4 + n, n)],
            num_actions: 2,
            max_steps: cfg.episode_len,
            privileged_dim: 8,
            has_positions: true,
        };
        spec.validate()?;
        let routes = build_routes(cfg.grid_size);
        let cars = (0..cfg.num_slots).map(|_| inactive_car()).collect();
        let mut env = Self {
            cfg,
            spec,
            routes,
            cars,
            rng: ChaCha8Rng::seed_from_u64(0),
            t: 0,
            info: EpisodeInfo::default(),
        };
        env.reset(0);
        Ok(env)
    }

    pub fn config(&self) -> &TrafficJunctionConfig {
        &self.cfg
    }

    pub fn cars(&self) -> &[CarState] {
        &self.cars
    }

    pub fn route_cells(&self, entry: usize, route: Route) -> &[(usize, usize)] {
        &self.routes[entry][route.index()]
    }

    pub fn active_count(&self) -> usize {
        self.cars.iter().filter(|c| c.active).count()
    }

    fn arrivals(&mut self) {
        for entry in 0..4 {
            let arrives = self.rng.gen::<f64>() < self.cfg.p_arrive;
            if !arrives || self.active_count() >= self.cfg.n_max {
                continue;
            }
            let start = self.routes[entry][0][0];
            if self.cars.iter().any(|c| c.active && c.cell == start) {
                continue;
            }
            let Some(slot) = self.cars.iter().position(|c| !c.active) else {
                continue;
            };
            let route = Route::ALL[self.rng.gen_range(0..4)];
            self.cars[slot] = CarState {
                cell: start,
                entry,
                route,
                route_progress: 0,
                age: 0,
                active: true,
            };
        }
    }

    fn observe(&self) -> Observation {
        let scale = (self.cfg.grid_size - 1) as f64;
        let n_active = self.active_count();
        let mut obs = Vec::with_capacity(self.cars.len());
        let mut privileged = Vec::with_capacity(self.cars.len());
        let mut positions = Vec::with_capacity(self.cars.len());
        for (i, car) in self.cars.iter().enumerate() {
            if !car.active {
                obs.push(vec![0.0; self.spec.obs_dim]);
                privileged.push(vec![0.0; self.spec.privileged_dim]);
                positions.push([-1.0, -1.0]);
                continue;
            }
            let (r, c) = (car.cell.0 as f64, car.cell.1 as f64);
            let mut o = vec![0.0; self.spec.obs_dim];
            o[car.route.index()] = 1.0;
            o[4 + car.cell.0] = 1.0;
            o[4 + self.cfg.grid_size + car.cell.1] = 1.0;
            obs.push(o);

            let route_len = self.routes[car.entry][car.route.index()].len();
            let nearest = self
                .cars
                .iter()
                .enumerate()
                .filter(|&(j, other)| j != i && other.active)
                .map(|(_, other)| (other.cell.0 as f64 - r, other.cell.1 as f64 - c))
                .min_by(|a, b| (a.0.abs() + a.1.abs()).total_cmp(&(b.0.abs() + b.1.abs())));
            let (dist, dr, dc) = match nearest {
                Some((dr, dc)) => ((dr.abs() + dc.abs()) / (2.0 * scale), dr / scale, dc / scale),
                None => (1.0, 0.0, 0.0),
            };
            privileged.push(vec![
                r / scale,
                c / scale,
                car.route_progress as f64 / route_len as f64,
                car.age as f64 / self.cfg.episode_len as f64,
                n_active as f64 / self.cfg.n_max as f64,
                dist,
                dr,
                dc,
            ]);
            positions.push([r, c]);
        }
        Observation {
            obs,
            privileged,
            positions: Some(positions),
            active: self.cars.iter().map(|c| c.active).collect(),
        }
    }
}

fn inactive_car() -> CarState {
    CarState {
        cell: (0, 0),
        entry: 0,
        route: Route::Straight,
        route_progress: 0,
        age: 0,
        active: false,
    }
}

/// Routes for the northern entry, rotated clockwise for the other three.
fn build_routes(n: usize) -> Vec<Vec<Vec<(usize, usize)>>> {
    let (a, b) = (n / 2 - 1, n / 2);
    let down = |to: usize| (0..=to).map(move |r| (r, a));
    let straight: Vec<_> = down(n - 1).collect();
    let right: Vec<_> = down(a).chain((0..a).rev().map(|c| (a, c))).collect();
    let left: Vec<_> = down(b).chain((b..n).map(|c| (b, c))).collect();
    let u_turn: Vec<_> = down(b).chain((0..=b).rev().map(|r| (r, b))).collect();
    let north = vec![straight, left, right, u_turn];
    let rotate = |(r, c): (usize, usize)| (c, n - 1 - r);
    let mut all = vec![north];
    for k in 1..4 {
        let prev: &Vec<Vec<(usize, usize)>> = &all[k - 1];
        let next = prev
            .iter()
            .map(|route| route.iter().map(|&p| rotate(p)).collect())
            .collect();
        all.push(next);
    }
    all
}

impl Environment for TrafficJunction {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Observation {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.t = 0;
        self.info = EpisodeInfo::default();
        for car in &mut self.cars {
            *car = inactive_car();
        }
        self.arrivals();
        self.observe()
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult> {
        check_actions(&self.spec, self.info.complete, actions)?;
        for (car, &action) in self.cars.iter_mut().zip(actions) {
            if !car.active || action != Self::MOVE {
                continue;
            }
            let route = &self.routes[car.entry][car.route.index()];
            car.route_progress += 1;
            if car.route_progress >= route.len() {
                car.active = false;
            } else {
                car.cell = route[car.route_progress];
            }
        }

        let n = self.cars.len();
        let mut collisions = 0;
        let mut involved = vec![0usize; n];
        for i in 0..n {
            for j in i + 1..n {
                let (p, q) = (&self.cars[i], &self.cars[j]);
                if p.active && q.active && p.cell == q.cell {
                    collisions += 1;
                    involved[i] += 1;
                    involved[j] += 1;
                }
            }
        }
        let age_sum: usize = self.cars.iter().filter(|c| c.active).map(|c| c.age).sum();
        let team = collisions as f64 * self.cfg.r_coll + age_sum as f64 * self.cfg.r_time;
        let (rewards, mut agent_done): (Vec<f64>, Vec<bool>) = match self.cfg.reward_sharing {
            RewardSharing::Team => (vec![team; n], vec![false; n]),
            RewardSharing::PerCar => self
                .cars
                .iter()
                .zip(&involved)
                .map(|(c, &k)| {
                    if c.active {
                        (k as f64 * self.cfg.r_coll + c.age as f64 * self.cfg.r_time, false)
                    } else {
                        (0.0, true)
                    }
                })
                .unzip(),
        };
        for car in self.cars.iter_mut().filter(|c| c.active) {
            car.age += 1;
        }

        self.t += 1;
        self.info.steps = self.t;
        self.info.collisions += collisions;
        self.info.team_return += team;
        let done = self.t >= self.cfg.episode_len;
        if done {
            agent_done.fill(true);
            let ok = self.info.collisions == 0;
            self.info.finish(ok);
        } else {
            self.arrivals();
        }
        Ok(StepResult {
            observation: self.observe(),
            rewards,
            agent_done,
            done,
            info: self.info.clone(),
        })
    }

    fn info(&self) -> &EpisodeInfo {
        &self.info
    }
}
