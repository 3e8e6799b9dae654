//! Multi-task predator-prey grid world. Agents (predators) with an attack
//! capability hunt randomly-moving prey with a defense capability on a small
//! grid with fixed obstacles; a prey is captured when the total attack
//! capability of adjacent agents choosing the capture action reaches its
//! defense capability. Task scale {N_a, N_p, N_o} and capabilities {C_a, C_p}
//! are sampled per episode, with held-out ranges for zero-shot evaluation.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OptError, Result};

/// Per-entity feature width: rel x, rel y, one-hot {agent, prey, obstacle},
/// capability, is-self, visible.
pub const ENTITY_FEATURES: usize = 8;

/// Action indices.
pub const ACT_UP: usize = 0;
pub const ACT_DOWN: usize = 1;
pub const ACT_LEFT: usize = 2;
pub const ACT_RIGHT: usize = 3;
pub const ACT_STOP: usize = 4;
pub const ACT_CAPTURE: usize = 5;
pub const N_ACTIONS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    UnseenCapability,
    UnseenScale,
    UnseenBoth,
}

impl Split {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "train" => Ok(Split::Train),
            "unseen_capability" => Ok(Split::UnseenCapability),
            "unseen_scale" => Ok(Split::UnseenScale),
            "unseen_both" => Ok(Split::UnseenBoth),
            other => Err(OptError::Config(format!(
                "unknown split '{other}' (expected train, unseen_capability, unseen_scale, unseen_both)"
            ))),
        }
    }
}

/// Inclusive integer range pair: values seen in training and the disjoint
/// values reserved for zero-shot evaluation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct RangePair {
    pub train: (u32, u32),
    pub unseen: (u32, u32),
}

impl RangePair {
    fn sample_train<R: Rng>(&self, rng: &mut R) -> u32 {
        rng.gen_range(self.train.0..=self.train.1)
    }
    fn sample_unseen<R: Rng>(&self, rng: &mut R) -> u32 {
        rng.gen_range(self.unseen.0..=self.unseen.1)
    }
    fn validate(&self, name: &str) -> Result<()> {
        if self.train.0 > self.train.1 || self.unseen.0 > self.unseen.1 {
            return Err(OptError::Config(format!("empty range for {name}")));
        }
        Ok(())
    }
}

/// Scenario family: parameter ranges per split plus geometry and rewards.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub grid_w: usize,
    pub grid_h: usize,
    pub sight_range: u32,
    pub horizon: usize,
    pub n_agents: RangePair,
    pub n_prey: RangePair,
    pub n_obstacles: RangePair,
    pub attack_cap: RangePair,
    pub defense_cap: RangePair,
    pub capture_reward: f64,
    pub win_reward: f64,
    pub step_penalty: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            grid_w: 7,
            grid_h: 7,
            sight_range: 3,
            horizon: 60,
            n_agents: RangePair { train: (2, 3), unseen: (4, 4) },
            n_prey: RangePair { train: (1, 2), unseen: (3, 3) },
            n_obstacles: RangePair { train: (0, 2), unseen: (0, 2) },
            attack_cap: RangePair { train: (1, 2), unseen: (3, 4) },
            defense_cap: RangePair { train: (2, 4), unseen: (5, 6) },
            capture_reward: 10.0,
            win_reward: 50.0,
            step_penalty: 0.05,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        self.n_agents.validate("n_agents")?;
        self.n_prey.validate("n_prey")?;
        self.n_obstacles.validate("n_obstacles")?;
        self.attack_cap.validate("attack_cap")?;
        self.defense_cap.validate("defense_cap")?;
        if self.grid_w * self.grid_h < self.max_entities() {
            return Err(OptError::Config("grid too small for entity count".into()));
        }
        if self.horizon == 0 {
            return Err(OptError::Config("horizon must be positive".into()));
        }
        Ok(())
    }

    /// Padded entity count over both the train and unseen ranges.
    pub fn max_entities(&self) -> usize {
        let hi = |r: &RangePair| r.train.1.max(r.unseen.1) as usize;
        hi(&self.n_agents) + hi(&self.n_prey) + hi(&self.n_obstacles)
    }

    pub fn max_agents(&self) -> usize {
        self.n_agents.train.1.max(self.n_agents.unseen.1) as usize
    }
}

/// One sampled task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub grid_w: usize,
    pub grid_h: usize,
    pub n_agents: usize,
    pub n_prey: usize,
    pub n_obstacles: usize,
    pub attack_cap: u32,
    pub defense_cap: u32,
    pub sight_range: u32,
    pub horizon: usize,
}

/// Uniform task draw from the split's ranges. Capability combinations are
/// rejected and resampled unless they demand a coordinated pair: no single
/// agent may capture alone (C_a < C_p) and two agents must always suffice
/// (2 * C_a >= C_p). This keeps every task winnable while making captures
/// require simultaneous cooperation, so an uncoordinated policy almost
/// never wins by accident.
pub fn sample_task<R: Rng>(
    split: Split,
    cfg: &ScenarioConfig,
    rng: &mut R,
) -> Result<TaskSpec> {
    cfg.validate()?;
    let unseen_cap = matches!(split, Split::UnseenCapability | Split::UnseenBoth);
    let unseen_scale = matches!(split, Split::UnseenScale | Split::UnseenBoth);
    for _ in 0..10_000 {
        let (n_agents, n_prey) = if unseen_scale {
            (
                cfg.n_agents.sample_unseen(rng) as usize,
                cfg.n_prey.sample_unseen(rng) as usize,
            )
        } else {
            (
                cfg.n_agents.sample_train(rng) as usize,
                cfg.n_prey.sample_train(rng) as usize,
            )
        };
        let (attack, defense) = if unseen_cap {
            (
                cfg.attack_cap.sample_unseen(rng),
                cfg.defense_cap.sample_unseen(rng),
            )
        } else {
            (
                cfg.attack_cap.sample_train(rng),
                cfg.defense_cap.sample_train(rng),
            )
        };
        let n_obstacles = cfg.n_obstacles.sample_train(rng) as usize;
        if attack >= defense || 2 * attack < defense {
            continue;
        }
        return Ok(TaskSpec {
            grid_w: cfg.grid_w,
            grid_h: cfg.grid_h,
            n_agents,
            n_prey,
            n_obstacles,
            attack_cap: attack,
            defense_cap: defense,
            sight_range: cfg.sight_range,
            horizon: cfg.horizon,
        });
    }
    Err(OptError::Config(
        "no feasible task in 10000 draws; check capability ranges".into(),
    ))
}

/// Capture succeeds iff the adjacent capturing agents' total attack
/// capability reaches the prey's defense capability.
pub fn capture_rule(attacker_caps: &[u32], prey_defense: u32) -> bool {
    attacker_caps.iter().map(|&c| c as u64).sum::<u64>() >= prey_defense as u64
}

/// Full environment state. Entity order: agents, then prey, then obstacles.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub task: TaskSpec,
    pub positions: Vec<(i32, i32)>,
    pub prey_alive: Vec<bool>,
    pub step: usize,
    pub done: bool,
}

impl WorldState {
    pub fn n_entities(&self) -> usize {
        self.task.n_agents + self.task.n_prey + self.task.n_obstacles
    }

    fn prey_pos(&self, p: usize) -> (i32, i32) {
        self.positions[self.task.n_agents + p]
    }

    pub fn live_prey(&self) -> usize {
        self.prey_alive.iter().filter(|&&a| a).count()
    }

    fn occupied(&self, cell: (i32, i32)) -> bool {
        for (i, &pos) in self.positions.iter().enumerate() {
            let is_prey =
                i >= self.task.n_agents && i < self.task.n_agents + self.task.n_prey;
            if is_prey && !self.prey_alive[i - self.task.n_agents] {
                continue;
            }
            if pos == cell {
                return true;
            }
        }
        false
    }
}

#[derive(Debug, Clone)]
pub struct Observation {
    /// (max_entities, ENTITY_FEATURES); rows of invisible or padded entities
    /// are zero.
    pub features: Array2<f64>,
    /// True for visible live entities, false for invisible/dead/padding.
    pub entity_mask: Vec<bool>,
    pub available_actions: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub observations: Vec<Observation>,
    pub reward: f64,
    pub done: bool,
    pub captures: usize,
    pub win: bool,
}

fn chebyshev(a: (i32, i32), b: (i32, i32)) -> u32 {
    ((a.0 - b.0).abs().max((a.1 - b.1).abs())) as u32
}

/// Places all entities uniformly on distinct cells.
pub fn reset<R: Rng>(
    task: &TaskSpec,
    max_entities: usize,
    rng: &mut R,
) -> Result<(WorldState, Vec<Observation>)> {
    let n = task.n_agents + task.n_prey + task.n_obstacles;
    let cells = task.grid_w * task.grid_h;
    if n > cells {
        return Err(OptError::Config("cannot place entities on the grid".into()));
    }
    // partial Fisher-Yates over all cells
    let mut all: Vec<(i32, i32)> = (0..cells)
        .map(|i| ((i % task.grid_w) as i32, (i / task.grid_w) as i32))
        .collect();
    for i in 0..n {
        let j = rng.gen_range(i..cells);
        all.swap(i, j);
    }
    let state = WorldState {
        task: *task,
        positions: all[..n].to_vec(),
        prey_alive: vec![true; task.n_prey],
        step: 0,
        done: false,
    };
    let obs = observe_all(&state, max_entities);
    Ok((state, obs))
}

pub fn observe_all(state: &WorldState, max_entities: usize) -> Vec<Observation> {
    (0..state.task.n_agents)
        .map(|a| observe(state, a, max_entities))
        .collect()
}

/// Partial observation of one agent: entities within the sight range
/// (Chebyshev), self always included, features relative to the observer.
pub fn observe(state: &WorldState, agent: usize, max_entities: usize) -> Observation {
    let t = &state.task;
    let me = state.positions[agent];
    let sight = t.sight_range as f64;
    let mut features = Array2::zeros((max_entities, ENTITY_FEATURES));
    let mut mask = vec![false; max_entities];
    let mut prey_adjacent = false;
    for e in 0..state.n_entities() {
        let is_agent = e < t.n_agents;
        let prey_idx = if !is_agent && e < t.n_agents + t.n_prey {
            Some(e - t.n_agents)
        } else {
            None
        };
        if let Some(p) = prey_idx {
            if !state.prey_alive[p] {
                continue;
            }
        }
        let pos = state.positions[e];
        let dist = chebyshev(me, pos);
        let visible = e == agent || dist <= t.sight_range;
        if !visible {
            continue;
        }
        mask[e] = true;
        let cap = if is_agent {
            t.attack_cap as f64
        } else if prey_idx.is_some() {
            t.defense_cap as f64
        } else {
            0.0
        };
        if prey_idx.is_some() && dist <= 1 {
            prey_adjacent = true;
        }
        let mut row = features.row_mut(e);
        row[0] = (pos.0 - me.0) as f64 / sight;
        row[1] = (pos.1 - me.1) as f64 / sight;
        row[2] = is_agent as i32 as f64;
        row[3] = prey_idx.is_some() as i32 as f64;
        row[4] = (!is_agent && prey_idx.is_none()) as i32 as f64;
        row[5] = cap;
        row[6] = (e == agent) as i32 as f64;
        row[7] = 1.0;
    }
    let mut available = vec![true; N_ACTIONS];
    available[ACT_CAPTURE] = prey_adjacent;
    Observation {
        features,
        entity_mask: mask,
        available_actions: available,
    }
}

/// Fully-observed global state in the same feature layout; coordinates are
/// grid-normalized and the self flag is unused.
pub fn global_state(state: &WorldState, max_entities: usize) -> (Array2<f64>, Vec<bool>) {
    let t = &state.task;
    let mut features = Array2::zeros((max_entities, ENTITY_FEATURES));
    let mut mask = vec![false; max_entities];
    let norm = t.grid_w.max(t.grid_h) as f64;
    for e in 0..state.n_entities() {
        let is_agent = e < t.n_agents;
        let prey_idx = if !is_agent && e < t.n_agents + t.n_prey {
            Some(e - t.n_agents)
        } else {
            None
        };
        if let Some(p) = prey_idx {
            if !state.prey_alive[p] {
                continue;
            }
        }
        mask[e] = true;
        let pos = state.positions[e];
        let cap = if is_agent {
            t.attack_cap as f64
        } else if prey_idx.is_some() {
            t.defense_cap as f64
        } else {
            0.0
        };
        let mut row = features.row_mut(e);
        row[0] = (pos.0 as f64 - (t.grid_w as f64 - 1.0) / 2.0) / norm;
        row[1] = (pos.1 as f64 - (t.grid_h as f64 - 1.0) / 2.0) / norm;
        row[2] = is_agent as i32 as f64;
        row[3] = prey_idx.is_some() as i32 as f64;
        row[4] = (!is_agent && prey_idx.is_none()) as i32 as f64;
        row[5] = cap;
        row[6] = 0.0;
        row[7] = 1.0;
    }
    (features, mask)
}

fn move_delta(action: usize) -> (i32, i32) {
    match action {
        ACT_UP => (0, -1),
        ACT_DOWN => (0, 1),
        ACT_LEFT => (-1, 0),
        ACT_RIGHT => (1, 0),
        _ => (0, 0),
    }
}

/// Advances one step: agents move (blocked moves become stop, conflicts
/// resolve by agent index), captures resolve, surviving prey move uniformly
/// at random, reward and termination are computed.
pub fn step<R: Rng>(
    state: &mut WorldState,
    actions: &[usize],
    rewards: &ScenarioConfig,
    max_entities: usize,
    rng: &mut R,
) -> Result<StepResult> {
    if state.done {
        return Err(OptError::InvalidState("step on a finished episode".into()));
    }
    let t = state.task;
    if actions.len() != t.n_agents {
        return Err(OptError::InvalidInput("one action per agent required".into()));
    }
    // agent movement in index order
    for (a, &action) in actions.iter().enumerate() {
        let delta = move_delta(action);
        if delta == (0, 0) {
            continue;
        }
        let cur = state.positions[a];
        let target = (cur.0 + delta.0, cur.1 + delta.1);
        let in_bounds = target.0 >= 0
            && target.1 >= 0
            && target.0 < t.grid_w as i32
            && target.1 < t.grid_h as i32;
        if in_bounds && !state.occupied(target) {
            state.positions[a] = target;
        }
    }
    // capture resolution on every live prey
    let mut captures = 0usize;
    for p in 0..t.n_prey {
        if !state.prey_alive[p] {
            continue;
        }
        let prey_pos = state.prey_pos(p);
        let caps: Vec<u32> = (0..t.n_agents)
            .filter(|&a| {
                actions[a] == ACT_CAPTURE && chebyshev(state.positions[a], prey_pos) <= 1
            })
            .map(|_| t.attack_cap)
            .collect();
        if capture_rule(&caps, t.defense_cap) {
            state.prey_alive[p] = false;
            captures += 1;
        }
    }
    // surviving prey move uniformly to a free adjacent cell or stay
    for p in 0..t.n_prey {
        if !state.prey_alive[p] {
            continue;
        }
        let cur = state.prey_pos(p);
        let mut choices = vec![cur];
        for delta in [(0, -1), (0, 1), (-1, 0), (1, 0)] {
            let target = (cur.0 + delta.0, cur.1 + delta.1);
            let in_bounds = target.0 >= 0
                && target.1 >= 0
                && target.0 < t.grid_w as i32
                && target.1 < t.grid_h as i32;
            if in_bounds && !state.occupied(target) {
                choices.push(target);
            }
        }
        state.positions[t.n_agents + p] = choices[rng.gen_range(0..choices.len())];
    }
    state.step += 1;
    let win = state.live_prey() == 0;
    let done = win || state.step >= t.horizon;
    state.done = done;
    let reward = captures as f64 * rewards.capture_reward
        + if win { rewards.win_reward } else { 0.0 }
        - rewards.step_penalty;
    let observations = observe_all(state, max_entities);
    Ok(StepResult {
        observations,
        reward,
        done,
        captures,
        win,
    })
}
