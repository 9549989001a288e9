//! Offline learning histories from a tabular Q-learner, plus the `IDT1`
//! dataset container.

mod format;

pub use format::{read_dataset, write_dataset, DatasetFile, DatasetHeader, FORMAT_VERSION, MAGIC};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{self, GridTask, N_ACTIONS};
use crate::error::{Error, Result};

/// One recorded episode. `observations[t]` is seen before `actions[t]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub task_id: usize,
    pub observations: Vec<[u16; 2]>,
    pub actions: Vec<u16>,
    pub rewards: Vec<f32>,
    pub dones: Vec<bool>,
    pub total_return: f32,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Checks array lengths, terminal flags and the cached return.
    pub fn validate(&self) -> Result<()> {
        let t = self.actions.len();
        if self.observations.len() != t || self.rewards.len() != t || self.dones.len() != t {
            return Err(Error::LengthMismatch(format!(
                "task {}: obs {}, actions {t}, rewards {}, dones {}",
                self.task_id,
                self.observations.len(),
                self.rewards.len(),
                self.dones.len()
            )));
        }
        if t == 0 {
            return Err(Error::InvalidDataset(format!("task {}: empty trajectory", self.task_id)));
        }
        if self.dones.iter().enumerate().any(|(i, &d)| d != (i + 1 == t)) {
            return Err(Error::InvalidDataset(format!("task {}: done flag not only at the end", self.task_id)));
        }
        let sum: f32 = self.rewards.iter().sum();
        if sum != self.total_return {
            return Err(Error::InvalidDataset(format!(
                "task {}: total_return {} but rewards sum to {sum}",
                self.task_id, self.total_return
            )));
        }
        Ok(())
    }

    pub fn observation(&self, t: usize) -> env::Pos {
        let [x, y] = self.observations[t];
        (usize::from(x), usize::from(y))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectorConfig {
    pub total_steps: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Fraction of `total_steps` over which epsilon decays linearly.
    pub eps_decay_frac: f64,
}

impl Default for CollectorConfig {
    fn default() -> Self {
        Self { total_steps: 40_000, alpha: 0.1, gamma: 0.99, eps_start: 1.0, eps_end: 0.05, eps_decay_frac: 0.5 }
    }
}

impl CollectorConfig {
    pub fn validate(&self, episode_len: usize) -> Result<()> {
        if self.total_steps < episode_len {
            return Err(Error::InvalidConfig(format!(
                "total_steps {} shorter than one episode ({episode_len})",
                self.total_steps
            )));
        }
        let unit = 0.0..=1.0;
        for (name, v) in [
            ("alpha", self.alpha),
            ("gamma", self.gamma),
            ("eps_start", self.eps_start),
            ("eps_end", self.eps_end),
            ("eps_decay_frac", self.eps_decay_frac),
        ] {
            if !unit.contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} = {v} not in [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn epsilon(&self, step: usize) -> f64 {
        let horizon = self.eps_decay_frac * self.total_steps as f64;
        if horizon <= 0.0 {
            return self.eps_end;
        }
        let frac = (step as f64 / horizon).min(1.0);
        self.eps_start + (self.eps_end - self.eps_start) * frac
    }
}

/// Action-value table over `(x, y, has_key)`.
#[derive(Clone, Debug)]
pub struct QTable {
    grid_size: usize,
    values: Vec<[f64; N_ACTIONS]>,
}

impl QTable {
    pub fn new(grid_size: usize) -> Self {
        Self { grid_size, values: vec![[0.0; N_ACTIONS]; 2 * grid_size * grid_size] }
    }

    pub fn state_index(&self, s: &env::EnvState) -> usize {
        let (x, y) = s.pos;
        x + y * self.grid_size + usize::from(s.has_key) * self.grid_size * self.grid_size
    }

    pub fn row(&self, s: usize) -> &[f64; N_ACTIONS] {
        &self.values[s]
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s][a]
    }

    /// `Q[s,a] += alpha * (r + gamma * max Q[s'] * (1 - done) - Q[s,a])`.
    #[allow(clippy::too_many_arguments)]
    pub fn update(&mut self, s: usize, a: usize, r: f64, s_next: usize, done: bool, alpha: f64, gamma: f64) {
        let bootstrap = if done { 0.0 } else { self.values[s_next].iter().copied().fold(f64::NEG_INFINITY, f64::max) };
        let q = &mut self.values[s][a];
        *q += alpha * (r + gamma * bootstrap - *q);
    }

    /// Greedy action with uniform tie-breaking.
    pub fn greedy<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        let row = &self.values[s];
        let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ties: Vec<usize> = (0..N_ACTIONS).filter(|&a| row[a] == best).collect();
        ties[rng.random_range(0..ties.len())]
    }
}

/// Runs epsilon-greedy Q-learning on one task and records every episode.
pub fn collect_learning_history(task: &GridTask, config: &CollectorConfig, seed: u64) -> Result<Vec<Trajectory>> {
    config.validate(task.episode_len)?;
    task.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = QTable::new(task.grid_size);
    let n_episodes = config.total_steps / task.episode_len;
    let mut out = Vec::with_capacity(n_episodes);
    let mut global_step = 0;
    for _ in 0..n_episodes {
        let (mut state, _) = env::reset(task);
        let t_len = task.episode_len;
        let mut traj = Trajectory {
            task_id: task.task_id,
            observations: Vec::with_capacity(t_len),
            actions: Vec::with_capacity(t_len),
            rewards: Vec::with_capacity(t_len),
            dones: Vec::with_capacity(t_len),
            total_return: 0.0,
        };
        loop {
            let s = q.state_index(&state);
            let action = if rng.random::<f64>() < config.epsilon(global_step) {
                rng.random_range(0..N_ACTIONS)
            } else {
                q.greedy(s, &mut rng)
            };
            let tr = env::step(&state, task, action)?;
            let s_next = q.state_index(&tr.state);
            q.update(s, action, tr.reward, s_next, tr.done, config.alpha, config.gamma);
            traj.observations.push([state.pos.0 as u16, state.pos.1 as u16]);
            traj.actions.push(action as u16);
            traj.rewards.push(tr.reward as f32);
            traj.dones.push(tr.done);
            state = tr.state;
            global_step += 1;
            if tr.done {
                break;
            }
        }
        traj.total_return = traj.rewards.iter().sum();
        out.push(traj);
    }
    Ok(out)
}

/// Episodes of the shortest-path policy with probability-`epsilon` random
/// actions; `epsilon = 0` gives expert demonstrations, `1` a random walk.
pub fn demonstrations(task: &GridTask, episodes: usize, epsilon: f64, seed: u64) -> Result<Vec<Trajectory>> {
    task.validate()?;
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::InvalidConfig(format!("epsilon {epsilon} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let (mut state, _) = env::reset(task);
        let mut actions = Vec::with_capacity(task.episode_len);
        loop {
            let a = if epsilon > 0.0 && rng.random::<f64>() < epsilon {
                rng.random_range(0..N_ACTIONS)
            } else {
                env::expert_action(task, &state)
            };
            let tr = env::step(&state, task, a)?;
            actions.push((state.pos, a, tr.reward, tr.done));
            state = tr.state;
            if tr.done {
                break;
            }
        }
        let traj = Trajectory {
            task_id: task.task_id,
            observations: actions.iter().map(|&(p, ..)| [p.0 as u16, p.1 as u16]).collect(),
            actions: actions.iter().map(|&(_, a, ..)| a as u16).collect(),
            rewards: actions.iter().map(|&(_, _, r, _)| r as f32).collect(),
            dones: actions.iter().map(|&(.., d)| d).collect(),
            total_return: actions.iter().map(|&(_, _, r, _)| r as f32).sum(),
        };
        out.push(traj);
    }
    Ok(out)
}

/// Per-task collector seed.
pub fn task_seed(seed: u64, task_id: usize) -> u64 {
    seed ^ (task_id as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Collects histories for every task, in task order.
pub fn collect_dataset(tasks: &[GridTask], config: &CollectorConfig, seed: u64) -> Result<DatasetFile> {
    let mut header = DatasetHeader::new(tasks, config.clone(), seed)?;
    let mut records = Vec::new();
    for task in tasks {
        records.extend(collect_learning_history(task, config, task_seed(seed, task.task_id))?);
    }
    header.n_records = records.len();
    Ok(DatasetFile { header, records })
}

/// Rewards obtained by replaying a trajectory's actions through the simulator.
pub fn replay_rewards(task: &GridTask, traj: &Trajectory) -> Result<Vec<f64>> {
    let actions: Vec<usize> = traj.actions.iter().map(|&a| usize::from(a)).collect();
    env::replay(task, &actions)
}
