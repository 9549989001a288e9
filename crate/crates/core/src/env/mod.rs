//! Darkroom family of partially observable grid worlds.
//!
//! The agent only ever observes its own `(x, y)`; goals, keys and doors are
//! invisible and must be inferred from rewards.

mod tasks;

pub use tasks::{sample_tasks, task_space_size, TaskEntry, TaskSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid coordinate `(x, y)`.
pub type Pos = (usize, usize);

pub const N_ACTIONS: usize = 5;

/// Movement semantics of the raw action ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Move {
    Left = 0,
    Right = 1,
    Up = 2,
    Down = 3,
    Idle = 4,
}

impl Move {
    pub fn from_index(a: usize) -> Option<Self> {
        Some(match a {
            0 => Move::Left,
            1 => Move::Right,
            2 => Move::Up,
            3 => Move::Down,
            4 => Move::Idle,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Darkroom,
    DarkroomHard,
    DarkroomDynamic,
    DarkKeyToDoor,
}

impl EnvKind {
    pub const ALL: [EnvKind; 4] = [EnvKind::Darkroom, EnvKind::DarkroomHard, EnvKind::DarkroomDynamic, EnvKind::DarkKeyToDoor];

    /// 20 steps (50 for key-to-door) on 9x9; ten times that on 40x40.
    pub fn default_episode_len(self, grid_size: usize) -> usize {
        let base = match self {
            EnvKind::DarkKeyToDoor => 50,
            _ => 20,
        };
        if grid_size >= 40 {
            base * 10
        } else {
            base
        }
    }

    /// Test-time target return.
    pub fn default_target_return(self, grid_size: usize) -> f64 {
        let large = grid_size >= 40;
        match self {
            EnvKind::Darkroom | EnvKind::DarkroomDynamic => {
                if large {
                    15.0
                } else {
                    20.0
                }
            }
            EnvKind::DarkroomHard => 1.0,
            EnvKind::DarkKeyToDoor => 2.0,
        }
    }

    /// Episodes per across-episodic context.
    pub fn default_context_episodes(self) -> usize {
        match self {
            EnvKind::DarkKeyToDoor => 4,
            _ => 10,
        }
    }

    /// Steps controlled by one high-level decision.
    pub fn default_decision_interval(grid_size: usize) -> usize {
        if grid_size >= 40 {
            10
        } else {
            5
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        serde_json::from_value(serde_json::Value::String(name.to_string())).ok()
    }

    pub fn name(self) -> &'static str {
        match self {
            EnvKind::Darkroom => "darkroom",
            EnvKind::DarkroomHard => "darkroom_hard",
            EnvKind::DarkroomDynamic => "darkroom_dynamic",
            EnvKind::DarkKeyToDoor => "dark_key_to_door",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridTask {
    pub kind: EnvKind,
    pub grid_size: usize,
    pub episode_len: usize,
    pub goal: Pos,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<Pos>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub door: Option<Pos>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action_perm: Option<[usize; N_ACTIONS]>,
    pub task_id: usize,
}

impl GridTask {
    pub fn darkroom(grid_size: usize, goal: Pos, task_id: usize) -> Self {
        Self {
            kind: EnvKind::Darkroom,
            grid_size,
            episode_len: EnvKind::Darkroom.default_episode_len(grid_size),
            goal,
            key: None,
            door: None,
            action_perm: None,
            task_id,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let inside = |p: Pos| p.0 < self.grid_size && p.1 < self.grid_size;
        let bad = |msg: String| Err(Error::InvalidTask(format!("task {}: {msg}", self.task_id)));
        if self.grid_size == 0 || self.episode_len == 0 {
            return bad("empty grid or episode".into());
        }
        if !inside(self.goal) {
            return bad(format!("goal {:?} outside {}x{}", self.goal, self.grid_size, self.grid_size));
        }
        match self.kind {
            EnvKind::DarkroomDynamic => {
                let g = self.grid_size - 1;
                if ![(0, 0), (0, g), (g, 0), (g, g)].contains(&self.goal) {
                    return bad("dynamic goal must be a corner".into());
                }
                let Some(perm) = self.action_perm else {
                    return bad("dynamic task without action permutation".into());
                };
                let mut seen = [false; N_ACTIONS];
                for &a in &perm {
                    if a >= N_ACTIONS || seen[a] {
                        return bad(format!("{perm:?} is not a permutation"));
                    }
                    seen[a] = true;
                }
            }
            EnvKind::DarkKeyToDoor => {
                let (Some(k), Some(d)) = (self.key, self.door) else {
                    return bad("key-to-door task needs key and door".into());
                };
                if !inside(k) || !inside(d) {
                    return bad("key or door outside grid".into());
                }
                if k == d {
                    return bad("key and door coincide".into());
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Agent spawn cell: the grid center.
    pub fn spawn(&self) -> Pos {
        (self.grid_size / 2, self.grid_size / 2)
    }

    /// Best achievable episode return.
    ///
    /// Darkroom pays every step spent on the goal, counted from the arrival
    /// step, so a goal `d > 0` moves away yields `episode_len - d + 1`.
    pub fn oracle_return(&self) -> f64 {
        let l1 = |a: Pos, b: Pos| a.0.abs_diff(b.0) + a.1.abs_diff(b.1);
        let t = self.episode_len;
        let spawn = self.spawn();
        match self.kind {
            EnvKind::Darkroom | EnvKind::DarkroomDynamic => {
                let d = l1(spawn, self.goal);
                if d == 0 {
                    t as f64
                } else if d <= t {
                    (t - d + 1) as f64
                } else {
                    0.0
                }
            }
            EnvKind::DarkroomHard => f64::from(u8::from(l1(spawn, self.goal) <= t)),
            EnvKind::DarkKeyToDoor => {
                let (k, d) = (self.key.unwrap_or(spawn), self.door.unwrap_or(spawn));
                let to_key = l1(spawn, k).max(1);
                let total = to_key + l1(k, d);
                f64::from(u8::from(to_key <= t)) + f64::from(u8::from(total <= t))
            }
        }
    }
}

/// Mutable part of an episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EnvState {
    pub pos: Pos,
    pub t: usize,
    pub has_key: bool,
    /// Goal (or door, for key-to-door) already rewarded this episode.
    pub goal_hit: bool,
}

impl EnvState {
    pub fn observation(&self) -> Pos {
        self.pos
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub state: EnvState,
    pub observation: Pos,
    pub reward: f64,
    pub done: bool,
}

/// Start of an episode: spawn at the center with all flags cleared.
pub fn reset(task: &GridTask) -> (EnvState, Pos) {
    let s = EnvState { pos: task.spawn(), t: 0, has_key: false, goal_hit: false };
    (s, s.pos)
}

/// Advances one step. Off-grid moves leave the position unchanged.
pub fn step(state: &EnvState, task: &GridTask, action: usize) -> Result<Transition> {
    if action >= N_ACTIONS {
        return Err(Error::InvalidAction { action, n_actions: N_ACTIONS });
    }
    if state.t >= task.episode_len {
        return Err(Error::EpisodeDone);
    }
    let effective = match (task.kind, task.action_perm) {
        (EnvKind::DarkroomDynamic, Some(perm)) => perm[action],
        _ => action,
    };
    let (x, y) = state.pos;
    let max = task.grid_size - 1;
    let pos = match Move::from_index(effective).expect("permutation stays in range") {
        Move::Left => (x.saturating_sub(1), y),
        Move::Right => ((x + 1).min(max), y),
        Move::Up => (x, (y + 1).min(max)),
        Move::Down => (x, y.saturating_sub(1)),
        Move::Idle => (x, y),
    };
    let mut next = EnvState { pos, t: state.t + 1, ..*state };
    let mut reward = 0.0;
    match task.kind {
        EnvKind::Darkroom | EnvKind::DarkroomDynamic => {
            if pos == task.goal {
                reward = 1.0;
            }
        }
        EnvKind::DarkroomHard => {
            if pos == task.goal && !state.goal_hit {
                reward = 1.0;
                next.goal_hit = true;
            }
        }
        EnvKind::DarkKeyToDoor => {
            if !state.has_key && Some(pos) == task.key {
                reward = 1.0;
                next.has_key = true;
            } else if state.has_key && !state.goal_hit && Some(pos) == task.door {
                reward = 1.0;
                next.goal_hit = true;
            }
        }
    }
    Ok(Transition { state: next, observation: pos, reward, done: next.t == task.episode_len })
}

/// Shortest-path policy: heads for the current target (key, then door, or
/// the goal) along x first, then y, and idles once there.
pub fn expert_action(task: &GridTask, state: &EnvState) -> usize {
    let target = match task.kind {
        EnvKind::DarkKeyToDoor if !state.has_key => task.key.unwrap_or(task.goal),
        EnvKind::DarkKeyToDoor => task.door.unwrap_or(task.goal),
        _ => task.goal,
    };
    let (x, y) = state.pos;
    let mv = if x > target.0 {
        Move::Left
    } else if x < target.0 {
        Move::Right
    } else if y < target.1 {
        Move::Up
    } else if y > target.1 {
        Move::Down
    } else {
        Move::Idle
    };
    let effective = mv as usize;
    match (task.kind, task.action_perm) {
        (EnvKind::DarkroomDynamic, Some(perm)) => perm.iter().position(|&p| p == effective).unwrap_or(effective),
        _ => effective,
    }
}

/// Convenience wrapper owning a task and its current state.
#[derive(Clone, Debug)]
pub struct GridEnv {
    pub task: GridTask,
    pub state: EnvState,
}

impl GridEnv {
    pub fn new(task: GridTask) -> Self {
        let (state, _) = reset(&task);
        Self { task, state }
    }

    pub fn reset(&mut self) -> Pos {
        let (state, obs) = reset(&self.task);
        self.state = state;
        obs
    }

    pub fn step(&mut self, action: usize) -> Result<Transition> {
        let tr = step(&self.state, &self.task, action)?;
        self.state = tr.state;
        Ok(tr)
    }
}

/// Replays an action list from reset and returns the rewards.
pub fn replay(task: &GridTask, actions: &[usize]) -> Result<Vec<f64>> {
    let (mut s, _) = reset(task);
    actions
        .iter()
        .map(|&a| {
            let tr = step(&s, task, a)?;
            s = tr.state;
            Ok(tr.reward)
        })
        .collect()
}
