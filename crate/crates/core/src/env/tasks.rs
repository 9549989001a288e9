use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EnvKind, GridTask, Pos, N_ACTIONS};
use crate::error::{Error, Result};

const N_PERMS: usize = 120;

/// The `index`-th permutation of `0..5` in lexicographic order.
fn nth_permutation(mut index: usize) -> [usize; N_ACTIONS] {
    let mut pool: Vec<usize> = (0..N_ACTIONS).collect();
    let mut out = [0; N_ACTIONS];
    let mut fact = N_PERMS;
    for (i, slot) in out.iter_mut().enumerate() {
        fact /= N_ACTIONS - i;
        *slot = pool.remove(index / fact);
        index %= fact;
    }
    out
}

fn corners(grid_size: usize) -> [Pos; 4] {
    let g = grid_size - 1;
    [(0, 0), (0, g), (g, 0), (g, g)]
}

/// Number of distinct tasks of `kind` on a square grid.
pub fn task_space_size(kind: EnvKind, grid_size: usize) -> usize {
    let cells = grid_size * grid_size;
    match kind {
        EnvKind::Darkroom | EnvKind::DarkroomHard => cells,
        EnvKind::DarkroomDynamic => 4 * N_PERMS,
        EnvKind::DarkKeyToDoor => cells * cells.saturating_sub(1),
    }
}

fn decode(kind: EnvKind, grid_size: usize, i: usize, task_id: usize) -> GridTask {
    let cell = |c: usize| (c % grid_size, c / grid_size);
    let mut task = GridTask {
        kind,
        grid_size,
        episode_len: kind.default_episode_len(grid_size),
        goal: (0, 0),
        key: None,
        door: None,
        action_perm: None,
        task_id,
    };
    match kind {
        EnvKind::Darkroom | EnvKind::DarkroomHard => task.goal = cell(i),
        EnvKind::DarkroomDynamic => {
            task.goal = corners(grid_size)[i / N_PERMS];
            task.action_perm = Some(nth_permutation(i % N_PERMS));
        }
        EnvKind::DarkKeyToDoor => {
            let cells = grid_size * grid_size;
            let key = i / (cells - 1);
            let j = i % (cells - 1);
            let door = if j < key { j } else { j + 1 };
            task.key = Some(cell(key));
            task.door = Some(cell(door));
            task.goal = cell(door);
        }
    }
    task
}

/// Draws `n_train + n_test` distinct tasks and splits them. Train ids are
/// `0..n_train`, test ids follow.
pub fn sample_tasks(kind: EnvKind, grid_size: usize, n_train: usize, n_test: usize, seed: u64) -> Result<(Vec<GridTask>, Vec<GridTask>)> {
    if grid_size < 2 {
        return Err(Error::InvalidConfig(format!("grid_size {grid_size} too small")));
    }
    let available = task_space_size(kind, grid_size);
    let requested = n_train + n_test;
    if requested > available {
        return Err(Error::InsufficientTasks { requested, available });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = index::sample(&mut rng, available, requested);
    let mut all: Vec<GridTask> = picks.iter().enumerate().map(|(id, i)| decode(kind, grid_size, i, id)).collect();
    let test = all.split_off(n_train);
    Ok((all, test))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub task_id: usize,
    pub goal: Pos,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<Pos>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub door: Option<Pos>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action_perm: Option<[usize; N_ACTIONS]>,
}

/// On-disk task list sharing one kind, grid and horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSet {
    pub kind: EnvKind,
    pub grid_size: usize,
    pub episode_len: usize,
    pub tasks: Vec<TaskEntry>,
}

impl TaskSet {
    pub fn from_tasks(tasks: &[GridTask]) -> Result<Self> {
        let first = tasks.first().ok_or_else(|| Error::InvalidTask("empty task set".into()))?;
        if let Some(t) = tasks
            .iter()
            .find(|t| (t.kind, t.grid_size, t.episode_len) != (first.kind, first.grid_size, first.episode_len))
        {
            return Err(Error::InvalidTask(format!("task {} differs in kind, grid or horizon", t.task_id)));
        }
        Ok(Self {
            kind: first.kind,
            grid_size: first.grid_size,
            episode_len: first.episode_len,
            tasks: tasks
                .iter()
                .map(|t| TaskEntry { task_id: t.task_id, goal: t.goal, key: t.key, door: t.door, action_perm: t.action_perm })
                .collect(),
        })
    }

    /// Expands and validates every entry.
    pub fn to_tasks(&self) -> Result<Vec<GridTask>> {
        self.tasks
            .iter()
            .map(|e| {
                let t = GridTask {
                    kind: self.kind,
                    grid_size: self.grid_size,
                    episode_len: self.episode_len,
                    goal: e.goal,
                    key: e.key,
                    door: e.door,
                    action_perm: e.action_perm,
                    task_id: e.task_id,
                };
                t.validate()?;
                Ok(t)
            })
            .collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let set: Self = serde_json::from_str(&text)?;
        set.to_tasks()?;
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
