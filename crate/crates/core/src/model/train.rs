//! Batch assembly, losses and the optimizer loop for both model families.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ActionSpace, FlatBatch, FlatModel, HighBatch, IdtModel, LowBatch, ReviewBatch};
use crate::data::{DatasetFile, Trajectory};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sequence::{high_level_steps, sort_ascending, ChainOfExperience};
use crate::tensor::optim::{adam_step_store, clip_store_grads, warmup_lr, AdamConfig, AdamState};
use crate::tensor::{Graph, ParamStore, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub grad_clip: f64,
    pub weight_decay: f64,
    pub max_iters: u64,
    #[serde(default = "one")]
    pub log_every: u64,
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub seed: u64,
    /// Low-level windows per chain that receive an action loss; all when
    /// unset.
    #[serde(default)]
    pub low_windows_per_chain: Option<usize>,
}

fn one() -> u64 {
    1
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            lr: 1e-4,
            warmup_steps: 100_000,
            grad_clip: 0.25,
            weight_decay: 1e-4,
            max_iters: 100_000,
            log_every: 1,
            checkpoint_every: 0,
            seed: 0,
            low_windows_per_chain: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::InvalidConfig("batch_size and log_every must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.grad_clip > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("lr and grad_clip must be positive, weight_decay non-negative".into()));
        }
        if self.low_windows_per_chain == Some(0) {
            return Err(Error::InvalidConfig("low_windows_per_chain must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, weight_decay: self.weight_decay, ..AdamConfig::default() }
    }
}

/// Learning histories grouped by task, in collection order.
#[derive(Clone, Debug)]
pub struct Histories<'a> {
    pub tasks: Vec<(usize, Vec<&'a Trajectory>)>,
}

impl<'a> Histories<'a> {
    pub fn new(records: &'a [Trajectory]) -> Result<Self> {
        let mut by_task: BTreeMap<usize, Vec<&'a Trajectory>> = BTreeMap::new();
        for r in records {
            if r.is_empty() {
                log::warn!("skipping empty episode of task {}", r.task_id);
                continue;
            }
            by_task.entry(r.task_id).or_default().push(r);
        }
        if by_task.is_empty() {
            return Err(Error::InvalidDataset("no episodes to train on".into()));
        }
        Ok(Self { tasks: by_task.into_iter().collect() })
    }

    pub fn from_dataset(file: &'a DatasetFile) -> Result<Self> {
        Self::new(&file.records)
    }

    /// `n` distinct episodes of one uniformly drawn task, sorted ascending.
    pub fn sample_chain<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<ChainOfExperience<'a>> {
        let (task_id, eps) = &self.tasks[rng.random_range(0..self.tasks.len())];
        if eps.len() < n {
            return Err(Error::InvalidDataset(format!("task {task_id} has {} episodes, context needs {n}", eps.len())));
        }
        let picked: Vec<&Trajectory> = index::sample(rng, eps.len(), n).iter().map(|i| eps[i]).collect();
        sort_ascending(&picked)
    }
}

/// Ground-truth actions for a set of predictions.
#[derive(Clone, Debug, PartialEq)]
pub enum ActionLabels<T> {
    Discrete(Vec<usize>),
    Continuous(Vec<T>),
}

/// Mean cross-entropy (discrete) or mean squared error (continuous) over
/// every predicted position.
pub fn compute_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, labels: &ActionLabels<T>) -> Result<Var> {
    match labels {
        ActionLabels::Discrete(l) => g.cross_entropy(pred, l),
        ActionLabels::Continuous(t) => g.mse(pred, t),
    }
}

/// Which decisions condition the low-level decoder during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DecisionSource {
    /// Reparameterized samples from the high-level decoder.
    #[default]
    Sampled,
    /// The reviewed decisions themselves.
    Reviewed,
}

#[derive(Clone, Copy, Debug)]
struct WindowRef<'a> {
    traj: &'a Trajectory,
    start: usize,
    len: usize,
}

fn chain_windows<'a>(chain: &ChainOfExperience<'a>, c: usize) -> Vec<WindowRef<'a>> {
    let mut out = Vec::new();
    for traj in &chain.episodes {
        let mut start = 0;
        while start < traj.len() {
            let len = c.min(traj.len() - start);
            out.push(WindowRef { traj, start, len });
            start += len;
        }
    }
    out
}

/// Indices grouped by window length, longest first.
fn group_by_len(windows: &[WindowRef<'_>], selected: &[usize]) -> Vec<(usize, Vec<usize>)> {
    let mut groups: BTreeMap<std::cmp::Reverse<usize>, Vec<usize>> = BTreeMap::new();
    for &w in selected {
        groups.entry(std::cmp::Reverse(windows[w].len)).or_default().push(w);
    }
    groups.into_iter().map(|(k, v)| (k.0, v)).collect()
}

fn check_discrete<T: Scalar>(actions: ActionSpace) -> Result<usize> {
    match actions {
        ActionSpace::Discrete { n } => Ok(n),
        ActionSpace::Continuous { .. } => Err(Error::InvalidConfig("grid histories need a discrete action space".into())),
    }
}

/// End-to-end action loss of the three IDT modules on a batch of chains.
///
/// Every window is reviewed to fill the high-level z slots; the high-level
/// decoder's decision for each window then conditions the low-level decoder.
/// `selected[b]` restricts which windows of chain `b` contribute to the loss.
pub fn idt_loss<T: Scalar>(
    model: &IdtModel<T>,
    g: &mut Graph<T>,
    chains: &[ChainOfExperience<'_>],
    selected: Option<&[Vec<usize>]>,
    source: DecisionSource,
) -> Result<Var> {
    let cfg = &model.config;
    let n_actions = check_discrete::<T>(cfg.actions)?;
    let c = cfg.c;
    if chains.is_empty() {
        return Err(Error::MalformedSequence("empty batch".into()));
    }
    let per_chain: Vec<Vec<WindowRef<'_>>> = chains.iter().map(|ch| chain_windows(ch, c)).collect();
    let steps = per_chain[0].len();
    if per_chain.iter().any(|w| w.len() != steps) {
        return Err(Error::MalformedSequence("chains in one batch must share their decision count".into()));
    }
    let windows: Vec<WindowRef<'_>> = per_chain.into_iter().flatten().collect();

    let all: Vec<usize> = (0..windows.len()).collect();
    let mut reviewed = Vec::new();
    let mut order = Vec::with_capacity(windows.len());
    for (len, members) in group_by_len(&windows, &all) {
        let mut b = ReviewBatch { windows: members.len(), len, ..Default::default() };
        for &w in &members {
            let wr = windows[w];
            for t in wr.start..wr.start + len {
                cfg.obs.push_grid(&mut b.obs, wr.traj.observation(t));
                cfg.actions.push_discrete(&mut b.act, usize::from(wr.traj.actions[t]));
            }
        }
        reviewed.push(model.review(g, &b)?);
        order.extend(members);
    }
    let z_rev = reorder(g, &reviewed, &order)?;

    let mut hb = HighBatch { seqs: chains.len(), steps, ..Default::default() };
    for chain in chains {
        for (traj, rtg) in chain.episodes.iter().zip(&chain.rtg) {
            for hs in high_level_steps(traj, rtg, c) {
                hb.rtg.push(cfg.scaled(hs.rtg));
                cfg.obs.push_grid(&mut hb.obs, hs.obs);
                hb.reward_sum.push(cfg.scaled(hs.reward_sum));
                hb.done.push(if hs.done { T::one() } else { T::zero() });
            }
        }
    }
    let decisions = match source {
        DecisionSource::Sampled => {
            let (mu, ls) = model.make(g, &hb, z_rev)?;
            g.gaussian_sample(mu, ls, None)?.0
        }
        DecisionSource::Reviewed => z_rev,
    };

    let chosen: Vec<usize> = match selected {
        None => all,
        Some(sel) => sel.iter().enumerate().flat_map(|(b, ws)| ws.iter().map(move |&w| b * steps + w)).collect(),
    };
    let total: usize = chosen.iter().map(|&w| windows[w].len).sum();
    let mut loss: Option<Var> = None;
    for (len, members) in group_by_len(&windows, &chosen) {
        let mut lb = LowBatch { windows: members.len(), len, ..Default::default() };
        let mut labels = Vec::with_capacity(members.len() * len);
        for &w in &members {
            let wr = windows[w];
            for t in wr.start..wr.start + len {
                let a = usize::from(wr.traj.actions[t]);
                if a >= n_actions {
                    return Err(Error::ActionSpaceMismatch { model: n_actions, env: a + 1 });
                }
                cfg.obs.push_grid(&mut lb.obs, wr.traj.observation(t));
                cfg.actions.push_discrete(&mut lb.act, a);
                lb.rew.push(T::from_f64_lossy(f64::from(wr.traj.rewards[t])));
                labels.push(a);
            }
        }
        let z = g.gather_rows(decisions, &members)?;
        let logits = model.decide(g, &lb, z)?;
        let part = compute_loss(g, logits, &ActionLabels::Discrete(labels))?;
        let weighted = g.scale(part, T::from_f64_lossy((members.len() * len) as f64 / total as f64));
        loss = Some(match loss {
            None => weighted,
            Some(acc) => g.add(acc, weighted)?,
        });
    }
    loss.ok_or_else(|| Error::MalformedSequence("no windows selected".into()))
}

/// Rows of `parts` (stacked in order) rearranged so that row `order[i]`
/// of the result is the `i`-th stacked row.
fn reorder<T: Scalar>(g: &mut Graph<T>, parts: &[Var], order: &[usize]) -> Result<Var> {
    let stacked = if parts.len() == 1 { parts[0] } else { g.concat_rows(parts)? };
    if order.iter().enumerate().all(|(i, &w)| i == w) {
        return Ok(stacked);
    }
    let mut inverse = vec![0; order.len()];
    for (i, &w) in order.iter().enumerate() {
        inverse[w] = i;
    }
    g.gather_rows(stacked, &inverse)
}

/// Flat batch over whole chains plus its action labels.
pub fn flat_batch<T: Scalar>(model: &FlatModel<T>, chains: &[ChainOfExperience<'_>]) -> Result<(FlatBatch<T>, Vec<usize>)> {
    let cfg = &model.config;
    check_discrete::<T>(cfg.actions)?;
    let steps: usize = chains.first().map(|c| c.episodes.iter().map(|e| e.len()).sum()).unwrap_or(0);
    let mut b = FlatBatch { seqs: chains.len(), steps, ..Default::default() };
    let mut labels = Vec::new();
    for chain in chains {
        let len: usize = chain.episodes.iter().map(|e| e.len()).sum();
        if len != steps {
            return Err(Error::MalformedSequence("chains in one batch must share their length".into()));
        }
        for (traj, rtg) in chain.episodes.iter().zip(&chain.rtg) {
            for t in 0..traj.len() {
                let a = usize::from(traj.actions[t]);
                b.rtg.push(cfg.scaled(rtg[t]));
                cfg.obs.push_grid(&mut b.obs, traj.observation(t));
                cfg.actions.push_discrete(&mut b.act, a);
                b.rew.push(T::from_f64_lossy(f64::from(traj.rewards[t])));
                b.done.push(if traj.dones[t] { T::one() } else { T::zero() });
                labels.push(a);
            }
        }
    }
    Ok((b, labels))
}

pub fn flat_loss<T: Scalar>(model: &FlatModel<T>, g: &mut Graph<T>, chains: &[ChainOfExperience<'_>]) -> Result<Var> {
    let (batch, labels) = flat_batch(model, chains)?;
    let logits = model.predict(g, &batch)?;
    compute_loss(g, logits, &ActionLabels::Discrete(labels))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// Optimizer state plus the step counter. Step `s` draws its batch from an
/// RNG seeded by `(seed, s)`, so a resumed run continues the same stream.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub adam: AdamState<T>,
    pub step: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig, store: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::for_store(config.adam(), store);
        Ok(Self { config, adam, step: 0 })
    }

    /// Learning rate of the next update.
    pub fn lr(&self) -> f64 {
        warmup_lr(self.config.lr, self.step + 1, self.config.warmup_steps)
    }

    fn step_rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.config.seed ^ (self.step + 1).wrapping_mul(0xD134_2543_DE82_EF95))
    }

    fn apply(&mut self, store: &mut ParamStore<T>, g: &mut Graph<T>, loss: Var) -> Result<TrainMetrics> {
        let value = g.value(loss).item().to_f64_lossy();
        if !value.is_finite() {
            return Err(Error::NonFinite);
        }
        let grads = g.backward(loss)?;
        store.zero_grads();
        store.accumulate_grads(&grads);
        let grad_norm = clip_store_grads(store, self.config.grad_clip);
        let lr = self.lr();
        adam_step_store(store, &mut self.adam, lr)?;
        self.step += 1;
        Ok(TrainMetrics { step: self.step, loss: value, grad_norm, lr })
    }

    /// One IDT update on `batch_size` freshly sampled chains.
    pub fn idt_step(&mut self, model: &mut IdtModel<T>, data: &Histories<'_>) -> Result<TrainMetrics> {
        let mut rng = self.step_rng();
        let chains = (0..self.config.batch_size)
            .map(|_| data.sample_chain(model.config.n, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let steps = model.config.n * model.config.segments();
        let selected: Option<Vec<Vec<usize>>> = self.config.low_windows_per_chain.filter(|&k| k < steps).map(|k| {
            chains
                .iter()
                .map(|_| {
                    let mut v = index::sample(&mut rng, steps, k).into_vec();
                    v.sort_unstable();
                    v
                })
                .collect()
        });
        let mut g = Graph::new(true, rng.random());
        let loss = idt_loss(model, &mut g, &chains, selected.as_deref(), DecisionSource::Sampled)?;
        self.apply(&mut model.store, &mut g, loss)
    }

    /// One flat-baseline update.
    pub fn flat_step(&mut self, model: &mut FlatModel<T>, data: &Histories<'_>) -> Result<TrainMetrics> {
        let mut rng = self.step_rng();
        let chains = (0..self.config.batch_size)
            .map(|_| data.sample_chain(model.config.n, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let mut g = Graph::new(true, rng.random());
        let loss = flat_loss(model, &mut g, &chains)?;
        self.apply(&mut model.store, &mut g, loss)
    }
}
