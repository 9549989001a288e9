use std::collections::VecDeque;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::report::EvalReport;
use super::tokens::Method;
use crate::data::Trajectory;
use crate::env::{EnvState, GridEnv, GridTask, Pos, N_ACTIONS};
use crate::error::{Error, Result};
use crate::model::{ActionSpace, FlatBatch, FlatLayout, FlatModel, HighBatch, IdtModel, LowBatch, ObsSpace, ReviewBatch};
use crate::scalar::Scalar;
use crate::sequence::{compute_rtg, high_level_steps, HighLevelStep};
use crate::tensor::{argmax, softmax, Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Episodes rolled out per task.
    pub episodes: usize,
    /// Across-episodic context size; the model's own `n` when unset.
    #[serde(default)]
    pub context_episodes: Option<usize>,
    /// Return-to-go at the start of every episode; the environment
    /// default when unset.
    #[serde(default)]
    pub target_return: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Draw z from the high-level Gaussian instead of taking its mean.
    #[serde(default)]
    pub sample_decisions: bool,
    /// Draw actions from the softmax instead of taking the argmax.
    #[serde(default)]
    pub sample_actions: bool,
    /// Flat baselines only: order completed episodes by return.
    #[serde(default)]
    pub sort_context: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 50,
            context_episodes: None,
            target_return: None,
            seed: 0,
            sample_decisions: false,
            sample_actions: false,
            sort_context: false,
        }
    }
}

impl EvalConfig {
    pub fn target(&self, task: &GridTask) -> f64 {
        self.target_return.unwrap_or_else(|| task.kind.default_target_return(task.grid_size))
    }

    fn context(&self, model_n: usize) -> Result<usize> {
        let n = self.context_episodes.unwrap_or(model_n);
        if n == 0 || n > model_n {
            return Err(Error::InvalidConfig(format!("context of {n} episodes outside 1..={model_n}")));
        }
        Ok(n)
    }
}

/// One high-level episode: its decision steps and the reviewed z of each.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpisodeRecord<T> {
    pub steps: Vec<HighLevelStep>,
    pub z: Vec<Vec<T>>,
}

impl<T> EpisodeRecord<T> {
    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward_sum).sum()
    }
}

/// Across-episodic test-time context: up to `n - 1` completed episodes,
/// oldest first, plus the episode in progress.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutContext<T> {
    capacity: usize,
    pub completed: VecDeque<EpisodeRecord<T>>,
    pub current: EpisodeRecord<T>,
    pub target: f64,
}

impl<T> RolloutContext<T> {
    pub fn new(n: usize, target: f64) -> Self {
        Self { capacity: n.saturating_sub(1), completed: VecDeque::new(), current: EpisodeRecord { steps: Vec::new(), z: Vec::new() }, target }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Moves the current episode into the completed buffer.
    pub fn finish_episode(&mut self) {
        let done = std::mem::replace(&mut self.current, EpisodeRecord { steps: Vec::new(), z: Vec::new() });
        self.push_completed(done);
    }

    pub fn push_completed(&mut self, record: EpisodeRecord<T>) {
        if self.capacity == 0 {
            return;
        }
        if self.completed.len() == self.capacity {
            self.completed.pop_front();
        }
        self.completed.push_back(record);
    }

    /// Return-to-go for the next decision of the current episode.
    pub fn rtg(&self) -> f64 {
        self.target - self.current.total_reward()
    }

    fn decisions(&self) -> usize {
        self.completed.iter().map(|e| e.steps.len()).sum::<usize>() + self.current.steps.len()
    }
}

fn check_spaces(obs: ObsSpace, actions: ActionSpace, episode_len: usize, task: &GridTask) -> Result<()> {
    match actions {
        ActionSpace::Discrete { n } if n == N_ACTIONS => {}
        ActionSpace::Discrete { n } => return Err(Error::ActionSpaceMismatch { model: n, env: N_ACTIONS }),
        ActionSpace::Continuous { dim } => return Err(Error::ActionSpaceMismatch { model: dim, env: N_ACTIONS }),
    }
    if obs != (ObsSpace::Grid { size: task.grid_size }) {
        return Err(Error::InvalidConfig(format!("model observations {obs:?} do not match a {0}x{0} grid", task.grid_size)));
    }
    if episode_len != task.episode_len {
        return Err(Error::InvalidConfig(format!("model episode length {episode_len} differs from task's {}", task.episode_len)));
    }
    Ok(())
}

fn pick_action<T: Scalar, R: Rng + ?Sized>(logits: &[T], sample: bool, rng: &mut R) -> Result<usize> {
    if !sample {
        return Ok(argmax(logits));
    }
    let p = softmax(logits)?;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi.to_f64_lossy();
        if u < acc {
            return Ok(i);
        }
    }
    Ok(p.len() - 1)
}

fn last_row<T: Scalar>(t: &Tensor<T>) -> Vec<T> {
    let d = t.last_dim();
    t.data()[t.numel() - d..].to_vec()
}

fn bool_scalar<T: Scalar>(b: bool) -> T {
    if b {
        T::one()
    } else {
        T::zero()
    }
}

/// Work tally for one episode.
#[derive(Clone, Copy, Debug, Default)]
struct Tally {
    tokens: u64,
    max_context: usize,
}

impl Tally {
    fn record<T: Scalar>(&mut self, g: &Graph<T>) {
        let used = g.counters().token_positions;
        self.tokens += used;
        self.max_context = self.max_context.max(used as usize);
    }
}

struct IdtRunner<'m, T: Scalar> {
    model: &'m IdtModel<T>,
    rng: ChaCha8Rng,
    sample_decisions: bool,
    sample_actions: bool,
}

impl<T: Scalar> IdtRunner<'_, T> {
    fn review(&self, obs: &[Pos], actions: &[usize], tally: &mut Tally) -> Result<Vec<T>> {
        let cfg = &self.model.config;
        let mut b = ReviewBatch { windows: 1, len: obs.len(), ..Default::default() };
        for (&o, &a) in obs.iter().zip(actions) {
            cfg.obs.push_grid(&mut b.obs, o);
            cfg.actions.push_discrete(&mut b.act, a);
        }
        let mut g = Graph::inference();
        let z = self.model.review(&mut g, &b)?;
        tally.record(&g);
        Ok(g.value(z).data().to_vec())
    }

    fn decision(&mut self, ctx: &RolloutContext<T>, obs: Pos, tally: &mut Tally) -> Result<Vec<T>> {
        let cfg = &self.model.config;
        let steps = ctx.decisions() + 1;
        let mut hb = HighBatch { seqs: 1, steps, ..Default::default() };
        let mut z = Vec::with_capacity(steps * cfg.z_dim);
        for rec in ctx.completed.iter().chain(std::iter::once(&ctx.current)) {
            for (s, zs) in rec.steps.iter().zip(&rec.z) {
                hb.rtg.push(cfg.scaled(s.rtg));
                cfg.obs.push_grid(&mut hb.obs, s.obs);
                hb.reward_sum.push(cfg.scaled(s.reward_sum));
                hb.done.push(bool_scalar(s.done));
                z.extend_from_slice(zs);
            }
        }
        hb.rtg.push(cfg.scaled(ctx.rtg()));
        cfg.obs.push_grid(&mut hb.obs, obs);
        hb.reward_sum.push(T::zero());
        hb.done.push(T::zero());
        z.resize(steps * cfg.z_dim, T::zero());

        let mut g = Graph::inference();
        let zv = g.constant(Tensor::new(&[steps, cfg.z_dim], z)?);
        let (mu, ls) = self.model.make(&mut g, &hb, zv)?;
        tally.record(&g);
        let mut out = last_row(g.value(mu));
        if self.sample_decisions {
            for (m, l) in out.iter_mut().zip(last_row(g.value(ls))) {
                let e: f64 = StandardNormal.sample(&mut self.rng);
                *m = T::from_f64_lossy(m.to_f64_lossy() + l.to_f64_lossy().exp() * e);
            }
        }
        Ok(out)
    }

    fn action(&mut self, z: &[T], obs: &[Pos], actions: &[usize], rewards: &[f64], tally: &mut Tally) -> Result<usize> {
        let cfg = &self.model.config;
        let len = obs.len();
        let mut lb = LowBatch { windows: 1, len, ..Default::default() };
        for k in 0..len {
            cfg.obs.push_grid(&mut lb.obs, obs[k]);
            match actions.get(k) {
                Some(&a) => cfg.actions.push_discrete(&mut lb.act, a),
                None => lb.act.extend(std::iter::repeat_n(T::zero(), cfg.actions.dim())),
            }
            lb.rew.push(T::from_f64_lossy(rewards.get(k).copied().unwrap_or(0.0)));
        }
        let mut g = Graph::inference();
        let logits = self.model.decide_with(&mut g, &lb, Tensor::new(&[1, cfg.z_dim], z.to_vec())?)?;
        tally.record(&g);
        pick_action(&last_row(g.value(logits)), self.sample_actions, &mut self.rng)
    }

    fn episode(&mut self, task: &GridTask, ctx: &mut RolloutContext<T>) -> Result<(f64, Tally)> {
        let c = self.model.config.c;
        let mut env = GridEnv::new(task.clone());
        let mut tally = Tally::default();
        let mut total = 0.0;
        let mut done = false;
        while !done {
            let EnvState { pos: start_obs, t: start, .. } = env.state;
            let rtg = ctx.rtg();
            let z = self.decision(ctx, start_obs, &mut tally)?;
            let len = c.min(task.episode_len - start);
            let (mut obs, mut acts, mut rews) = (Vec::with_capacity(len), Vec::with_capacity(len), Vec::with_capacity(len));
            for _ in 0..len {
                obs.push(env.state.pos);
                let a = self.action(&z, &obs, &acts, &rews, &mut tally)?;
                let tr = env.step(a)?;
                acts.push(a);
                rews.push(tr.reward);
                done = tr.done;
                if done {
                    break;
                }
            }
            let reviewed = self.review(&obs, &acts, &mut tally)?;
            let reward_sum: f64 = rews.iter().sum();
            total += reward_sum;
            ctx.current.steps.push(HighLevelStep { start, len: obs.len(), rtg, obs: start_obs, reward_sum, done });
            ctx.current.z.push(reviewed);
        }
        ctx.finish_episode();
        Ok((total, tally))
    }
}

/// Test-time trial and error with the hierarchical model: every `c` steps
/// a decision is made from the across-episodic context, the low-level
/// decoder acts on it, and the executed window is reviewed back into the
/// context. Parameters are never updated.
pub fn rollout_idt<T: Scalar>(model: &IdtModel<T>, task: &GridTask, config: &EvalConfig) -> Result<EvalReport> {
    let n = config.context(model.config.n)?;
    let ctx = RolloutContext::new(n, config.target(task));
    rollout_idt_from(model, task, config, ctx)
}

/// As [`rollout_idt`], starting from an existing context such as one built
/// by [`prefill_context`].
pub fn rollout_idt_from<T: Scalar>(model: &IdtModel<T>, task: &GridTask, config: &EvalConfig, mut ctx: RolloutContext<T>) -> Result<EvalReport> {
    let cfg = &model.config;
    check_spaces(cfg.obs, cfg.actions, cfg.episode_len, task)?;
    let n = config.context(cfg.n)?;
    if ctx.capacity() + 1 != n {
        return Err(Error::InvalidConfig(format!("context holds {} episodes, evaluation uses {n}", ctx.capacity() + 1)));
    }
    let mut runner = IdtRunner {
        model,
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        sample_decisions: config.sample_decisions,
        sample_actions: config.sample_actions,
    };
    let mut report = EvalReport::new(Method::Idt, task.task_id, config, n, cfg.c, task.episode_len);
    for _ in 0..config.episodes {
        let clock = Instant::now();
        let (ret, tally) = runner.episode(task, &mut ctx)?;
        report.push(ret, clock.elapsed().as_secs_f64() * 1e3, tally.tokens, tally.max_context);
    }
    Ok(report)
}

/// Turns demonstrations into completed context episodes, each window's z
/// coming from the reviewing encoder. Only the last `n - 1` are kept.
pub fn prefill_context<T: Scalar>(model: &IdtModel<T>, task: &GridTask, demos: &[Trajectory], config: &EvalConfig) -> Result<RolloutContext<T>> {
    let cfg = &model.config;
    check_spaces(cfg.obs, cfg.actions, cfg.episode_len, task)?;
    let n = config.context(cfg.n)?;
    let target = config.target(task);
    let mut ctx = RolloutContext::new(n, target);
    let runner = IdtRunner { model, rng: ChaCha8Rng::seed_from_u64(config.seed), sample_decisions: false, sample_actions: false };
    for demo in demos {
        if demo.len() != task.episode_len {
            return Err(Error::DemoLengthMismatch { expected: task.episode_len, got: demo.len() });
        }
        demo.validate()?;
    }
    let skip = demos.len().saturating_sub(ctx.capacity());
    for demo in &demos[skip..] {
        let rewards: Vec<f64> = demo.rewards.iter().map(|&r| f64::from(r)).collect();
        let rtg = compute_rtg(&rewards, target);
        let steps = high_level_steps(demo, &rtg, cfg.c);
        let mut z = Vec::with_capacity(steps.len());
        for s in &steps {
            let obs: Vec<Pos> = (s.start..s.start + s.len).map(|t| demo.observation(t)).collect();
            let acts: Vec<usize> = demo.actions[s.start..s.start + s.len].iter().map(|&a| usize::from(a)).collect();
            z.push(runner.review(&obs, &acts, &mut Tally::default())?);
        }
        ctx.push_completed(EpisodeRecord { steps, z });
    }
    Ok(ctx)
}

#[derive(Clone, Debug, Default)]
struct FlatEpisode {
    rtg: Vec<f64>,
    obs: Vec<Pos>,
    act: Vec<usize>,
    rew: Vec<f64>,
    done: Vec<bool>,
}

impl FlatEpisode {
    fn total(&self) -> f64 {
        self.rew.iter().sum()
    }
}

/// Test-time trial and error with a flat AD/AT-layout model: one forward
/// pass over the whole across-episodic context per action.
pub fn rollout_flat_baseline<T: Scalar>(model: &FlatModel<T>, task: &GridTask, config: &EvalConfig) -> Result<EvalReport> {
    let cfg = &model.config;
    check_spaces(cfg.obs, cfg.actions, cfg.episode_len, task)?;
    let n = config.context(cfg.n)?;
    let target = config.target(task);
    let method = match cfg.layout {
        FlatLayout::Ad => Method::FlatAd,
        FlatLayout::At => Method::FlatAt,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut completed: VecDeque<FlatEpisode> = VecDeque::new();
    let mut report = EvalReport::new(method, task.task_id, config, n, 1, task.episode_len);
    for _ in 0..config.episodes {
        let clock = Instant::now();
        let mut env = GridEnv::new(task.clone());
        let mut cur = FlatEpisode::default();
        let mut tally = Tally::default();
        let mut order: Vec<&FlatEpisode> = completed.iter().collect();
        if config.sort_context {
            order.sort_by(|a, b| a.total().total_cmp(&b.total()));
        }
        let past: usize = order.iter().map(|e| e.obs.len()).sum();
        loop {
            let rtg = target - cur.total();
            let obs = env.state.pos;
            let steps = past + cur.obs.len() + 1;
            let mut b = FlatBatch { seqs: 1, steps, ..Default::default() };
            for e in order.iter().copied().chain(std::iter::once(&cur)) {
                for t in 0..e.obs.len() {
                    b.rtg.push(cfg.scaled(e.rtg[t]));
                    cfg.obs.push_grid(&mut b.obs, e.obs[t]);
                    cfg.actions.push_discrete(&mut b.act, e.act[t]);
                    b.rew.push(T::from_f64_lossy(e.rew[t]));
                    b.done.push(bool_scalar(e.done[t]));
                }
            }
            b.rtg.push(cfg.scaled(rtg));
            cfg.obs.push_grid(&mut b.obs, obs);
            b.act.extend(std::iter::repeat_n(T::zero(), cfg.actions.dim()));
            b.rew.push(T::zero());
            b.done.push(T::zero());
            let mut g = Graph::inference();
            let logits = model.predict(&mut g, &b)?;
            tally.record(&g);
            let a = pick_action(&last_row(g.value(logits)), config.sample_actions, &mut rng)?;
            let tr = env.step(a)?;
            cur.rtg.push(rtg);
            cur.obs.push(obs);
            cur.act.push(a);
            cur.rew.push(tr.reward);
            cur.done.push(tr.done);
            if tr.done {
                break;
            }
        }
        let ret = cur.total();
        if n > 1 {
            if completed.len() == n - 1 {
                completed.pop_front();
            }
            completed.push_back(cur);
        }
        report.push(ret, clock.elapsed().as_secs_f64() * 1e3, tally.tokens, tally.max_context);
    }
    Ok(report)
}
