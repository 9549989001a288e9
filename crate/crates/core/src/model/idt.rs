use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{interleave, token_rows, ActionSpace, Embed, ObsSpace, Rows};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sequence::n_segments;
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use crate::transformer::{Linear, PositionEmbedding, Transformer, TransformerConfig};

pub const LOG_SIGMA_MIN: f64 = -5.0;
pub const LOG_SIGMA_MAX: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdtConfig {
    pub transformer: TransformerConfig,
    pub z_dim: usize,
    /// Environment steps per high-level decision.
    pub c: usize,
    /// Episodes in the across-episodic context.
    pub n: usize,
    pub episode_len: usize,
    pub obs: ObsSpace,
    pub actions: ActionSpace,
    /// Returns and reward sums are divided by this before embedding.
    pub return_scale: f64,
}

impl Default for IdtConfig {
    fn default() -> Self {
        Self {
            transformer: TransformerConfig::default(),
            z_dim: 128,
            c: 5,
            n: 10,
            episode_len: 20,
            obs: ObsSpace::Grid { size: 9 },
            actions: ActionSpace::Discrete { n: 5 },
            return_scale: 20.0,
        }
    }
}

impl IdtConfig {
    pub fn segments(&self) -> usize {
        n_segments(self.episode_len, self.c)
    }

    /// Longest high-level context: `5 * n * ceil(T / c)`.
    pub fn high_tokens(&self) -> usize {
        5 * self.n * self.segments()
    }

    pub fn validate(&self) -> Result<()> {
        self.transformer.validate()?;
        if self.c == 0 || self.n == 0 || self.episode_len == 0 || self.z_dim == 0 {
            return Err(Error::InvalidConfig("c, n, episode_len and z_dim must be positive".into()));
        }
        if self.c > self.episode_len {
            return Err(Error::InvalidConfig(format!("c = {} exceeds episode length {}", self.c, self.episode_len)));
        }
        if self.high_tokens() > self.transformer.max_tokens {
            return Err(Error::ContextOverflow { len: self.high_tokens(), max: self.transformer.max_tokens });
        }
        if !(self.return_scale > 0.0) {
            return Err(Error::InvalidConfig("return_scale must be positive".into()));
        }
        Ok(())
    }

    pub fn scaled<T: Scalar>(&self, x: f64) -> T {
        T::from_f64_lossy(x / self.return_scale)
    }
}

/// `o, a` windows, all of length `len`.
#[derive(Clone, Debug, Default)]
pub struct ReviewBatch<T> {
    pub windows: usize,
    pub len: usize,
    pub obs: Vec<T>,
    pub act: Vec<T>,
}

/// `R̂, o, z, r̂, d` sequences, all with `steps` decisions. The z slots are
/// supplied separately as a graph variable.
#[derive(Clone, Debug, Default)]
pub struct HighBatch<T> {
    pub seqs: usize,
    pub steps: usize,
    pub rtg: Vec<T>,
    pub obs: Vec<T>,
    pub reward_sum: Vec<T>,
    pub done: Vec<T>,
}

/// `z, o, a, r` windows, all of length `len`, one decision per window.
#[derive(Clone, Debug, Default)]
pub struct LowBatch<T> {
    pub windows: usize,
    pub len: usize,
    pub obs: Vec<T>,
    pub act: Vec<T>,
    pub rew: Vec<T>,
}

#[derive(Clone, Debug)]
struct Reviewing {
    obs: Embed,
    act: Embed,
    pos: PositionEmbedding,
    tf: Transformer,
    head: Linear,
}

#[derive(Clone, Debug)]
struct Making {
    rtg: Embed,
    obs: Embed,
    z: Embed,
    reward_sum: Embed,
    done: Embed,
    pos: PositionEmbedding,
    tf: Transformer,
    mu: Linear,
    log_sigma: Linear,
}

#[derive(Clone, Debug)]
struct DecisionsToGo {
    z: Embed,
    obs: Embed,
    act: Embed,
    rew: Embed,
    pos: PositionEmbedding,
    tf: Transformer,
    head: Linear,
}

/// Reviewing, Making and Decisions-to-Go modules over one parameter store.
///
/// Parameter names are prefixed `review.`, `making.` and `dtg.`; the three
/// sets are disjoint.
#[derive(Clone, Debug)]
pub struct IdtModel<T: Scalar> {
    pub config: IdtConfig,
    pub store: ParamStore<T>,
    review: Reviewing,
    making: Making,
    dtg: DecisionsToGo,
}

pub const MODULE_PREFIXES: [&str; 3] = ["review.", "making.", "dtg."];

impl<T: Scalar> IdtModel<T> {
    pub fn new(config: IdtConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let s = &mut store;
        let d = config.transformer.embed_dim;
        let (od, ad, zd, c) = (config.obs.dim(), config.actions.dim(), config.z_dim, config.c);
        let tf = config.transformer.clone();
        let review = Reviewing {
            obs: Embed::new(s, "review.embed.obs", od, d, rng),
            act: Embed::new(s, "review.embed.act", ad, d, rng),
            pos: PositionEmbedding::new(s, "review.pos", 2 * c, d, rng),
            tf: Transformer::new(s, "review.tf", tf.clone(), rng)?,
            head: Linear::new(s, "review.head", d, zd, rng),
        };
        let making = Making {
            rtg: Embed::new(s, "making.embed.rtg", 1, d, rng),
            obs: Embed::new(s, "making.embed.obs", od, d, rng),
            z: Embed::new(s, "making.embed.z", zd, d, rng),
            reward_sum: Embed::new(s, "making.embed.reward_sum", 1, d, rng),
            done: Embed::new(s, "making.embed.done", 1, d, rng),
            pos: PositionEmbedding::new(s, "making.pos", config.high_tokens(), d, rng),
            tf: Transformer::new(s, "making.tf", tf.clone(), rng)?,
            mu: Linear::new(s, "making.mu", d, zd, rng),
            log_sigma: Linear::new(s, "making.log_sigma", d, zd, rng),
        };
        let dtg = DecisionsToGo {
            z: Embed::new(s, "dtg.embed.z", zd, d, rng),
            obs: Embed::new(s, "dtg.embed.obs", od, d, rng),
            act: Embed::new(s, "dtg.embed.act", ad, d, rng),
            rew: Embed::new(s, "dtg.embed.rew", 1, d, rng),
            pos: PositionEmbedding::new(s, "dtg.pos", 4 * c, d, rng),
            tf: Transformer::new(s, "dtg.tf", tf, rng)?,
            head: Linear::new(s, "dtg.head", d, ad, rng),
        };
        Ok(Self { config, store, review, making, dtg })
    }

    fn check_window(&self, len: usize) -> Result<()> {
        if len == 0 {
            return Err(Error::EmptyWindow);
        }
        if len > self.config.c {
            return Err(Error::MalformedSequence(format!("window of {len} steps exceeds c = {}", self.config.c)));
        }
        Ok(())
    }

    /// Encodes executed windows into decisions, `[windows, z_dim]`.
    ///
    /// Reads the output at each window's final action token.
    pub fn review(&self, g: &mut Graph<T>, batch: &ReviewBatch<T>) -> Result<Var> {
        self.check_window(batch.len)?;
        let m = &self.review;
        let s = &self.store;
        let obs = m.obs.forward_data(g, s, batch.obs.clone())?;
        let act = m.act.forward_data(g, s, batch.act.clone())?;
        let x = interleave(g, s, &[(obs, Rows::PerStep), (act, Rows::PerStep)], &m.pos, batch.windows, batch.len)?;
        let len = 2 * batch.len;
        let h = m.tf.forward(g, s, x, batch.windows, len)?;
        let last: Vec<usize> = (0..batch.windows).map(|w| w * len + len - 1).collect();
        let h = g.gather_rows(h, &last)?;
        m.head.forward(g, s, h)
    }

    /// Decision distributions read at every observation token:
    /// `(mu, log_sigma)`, each `[seqs * steps, z_dim]`, with `log_sigma`
    /// clamped to `[LOG_SIGMA_MIN, LOG_SIGMA_MAX]`.
    pub fn make(&self, g: &mut Graph<T>, batch: &HighBatch<T>, z: Var) -> Result<(Var, Var)> {
        let m = &self.making;
        let s = &self.store;
        if batch.steps == 0 {
            return Err(Error::MalformedSequence("high-level sequence without decisions".into()));
        }
        let rtg = m.rtg.forward_data(g, s, batch.rtg.clone())?;
        let obs = m.obs.forward_data(g, s, batch.obs.clone())?;
        let ze = m.z.forward(g, s, z)?;
        let rs = m.reward_sum.forward_data(g, s, batch.reward_sum.clone())?;
        let done = m.done.forward_data(g, s, batch.done.clone())?;
        let parts = [(rtg, Rows::PerStep), (obs, Rows::PerStep), (ze, Rows::PerStep), (rs, Rows::PerStep), (done, Rows::PerStep)];
        let x = interleave(g, s, &parts, &m.pos, batch.seqs, batch.steps)?;
        let h = m.tf.forward(g, s, x, batch.seqs, 5 * batch.steps)?;
        let h = g.gather_rows(h, &token_rows(batch.seqs, batch.steps, 5, 1))?;
        let mu = m.mu.forward(g, s, h)?;
        let ls = m.log_sigma.forward(g, s, h)?;
        let ls = g.clamp(ls, T::from_f64_lossy(LOG_SIGMA_MIN), T::from_f64_lossy(LOG_SIGMA_MAX));
        Ok((mu, ls))
    }

    /// Action predictions at every observation token, `[windows * len,
    /// action_dim]`. `z` holds one decision per window.
    pub fn decide(&self, g: &mut Graph<T>, batch: &LowBatch<T>, z: Var) -> Result<Var> {
        self.check_window(batch.len)?;
        let m = &self.dtg;
        let s = &self.store;
        let ze = m.z.forward(g, s, z)?;
        let obs = m.obs.forward_data(g, s, batch.obs.clone())?;
        let act = m.act.forward_data(g, s, batch.act.clone())?;
        let rew = m.rew.forward_data(g, s, batch.rew.clone())?;
        let parts = [(ze, Rows::PerSequence), (obs, Rows::PerStep), (act, Rows::PerStep), (rew, Rows::PerStep)];
        let x = interleave(g, s, &parts, &m.pos, batch.windows, batch.len)?;
        let h = m.tf.forward(g, s, x, batch.windows, 4 * batch.len)?;
        let h = g.gather_rows(h, &token_rows(batch.windows, batch.len, 4, 1))?;
        m.head.forward(g, s, h)
    }

    /// Convenience for inference: decisions from a constant tensor.
    pub fn decide_with(&self, g: &mut Graph<T>, batch: &LowBatch<T>, z: Tensor<T>) -> Result<Var> {
        let z = g.constant(z);
        self.decide(g, batch, z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> IdtConfig {
        IdtConfig {
            transformer: TransformerConfig { n_layers: 1, n_heads: 2, embed_dim: 8, max_tokens: 256, dropout_p: 0.0, ..Default::default() },
            z_dim: 4,
            c: 2,
            n: 2,
            episode_len: 4,
            obs: ObsSpace::Grid { size: 3 },
            actions: ActionSpace::Discrete { n: 5 },
            return_scale: 4.0,
        }
    }

    fn review_batch(windows: usize, len: usize) -> ReviewBatch<f64> {
        let cfg = tiny();
        let mut b = ReviewBatch { windows, len, ..Default::default() };
        for i in 0..windows * len {
            cfg.obs.push_grid(&mut b.obs, (i % 3, (i / 3) % 3));
            cfg.actions.push_discrete(&mut b.act, i % 5);
        }
        b
    }

    #[test]
    fn parameter_sets_are_disjoint_and_cover_the_store() {
        let m = IdtModel::<f64>::new(tiny(), 0).unwrap();
        let counts: Vec<usize> = MODULE_PREFIXES.iter().map(|p| m.store.ids_with_prefix(p).count()).collect();
        assert!(counts.iter().all(|&c| c > 0));
        assert_eq!(counts.iter().sum::<usize>(), m.store.len());
    }

    #[test]
    fn review_shapes_and_determinism() {
        let m = IdtModel::<f64>::new(tiny(), 0).unwrap();
        let mut g = Graph::inference();
        let z1 = m.review(&mut g, &review_batch(3, 2)).unwrap();
        let z2 = m.review(&mut g, &review_batch(3, 2)).unwrap();
        assert_eq!(g.shape(z1), &[3, 4]);
        assert_eq!(g.value(z1), g.value(z2));
        let one = m.review(&mut g, &review_batch(1, 1)).unwrap();
        assert_eq!(g.shape(one), &[1, 4]);
        assert!(matches!(m.review(&mut g, &review_batch(1, 0)), Err(Error::EmptyWindow)));
        assert!(m.review(&mut g, &review_batch(1, 3)).is_err());
    }

    #[test]
    fn default_config_is_consistent() {
        let c = IdtConfig::default();
        c.validate().unwrap();
        assert_eq!(c.high_tokens(), 200);
    }
}
