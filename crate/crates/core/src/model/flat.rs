use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{interleave, token_rows, ActionSpace, Embed, ObsSpace, Rows};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamStore, Var};
use crate::transformer::{Linear, PositionEmbedding, Transformer, TransformerConfig};

/// Per-step token layout of a flat across-episodic model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlatLayout {
    /// `o, a, r, d`
    Ad,
    /// `R̂, o, a, r, d`
    At,
}

impl FlatLayout {
    pub fn tokens_per_step(self) -> usize {
        match self {
            FlatLayout::Ad => 4,
            FlatLayout::At => 5,
        }
    }

    fn obs_offset(self) -> usize {
        match self {
            FlatLayout::Ad => 0,
            FlatLayout::At => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlatConfig {
    pub transformer: TransformerConfig,
    pub layout: FlatLayout,
    pub n: usize,
    pub episode_len: usize,
    pub obs: ObsSpace,
    pub actions: ActionSpace,
    pub return_scale: f64,
}

impl Default for FlatConfig {
    fn default() -> Self {
        Self {
            transformer: TransformerConfig::default(),
            layout: FlatLayout::Ad,
            n: 4,
            episode_len: 20,
            obs: ObsSpace::Grid { size: 9 },
            actions: ActionSpace::Discrete { n: 5 },
            return_scale: 20.0,
        }
    }
}

impl FlatConfig {
    pub fn max_tokens(&self) -> usize {
        self.layout.tokens_per_step() * self.n * self.episode_len
    }

    pub fn validate(&self) -> Result<()> {
        self.transformer.validate()?;
        if self.n == 0 || self.episode_len == 0 {
            return Err(Error::InvalidConfig("n and episode_len must be positive".into()));
        }
        if self.max_tokens() > self.transformer.max_tokens {
            return Err(Error::ContextOverflow { len: self.max_tokens(), max: self.transformer.max_tokens });
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

/// Flat sequences, all with `steps` steps. `rtg` is ignored for AD.
#[derive(Clone, Debug, Default)]
pub struct FlatBatch<T> {
    pub seqs: usize,
    pub steps: usize,
    pub rtg: Vec<T>,
    pub obs: Vec<T>,
    pub act: Vec<T>,
    pub rew: Vec<T>,
    pub done: Vec<T>,
}

/// Single transformer predicting one action per step from a flat
/// across-episodic context.
#[derive(Clone, Debug)]
pub struct FlatModel<T: Scalar> {
    pub config: FlatConfig,
    pub store: ParamStore<T>,
    rtg: Option<Embed>,
    obs: Embed,
    act: Embed,
    rew: Embed,
    done: Embed,
    pos: PositionEmbedding,
    tf: Transformer,
    head: Linear,
}

impl<T: Scalar> FlatModel<T> {
    pub fn new(config: FlatConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let s = &mut store;
        let d = config.transformer.embed_dim;
        let rtg = (config.layout == FlatLayout::At).then(|| Embed::new(s, "flat.embed.rtg", 1, d, rng));
        let obs = Embed::new(s, "flat.embed.obs", config.obs.dim(), d, rng);
        let act = Embed::new(s, "flat.embed.act", config.actions.dim(), d, rng);
        let rew = Embed::new(s, "flat.embed.rew", 1, d, rng);
        let done = Embed::new(s, "flat.embed.done", 1, d, rng);
        let pos = PositionEmbedding::new(s, "flat.pos", config.max_tokens(), d, rng);
        let tf = Transformer::new(s, "flat.tf", config.transformer.clone(), rng)?;
        let head = Linear::new(s, "flat.head", d, config.actions.dim(), rng);
        Ok(Self { config, store, rtg, obs, act, rew, done, pos, tf, head })
    }

    /// Action predictions at every observation token, `[seqs * steps,
    /// action_dim]`.
    pub fn predict(&self, g: &mut Graph<T>, batch: &FlatBatch<T>) -> Result<Var> {
        if batch.steps == 0 {
            return Err(Error::MalformedSequence("flat sequence without steps".into()));
        }
        let s = &self.store;
        let mut parts = Vec::with_capacity(5);
        if let Some(rtg) = &self.rtg {
            parts.push((rtg.forward_data(g, s, batch.rtg.clone())?, Rows::PerStep));
        }
        parts.push((self.obs.forward_data(g, s, batch.obs.clone())?, Rows::PerStep));
        parts.push((self.act.forward_data(g, s, batch.act.clone())?, Rows::PerStep));
        parts.push((self.rew.forward_data(g, s, batch.rew.clone())?, Rows::PerStep));
        parts.push((self.done.forward_data(g, s, batch.done.clone())?, Rows::PerStep));
        let period = self.config.layout.tokens_per_step();
        let x = interleave(g, s, &parts, &self.pos, batch.seqs, batch.steps)?;
        let h = self.tf.forward(g, s, x, batch.seqs, period * batch.steps)?;
        let h = g.gather_rows(h, &token_rows(batch.seqs, batch.steps, period, self.config.layout.obs_offset()))?;
        self.head.forward(g, s, h)
    }
}
