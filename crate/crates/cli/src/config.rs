use std::path::{Path, PathBuf};

use idt_core::data::CollectorConfig;
use idt_core::env::EnvKind;
use idt_core::eval::EvalConfig;
use idt_core::model::train::TrainConfig;
use idt_core::model::{ActionSpace, FlatConfig, FlatLayout, IdtConfig, ObsSpace};
use idt_core::transformer::TransformerConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub kind: EnvKind,
    pub grid_size: usize,
    pub episode_len: Option<usize>,
}

impl Default for EnvSection {
    fn default() -> Self {
        Self { kind: EnvKind::Darkroom, grid_size: 9, episode_len: None }
    }
}

impl EnvSection {
    pub fn episode_len(&self) -> usize {
        self.episode_len.unwrap_or_else(|| self.kind.default_episode_len(self.grid_size))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub n_train_tasks: usize,
    pub n_test_tasks: usize,
    pub steps_per_task: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_decay_frac: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let c = CollectorConfig::default();
        Self {
            n_train_tasks: 40,
            n_test_tasks: 5,
            steps_per_task: c.total_steps,
            alpha: c.alpha,
            gamma: c.gamma,
            eps_start: c.eps_start,
            eps_end: c.eps_end,
            eps_decay_frac: c.eps_decay_frac,
        }
    }
}

impl DataSection {
    pub fn collector(&self) -> CollectorConfig {
        CollectorConfig {
            total_steps: self.steps_per_task,
            alpha: self.alpha,
            gamma: self.gamma,
            eps_start: self.eps_start,
            eps_end: self.eps_end,
            eps_decay_frac: self.eps_decay_frac,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub transformer: TransformerConfig,
    pub z_dim: usize,
    pub c: Option<usize>,
    pub n: Option<usize>,
    /// Context episodes of the flat baselines.
    pub flat_n: usize,
    pub return_scale: Option<f64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { transformer: TransformerConfig::default(), z_dim: 128, c: None, n: None, flat_n: 4, return_scale: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub m_episodes: usize,
    pub target_return: Option<f64>,
    pub seeds: Vec<u64>,
    pub context_episodes: Option<usize>,
    pub sample_decisions: bool,
    pub sample_actions: bool,
    pub sort_context: bool,
    pub workers: Option<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            m_episodes: 50,
            target_return: None,
            seeds: (0..5).collect(),
            context_episodes: None,
            sample_decisions: false,
            sample_actions: false,
            sort_context: false,
            workers: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub dataset: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self { dataset: "runs/dataset.idt".into(), checkpoints: "runs/checkpoints".into(), reports: "runs/reports".into() }
    }
}

/// Whole-pipeline configuration. Every section is optional; unknown keys
/// anywhere are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub env: EnvSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

pub const SEED_ENV: &str = "IDT_SEED";

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Flag, then config file, then `IDT_SEED`, then zero.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> Result<u64, CliError> {
        let seed = match flag.or(self.seed) {
            Some(s) => s,
            None => match std::env::var(SEED_ENV) {
                Ok(v) => v.trim().parse().map_err(|_| CliError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?,
                Err(_) => 0,
            },
        };
        self.seed = Some(seed);
        Ok(seed)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    /// SHA-256 of the canonical JSON form, as lowercase hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        format!("{:x}", Sha256::digest(json))
    }

    pub fn target_return(&self) -> f64 {
        self.eval.target_return.unwrap_or_else(|| self.env.kind.default_target_return(self.env.grid_size))
    }

    fn return_scale(&self) -> f64 {
        self.model.return_scale.unwrap_or_else(|| self.env.kind.default_target_return(self.env.grid_size))
    }

    pub fn idt_config(&self) -> Result<IdtConfig, CliError> {
        let cfg = IdtConfig {
            transformer: self.model.transformer.clone(),
            z_dim: self.model.z_dim,
            c: self.model.c.unwrap_or_else(|| EnvKind::default_decision_interval(self.env.grid_size)),
            n: self.model.n.unwrap_or_else(|| self.env.kind.default_context_episodes()),
            episode_len: self.env.episode_len(),
            obs: ObsSpace::Grid { size: self.env.grid_size },
            actions: ActionSpace::Discrete { n: idt_core::env::N_ACTIONS },
            return_scale: self.return_scale(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn flat_config(&self, layout: FlatLayout) -> Result<FlatConfig, CliError> {
        let cfg = FlatConfig {
            transformer: self.model.transformer.clone(),
            layout,
            n: self.model.flat_n,
            episode_len: self.env.episode_len(),
            obs: ObsSpace::Grid { size: self.env.grid_size },
            actions: ActionSpace::Discrete { n: idt_core::env::N_ACTIONS },
            return_scale: self.return_scale(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn eval_config(&self, seed: u64) -> EvalConfig {
        EvalConfig {
            episodes: self.eval.m_episodes,
            context_episodes: self.eval.context_episodes,
            target_return: Some(self.target_return()),
            seed,
            sample_decisions: self.eval.sample_decisions,
            sample_actions: self.eval.sample_actions,
            sort_context: self.eval.sort_context,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.data.n_train_tasks == 0 {
            return Err(CliError::Config("data.n_train_tasks must be positive".into()));
        }
        self.data.collector().validate(self.env.episode_len())?;
        self.train.validate()?;
        if self.eval.m_episodes == 0 || self.eval.seeds.is_empty() {
            return Err(CliError::Config("eval needs at least one episode and one seed".into()));
        }
        if self.eval.workers == Some(0) {
            return Err(CliError::Config("eval.workers must be positive".into()));
        }
        Ok(())
    }
}
