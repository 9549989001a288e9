use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::report::mean;
use super::rollout::{rollout_idt, EvalConfig};
use crate::env::GridTask;
use crate::error::{Error, Result};
use crate::model::train::{Histories, TrainConfig, Trainer};
use crate::model::{IdtConfig, IdtModel};

/// Decision intervals swept by default.
pub const C_SWEEP: [usize; 5] = [1, 5, 10, 15, 20];
/// Context sizes, in episodes, swept by default.
pub const CONTEXT_SWEEP: [usize; 3] = [1, 2, 4];
pub const MIN_SEEDS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationKind {
    CSweep,
    ContextSize,
}

impl AblationKind {
    pub fn default_settings(self) -> Vec<usize> {
        match self {
            AblationKind::CSweep => C_SWEEP.to_vec(),
            AblationKind::ContextSize => CONTEXT_SWEEP.to_vec(),
        }
    }

    fn label(self, value: usize) -> String {
        match self {
            AblationKind::CSweep => format!("c={value}"),
            AblationKind::ContextSize => format!("n={value}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub kind: AblationKind,
    #[serde(default)]
    pub settings: Option<Vec<usize>>,
    pub seeds: Vec<u64>,
    pub model: IdtConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl AblationConfig {
    pub fn settings(&self) -> Vec<usize> {
        self.settings.clone().unwrap_or_else(|| self.kind.default_settings())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.len() < MIN_SEEDS {
            return Err(Error::InvalidConfig(format!("ablations need at least {MIN_SEEDS} seeds, got {}", self.seeds.len())));
        }
        for v in self.settings() {
            self.model_for(v)?.validate()?;
        }
        self.train.validate()
    }

    fn model_for(&self, value: usize) -> Result<IdtConfig> {
        let mut m = self.model.clone();
        match self.kind {
            AblationKind::CSweep => m.c = value,
            AblationKind::ContextSize => m.n = value,
        }
        m.validate()?;
        Ok(m)
    }
}

/// One CSV row: a setting trained and evaluated under one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub seed: u64,
    pub mean_return: f64,
    pub best_return: f64,
    pub max_context_tokens: usize,
    pub tokens_processed: u64,
    pub wall_ms: f64,
}

pub const CSV_HEADER: &str = "setting,seed,mean_return,best_return,max_context_tokens,tokens_processed,wall_ms";

/// Trains one model per (setting, seed) on `data` and evaluates it on
/// every task in `tasks`.
pub fn run_ablation(config: &AblationConfig, data: &Histories<'_>, tasks: &[GridTask]) -> Result<Vec<AblationRow>> {
    config.validate()?;
    if tasks.is_empty() {
        return Err(Error::InvalidConfig("no evaluation tasks".into()));
    }
    let mut rows = Vec::new();
    for value in config.settings() {
        let model_cfg = config.model_for(value)?;
        for &seed in &config.seeds {
            let mut model = IdtModel::<f32>::new(model_cfg.clone(), seed)?;
            let mut trainer = Trainer::new(TrainConfig { seed, ..config.train.clone() }, &model.store)?;
            while trainer.step < config.train.max_iters {
                let m = trainer.idt_step(&mut model, data)?;
                if m.step % config.train.log_every == 0 {
                    log::info!("{} seed {seed}: step {} loss {:.4}", config.kind.label(value), m.step, m.loss);
                }
            }
            let eval = EvalConfig { seed, context_episodes: None, ..config.eval.clone() };
            let reports = tasks.iter().map(|t| rollout_idt(&model, t, &eval)).collect::<Result<Vec<_>>>()?;
            rows.push(AblationRow {
                setting: config.kind.label(value),
                seed,
                mean_return: mean(&reports.iter().map(|r| r.mean_return()).collect::<Vec<_>>()),
                best_return: mean(&reports.iter().map(|r| r.best_return).collect::<Vec<_>>()),
                max_context_tokens: reports.iter().map(|r| r.max_context()).max().unwrap_or(0),
                tokens_processed: reports.iter().map(|r| r.total_tokens()).sum(),
                wall_ms: reports.iter().map(|r| r.total_wall_ms()).sum(),
            });
        }
    }
    Ok(rows)
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{:.3}",
            r.setting, r.seed, r.mean_return, r.best_return, r.max_context_tokens, r.tokens_processed, r.wall_ms
        )?;
    }
    w.flush()?;
    Ok(())
}
