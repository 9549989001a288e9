use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use idt_core::data::{read_dataset, DatasetFile};
use idt_core::model::train::{Histories, TrainMetrics, Trainer};
use idt_core::model::{load_checkpoint_matching, save_checkpoint_with_meta, Checkpointable, FlatLayout, FlatModel, IdtModel};
use serde::Serialize;
use serde_json::json;

use super::{ensure_parent, latest_checkpoint};
use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Idt,
    FlatAd,
    FlatAt,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Idt => "idt",
            Mode::FlatAd => "flat-ad",
            Mode::FlatAt => "flat-at",
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value_t = Mode::Idt)]
    pub mode: Mode,
    /// Continue from `<checkpoints>/<mode>-latest.idtc`.
    #[arg(long)]
    pub resume: bool,
    /// Dataset path; overrides `paths.dataset`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Checkpoint directory; overrides `paths.checkpoints`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `train.max_iters`.
    #[arg(long)]
    pub max_iters: Option<u64>,
}

#[derive(Serialize)]
struct MetricsLine<'a> {
    step: u64,
    loss: f64,
    lr: f64,
    grad_norm: f64,
    seed: u64,
    config_hash: &'a str,
}

pub fn check_dataset(config: &RunConfig, file: &DatasetFile) -> Result<(), CliError> {
    let h = &file.header;
    let env = &config.env;
    if h.kind != env.kind || h.grid_size != env.grid_size || h.episode_len != env.episode_len() {
        return Err(CliError::Config(format!(
            "dataset holds {:?} {}x{} with T = {}, config expects {:?} {}x{} with T = {}",
            h.kind,
            h.grid_size,
            h.grid_size,
            h.episode_len,
            env.kind,
            env.grid_size,
            env.grid_size,
            env.episode_len()
        )));
    }
    Ok(())
}

/// Keeps metrics lines up to and including `step`.
fn truncate_metrics(path: &Path, step: u64) -> Result<Vec<String>, CliError> {
    let Ok(f) = File::open(path) else {
        return Ok(Vec::new());
    };
    let mut kept = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        let s = serde_json::from_str::<serde_json::Value>(&line).ok().and_then(|v| v.get("step").and_then(|s| s.as_u64()));
        if s.is_some_and(|s| s <= step) {
            kept.push(line);
        }
    }
    Ok(kept)
}

struct Run<'a> {
    config: &'a RunConfig,
    mode: Mode,
    dir: PathBuf,
    hash: String,
}

impl Run<'_> {
    fn meta(&self) -> serde_json::Value {
        json!({ "config_hash": self.hash, "seed": self.config.seed(), "mode": self.mode.name() })
    }

    fn train<M: Checkpointable<f32>>(
        &self,
        model: &mut M,
        trainer: &mut Trainer<f32>,
        max_iters: u64,
        mut step: impl FnMut(&mut Trainer<f32>, &mut M) -> idt_core::Result<TrainMetrics>,
    ) -> Result<(), CliError> {
        let metrics_path = self.dir.join(format!("{}-metrics.jsonl", self.mode.name()));
        let kept = truncate_metrics(&metrics_path, trainer.step)?;
        let mut w = BufWriter::new(File::create(&metrics_path)?);
        for line in kept {
            writeln!(w, "{line}")?;
        }
        let every = trainer.config.log_every;
        let ck_every = trainer.config.checkpoint_every;
        while trainer.step < max_iters {
            let m = step(trainer, model)?;
            if m.step % every == 0 {
                let line = MetricsLine { step: m.step, loss: m.loss, lr: m.lr, grad_norm: m.grad_norm, seed: self.config.seed(), config_hash: &self.hash };
                serde_json::to_writer(&mut w, &line).map_err(idt_core::Error::from)?;
                w.write_all(b"\n")?;
                log::info!("{} step {} loss {:.4} lr {:.2e}", self.mode.name(), m.step, m.loss, m.lr);
            }
            if ck_every > 0 && m.step % ck_every == 0 {
                w.flush()?;
                let path = self.dir.join(format!("{}-step{}.idtc", self.mode.name(), m.step));
                save_checkpoint_with_meta(&path, model, Some(trainer), Some(self.meta()))?;
                save_checkpoint_with_meta(latest_checkpoint(&self.dir, self.mode.name()), model, Some(trainer), Some(self.meta()))?;
            }
        }
        w.flush()?;
        save_checkpoint_with_meta(latest_checkpoint(&self.dir, self.mode.name()), model, Some(trainer), Some(self.meta()))?;
        Ok(())
    }

    fn start<M: Checkpointable<f32>>(&self, resume: bool, expected: &M::Config, fresh: impl FnOnce() -> idt_core::Result<M>) -> Result<(M, Trainer<f32>), CliError> {
        if resume {
            let path = latest_checkpoint(&self.dir, self.mode.name());
            if !path.exists() {
                return Err(CliError::Io(format!("nothing to resume: {} missing", path.display())));
            }
            let (model, trainer) = load_checkpoint_matching::<f32, M>(&path, expected)?;
            let mut trainer = trainer.ok_or_else(|| CliError::Config(format!("{} has no optimizer state", path.display())))?;
            trainer.config.max_iters = self.config.train.max_iters;
            log::info!("resuming {} from step {}", self.mode.name(), trainer.step);
            return Ok((model, trainer));
        }
        let model = fresh()?;
        let mut tc = self.config.train.clone();
        tc.seed = self.config.seed();
        let trainer = Trainer::new(tc, model.store())?;
        Ok((model, trainer))
    }
}

pub fn run(config: &RunConfig, args: &TrainArgs) -> Result<(), CliError> {
    let mut config = config.clone();
    if let Some(m) = args.max_iters {
        config.train.max_iters = m;
    }
    config.train.validate()?;
    let dataset = args.dataset.clone().unwrap_or_else(|| config.paths.dataset.clone());
    let file = read_dataset(&dataset)?;
    check_dataset(&config, &file)?;
    let hist = Histories::from_dataset(&file)?;
    let dir = args.out.clone().unwrap_or_else(|| config.paths.checkpoints.clone());
    ensure_parent(&dir.join("x"))?;
    let run = Run { config: &config, mode: args.mode, dir, hash: config.hash() };
    let max_iters = config.train.max_iters;
    let seed = config.seed();
    match args.mode {
        Mode::Idt => {
            let cfg = config.idt_config()?;
            let (mut model, mut trainer) = run.start(args.resume, &cfg, || IdtModel::<f32>::new(cfg.clone(), seed))?;
            run.train(&mut model, &mut trainer, max_iters, |t, m| t.idt_step(m, &hist))?;
        }
        Mode::FlatAd | Mode::FlatAt => {
            let layout = if args.mode == Mode::FlatAd { FlatLayout::Ad } else { FlatLayout::At };
            let cfg = config.flat_config(layout)?;
            let (mut model, mut trainer) = run.start(args.resume, &cfg, || FlatModel::<f32>::new(cfg.clone(), seed))?;
            run.train(&mut model, &mut trainer, max_iters, |t, m| t.flat_step(m, &hist))?;
        }
    }
    println!("{}", latest_checkpoint(&run.dir, args.mode.name()).display());
    Ok(())
}
