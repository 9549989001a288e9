use std::path::PathBuf;

use clap::{Args, ValueEnum};
use idt_core::data::read_dataset;
use idt_core::env::TaskSet;
use idt_core::eval::{run_ablation, write_ablation_csv, AblationConfig, AblationKind};
use idt_core::model::train::Histories;

use super::collect::Manifest;
use super::eval::check_contamination;
use super::train::check_dataset;
use super::{ensure_parent, manifest_path};
use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Sweep {
    /// Decision interval c.
    C,
    /// Context size n, in episodes.
    Context,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub kind: Sweep,
    /// Values to sweep; defaults to the standard grid for the sweep kind.
    #[arg(long, value_delimiter = ',')]
    pub settings: Option<Vec<usize>>,
    /// Training and evaluation seeds; defaults to `eval.seeds`.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Dataset path; overrides `paths.dataset`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Task-set JSON to evaluate on; defaults to the manifest's test split.
    #[arg(long)]
    pub tasks: Option<PathBuf>,
    /// Overrides `train.max_iters` for every run.
    #[arg(long)]
    pub max_iters: Option<u64>,
    /// CSV output; defaults to `<reports>/ablation-<kind>.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(config: &RunConfig, args: &AblateArgs) -> Result<(), CliError> {
    let (kind, label) = match args.kind {
        Sweep::C => (AblationKind::CSweep, "c"),
        Sweep::Context => (AblationKind::ContextSize, "context"),
    };
    let dataset = args.dataset.clone().unwrap_or_else(|| config.paths.dataset.clone());
    let file = read_dataset(&dataset)?;
    check_dataset(config, &file)?;
    let manifest = manifest_path(&dataset);
    let mut tasks = match &args.tasks {
        Some(p) => TaskSet::load(p)?.to_tasks()?,
        None if manifest.exists() => Manifest::load(&manifest)?.test_tasks.to_tasks()?,
        None => return Err(CliError::Config(format!("no --tasks given and {} missing", manifest.display()))),
    };
    tasks.sort_by_key(|t| t.task_id);
    check_contamination(&file.header.grid_tasks()?, &tasks)?;

    let mut train = config.train.clone();
    if let Some(m) = args.max_iters {
        train.max_iters = m;
    }
    let ablation = AblationConfig {
        kind,
        settings: args.settings.clone(),
        seeds: args.seeds.clone().unwrap_or_else(|| config.eval.seeds.clone()),
        model: config.idt_config()?,
        train,
        eval: config.eval_config(config.seed()),
    };
    ablation.validate()?;
    let hist = Histories::from_dataset(&file)?;
    let rows = run_ablation(&ablation, &hist, &tasks)?;
    let out = args.out.clone().unwrap_or_else(|| config.paths.reports.join(format!("ablation-{label}.csv")));
    ensure_parent(&out)?;
    write_ablation_csv(&out, &rows)?;
    log::info!("wrote {} rows to {}", rows.len(), out.display());
    Ok(())
}
