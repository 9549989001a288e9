use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Args;
use idt_core::data::{collect_dataset, demonstrations, task_seed, write_dataset};
use idt_core::env::{sample_tasks, GridTask, TaskSet};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ensure_parent, manifest_path};
use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Args)]
pub struct CollectArgs {
    /// Dataset output path; overrides `paths.dataset`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overwrite existing output files.
    #[arg(long)]
    pub force: bool,
    /// Also write demonstrations for the test tasks to this JSON Lines file.
    #[arg(long)]
    pub demos: Option<PathBuf>,
    /// Random-action probability of the demonstration policy.
    #[arg(long, default_value_t = 0.0)]
    pub demo_epsilon: f64,
    /// Demonstration episodes per test task.
    #[arg(long, default_value_t = 10)]
    pub demo_episodes: usize,
}

/// Sidecar describing how a dataset was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub config: RunConfig,
    pub dataset_sha256: String,
    pub n_records: usize,
    pub train_tasks: TaskSet,
    pub test_tasks: TaskSet,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

pub fn split_tasks(config: &RunConfig) -> Result<(Vec<GridTask>, Vec<GridTask>), CliError> {
    let env = &config.env;
    let (mut train, mut test) = sample_tasks(env.kind, env.grid_size, config.data.n_train_tasks, config.data.n_test_tasks, config.seed())?;
    let t = env.episode_len();
    for task in train.iter_mut().chain(test.iter_mut()) {
        task.episode_len = t;
    }
    Ok((train, test))
}

fn refuse_existing(path: &Path, force: bool) -> Result<(), CliError> {
    if path.exists() && !force {
        return Err(CliError::Io(format!("{} already exists; pass --force to overwrite", path.display())));
    }
    Ok(())
}

pub fn run(config: &RunConfig, args: &CollectArgs) -> Result<(), CliError> {
    let out = args.out.clone().unwrap_or_else(|| config.paths.dataset.clone());
    let manifest = manifest_path(&out);
    refuse_existing(&out, args.force)?;
    refuse_existing(&manifest, args.force)?;
    if let Some(d) = &args.demos {
        refuse_existing(d, args.force)?;
    }

    let (train, test) = split_tasks(config)?;
    let file = collect_dataset(&train, &config.data.collector(), config.seed())?;
    ensure_parent(&out)?;
    write_dataset(&out, &file)?;
    let bytes = std::fs::read(&out)?;
    let m = Manifest {
        config_hash: config.hash(),
        seed: config.seed(),
        config: config.clone(),
        dataset_sha256: format!("{:x}", Sha256::digest(&bytes)),
        n_records: file.records.len(),
        train_tasks: TaskSet::from_tasks(&train)?,
        test_tasks: TaskSet::from_tasks(&test)?,
    };
    std::fs::write(&manifest, serde_json::to_string_pretty(&m).map_err(idt_core::Error::from)? + "\n")?;
    log::info!("wrote {} episodes from {} tasks to {}", file.records.len(), train.len(), out.display());

    if let Some(path) = &args.demos {
        ensure_parent(path)?;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for task in &test {
            let seed = task_seed(config.seed(), task.task_id);
            for demo in demonstrations(task, args.demo_episodes, args.demo_epsilon, seed)? {
                serde_json::to_writer(&mut w, &demo).map_err(idt_core::Error::from)?;
                w.write_all(b"\n")?;
            }
        }
        w.flush()?;
    }
    println!("{}", out.display());
    Ok(())
}
