use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use clap::Args;
use idt_core::data::{read_dataset, Trajectory};
use idt_core::env::{GridTask, TaskSet};
use idt_core::eval::{
    prefill_context, rollout_flat_baseline, rollout_idt, rollout_idt_from, write_jsonl, write_summary, EvalConfig, EvalReport, EvalSummary,
};
use idt_core::model::{load_checkpoint, read_checkpoint, FlatModel, IdtModel, ModelKind};

use super::collect::Manifest;
use super::{latest_checkpoint, manifest_path};
use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate; defaults to `<checkpoints>/idt-latest.idtc`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Task-set JSON to evaluate on; defaults to the manifest's test split.
    #[arg(long)]
    pub tasks: Option<PathBuf>,
    /// Dataset whose training tasks must not appear among the evaluation
    /// tasks; overrides `paths.dataset`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// JSON Lines demonstrations used to prefill the IDT context.
    #[arg(long)]
    pub prefill: Option<PathBuf>,
    /// Report directory; overrides `paths.reports`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `eval.m_episodes`.
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Comma-separated seeds; overrides `eval.seeds`.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
}

/// Everything that makes two tasks the same environment, ignoring ids.
fn layout(t: &GridTask) -> String {
    format!("{:?}|{}|{}|{:?}|{:?}|{:?}|{:?}", t.kind, t.grid_size, t.episode_len, t.goal, t.key, t.door, t.action_perm)
}

pub fn check_contamination(train: &[GridTask], test: &[GridTask]) -> Result<(), CliError> {
    let seen: BTreeMap<String, usize> = train.iter().map(|t| (layout(t), t.task_id)).collect();
    for t in test {
        if let Some(id) = seen.get(&layout(t)) {
            return Err(CliError::Contamination(format!("evaluation task {} duplicates training task {id}", t.task_id)));
        }
    }
    Ok(())
}

fn read_demos(path: &Path) -> Result<Vec<Trajectory>, CliError> {
    let f = std::fs::File::open(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CliError::Config(format!("{} line {}: {e}", path.display(), i + 1)))?);
    }
    Ok(out)
}

/// Runs `jobs` over a bounded pool of scoped threads; results keep job order.
fn run_pool<J: Sync, R: Send>(jobs: &[J], workers: usize, f: impl Fn(&J) -> R + Sync) -> Vec<R> {
    let workers = workers.clamp(1, jobs.len().max(1));
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<R>>> = jobs.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                *slots[i].lock().expect("result slot") = Some(r);
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().expect("result slot").expect("every job ran")).collect()
}

pub fn run(config: &RunConfig, args: &EvalArgs) -> Result<(), CliError> {
    let mut config = config.clone();
    if let Some(e) = args.episodes {
        config.eval.m_episodes = e;
    }
    if let Some(s) = &args.seeds {
        config.eval.seeds = s.clone();
    }
    config.validate()?;
    let hash = config.hash();

    let dataset = args.dataset.clone().unwrap_or_else(|| config.paths.dataset.clone());
    let manifest = manifest_path(&dataset);
    let train_tasks = if manifest.exists() {
        Manifest::load(&manifest)?.train_tasks.to_tasks()?
    } else {
        read_dataset(&dataset)?.header.grid_tasks()?
    };
    let mut tasks = match &args.tasks {
        Some(p) => TaskSet::load(p)?.to_tasks()?,
        None if manifest.exists() => Manifest::load(&manifest)?.test_tasks.to_tasks()?,
        None => return Err(CliError::Config(format!("no --tasks given and {} missing", manifest.display()))),
    };
    tasks.sort_by_key(|t| t.task_id);
    check_contamination(&train_tasks, &tasks)?;

    let ck_path = args.checkpoint.clone().unwrap_or_else(|| latest_checkpoint(&config.paths.checkpoints, "idt"));
    let kind = read_checkpoint(&ck_path)?.model;
    let demos = args.prefill.as_deref().map(read_demos).transpose()?;
    let mut seeds = config.eval.seeds.clone();
    seeds.sort_unstable();
    let jobs: Vec<(GridTask, u64)> = tasks.iter().flat_map(|t| seeds.iter().map(move |&s| (t.clone(), s))).collect();
    let workers = config.eval.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, usize::from));
    let eval_cfg = |seed: u64| -> EvalConfig { config.eval_config(seed) };

    let results: Vec<idt_core::Result<EvalReport>> = match kind {
        ModelKind::Idt => {
            let (model, _) = load_checkpoint::<f32, IdtModel<f32>>(&ck_path)?;
            run_pool(&jobs, workers, |(task, seed)| {
                let ec = eval_cfg(*seed);
                match &demos {
                    Some(all) => {
                        let mine: Vec<Trajectory> = all.iter().filter(|d| d.task_id == task.task_id).cloned().collect();
                        let ctx = prefill_context(&model, task, &mine, &ec)?;
                        rollout_idt_from(&model, task, &ec, ctx)
                    }
                    None => rollout_idt(&model, task, &ec),
                }
            })
        }
        ModelKind::Flat => {
            if demos.is_some() {
                return Err(CliError::Config("--prefill applies to IDT checkpoints only".into()));
            }
            let (model, _) = load_checkpoint::<f32, FlatModel<f32>>(&ck_path)?;
            run_pool(&jobs, workers, |(task, seed)| rollout_flat_baseline(&model, task, &eval_cfg(*seed)))
        }
    };
    let reports = results.into_iter().collect::<idt_core::Result<Vec<_>>>()?;

    let out = args.out.clone().unwrap_or_else(|| config.paths.reports.clone());
    std::fs::create_dir_all(&out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    let method = reports[0].method.name();
    let jsonl = out.join(format!("{method}-eval.jsonl"));
    write_jsonl(&jsonl, &reports, Some(&hash))?;
    let mut summary = EvalSummary::from_reports(&reports)?;
    summary.config_hash = Some(hash);
    write_summary(&out.join(format!("{method}-summary.json")), &summary)?;
    println!(
        "{method}: {} rollouts, mean return {:.3}, mean best {:.3}, first episode {:.3}, last episode {:.3}",
        summary.n_rollouts,
        summary.mean_return,
        summary.mean_best_return,
        summary.mean_return_by_episode.first().copied().unwrap_or(f64::NAN),
        summary.mean_return_by_episode.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contamination_ignores_ids() {
        let a = GridTask::darkroom(9, (1, 2), 0);
        let b = GridTask::darkroom(9, (1, 2), 7);
        let c = GridTask::darkroom(9, (2, 2), 8);
        assert!(matches!(check_contamination(&[a.clone()], &[b]), Err(CliError::Contamination(_))));
        check_contamination(&[a], &[c]).unwrap();
    }

    #[test]
    fn pool_preserves_order() {
        let jobs: Vec<u64> = (0..20).collect();
        assert_eq!(run_pool(&jobs, 3, |j| j * 2), jobs.iter().map(|j| j * 2).collect::<Vec<_>>());
        assert!(run_pool(&Vec::<u64>::new(), 4, |j| *j).is_empty());
    }
}
