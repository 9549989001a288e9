use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use idt_core::env::{EnvKind, GridTask};
use idt_core::eval::{rollout_flat_baseline, rollout_idt, token_accounting, EvalConfig, EvalReport, Method};
use idt_core::model::{ActionSpace, FlatConfig, FlatLayout, FlatModel, IdtConfig, IdtModel, ObsSpace};

use super::ensure_parent;
use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// CSV output; defaults to `<reports>/bench.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Grid sizes to benchmark; episode length and decision interval follow
    /// the environment defaults for each size.
    #[arg(long, value_delimiter = ',', default_values_t = [9usize, 40])]
    pub sizes: Vec<usize>,
    /// Context episodes shared by every method.
    #[arg(long, default_value_t = 4)]
    pub context_episodes: usize,
    /// Timed rollout episodes per method and size; zero skips timing.
    #[arg(long, default_value_t = 1)]
    pub episodes: usize,
}

pub const BENCH_HEADER: &str = "env,grid_size,episode_len,method,context_episodes,decision_interval,max_context_tokens,max_high_tokens,max_low_tokens,tokens_per_episode,timed_episodes,measured_tokens,wall_ms_per_episode,seed,config_hash";

fn per_episode(r: &EvalReport) -> (u64, f64) {
    let n = r.returns.len().max(1);
    (r.total_tokens(), r.total_wall_ms() / n as f64)
}

pub fn run(config: &RunConfig, args: &BenchArgs) -> Result<(), CliError> {
    if args.sizes.is_empty() || args.context_episodes == 0 {
        return Err(CliError::Config("bench needs at least one size and a positive context".into()));
    }
    let kind = config.env.kind;
    let seed = config.seed();
    let hash = config.hash();
    let mut csv = String::new();
    writeln!(csv, "{BENCH_HEADER}").expect("string write");
    for &size in &args.sizes {
        let t = kind.default_episode_len(size);
        let c = EnvKind::default_decision_interval(size);
        let n = args.context_episodes;
        let task = GridTask { episode_len: t, ..GridTask::darkroom(size, (0, 0), 0) };
        let mut tf = config.model.transformer.clone();
        tf.max_tokens = tf.max_tokens.max(5 * n * t);
        let obs = ObsSpace::Grid { size };
        let actions = ActionSpace::Discrete { n: idt_core::env::N_ACTIONS };
        let scale = kind.default_target_return(size);
        let eval = EvalConfig { episodes: args.episodes, seed, ..Default::default() };
        for method in [Method::Idt, Method::FlatAd, Method::FlatAt] {
            let budget = token_accounting(method, n, t, c);
            let measured = if args.episodes == 0 {
                None
            } else {
                let report = match method {
                    Method::Idt => {
                        let cfg = IdtConfig { transformer: tf.clone(), z_dim: config.model.z_dim, c, n, episode_len: t, obs, actions, return_scale: scale };
                        rollout_idt(&IdtModel::<f32>::new(cfg, seed)?, &task, &eval)?
                    }
                    Method::FlatAd | Method::FlatAt => {
                        let layout = if method == Method::FlatAd { FlatLayout::Ad } else { FlatLayout::At };
                        let cfg = FlatConfig { transformer: tf.clone(), layout, n, episode_len: t, obs, actions, return_scale: scale };
                        rollout_flat_baseline(&FlatModel::<f32>::new(cfg, seed)?, &task, &eval)?
                    }
                };
                Some(per_episode(&report))
            };
            let (tokens, ms) = measured.map_or((String::new(), String::new()), |(tok, ms)| (tok.to_string(), format!("{ms:.3}")));
            log::info!("{} size {size}: max context {} tokens", method.name(), budget.max_context);
            writeln!(
                csv,
                "{},{size},{t},{},{n},{c},{},{},{},{},{},{tokens},{ms},{seed},{hash}",
                kind.name(),
                method.name(),
                budget.max_context,
                budget.max_high,
                budget.max_low,
                budget.per_episode,
                args.episodes
            )
            .expect("string write");
        }
    }
    let out = args.out.clone().unwrap_or_else(|| config.paths.reports.join("bench.csv"));
    ensure_parent(&out)?;
    std::fs::write(&out, csv)?;
    println!("{}", out.display());
    Ok(())
}
