//! Acceptance suite: one PASS/FAIL line per criterion.

mod common;

use std::io::Write as _;
use std::process::ExitCode;
use std::time::Instant;

use idt_core::data::{collect_dataset, demonstrations, read_dataset, write_dataset, CollectorConfig, DatasetFile};
use idt_core::env::{sample_tasks, EnvKind, GridTask};
use idt_core::eval::{prefill_context, rollout_flat_baseline, rollout_idt, rollout_idt_from, token_accounting, EvalConfig, EvalReport, Method};
use idt_core::model::train::{Histories, TrainConfig, Trainer};
use idt_core::model::{
    load_checkpoint, save_checkpoint, ActionSpace, FlatConfig, FlatLayout, FlatModel, HighBatch, IdtConfig, IdtModel, LowBatch, ObsSpace, ReviewBatch,
};
use idt_core::sequence::{compute_rtg, sort_ascending, token_count, TokenMethod};
use idt_core::tensor::{Graph, Tensor};
use idt_core::transformer::TransformerConfig;
use idt_core::Result;

type Verdict = Result<(bool, String)>;

const GRID: usize = 9;
const TRAIN_TASKS: usize = 40;
const TEST_TASKS: usize = 5;
const EVAL_SEEDS: u64 = 5;
const EPISODES: usize = 50;

fn train_config(max_iters: u64, seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        lr: 1e-3,
        warmup_steps: 50,
        grad_clip: 0.25,
        weight_decay: 1e-4,
        max_iters,
        low_windows_per_chain: Some(8),
        seed,
        ..Default::default()
    }
}

const MAIN_ITERS: u64 = 2000;

fn report(id: usize, name: &str, started: Instant, verdict: Verdict) -> bool {
    let secs = started.elapsed().as_secs_f64();
    let (pass, detail) = verdict.unwrap_or_else(|e| (false, format!("error: {e}")));
    println!("criterion {id:>2} {}: {name}: {detail} [{secs:.1} s]", if pass { "PASS" } else { "FAIL" });
    std::io::stdout().flush().ok();
    pass
}

fn gradient_integrity() -> Verdict {
    let mut worst_op = (0.0f64, "");
    for case in common::op_cases() {
        let e = common::op_error(&case)?;
        if !(e < worst_op.0) {
            worst_op = (e, case.name);
        }
    }
    let composite = common::composite_error(60)?;
    let pass = worst_op.0 < common::OP_TOL && composite < common::COMPOSITE_TOL;
    Ok((pass, format!("worst op {} rel err {:.2e} (< 1e-4), composite rel err {composite:.2e} (< 1e-3)", worst_op.1, worst_op.0)))
}

fn causality() -> Verdict {
    let mut worst = 0.0f64;
    for seed in 0..100 {
        worst = worst.max(common::causality_instance(seed)?);
    }
    Ok((worst == 0.0, format!("100 instances, largest change at past positions {worst:e}")))
}

fn sequence_construction() -> Verdict {
    let eps = common::random_episodes(10, 20, GRID, 3);
    for e in &eps {
        let r: Vec<f64> = e.rewards.iter().map(|&v| f64::from(v)).collect();
        let rtg = compute_rtg(&r, 17.0);
        if rtg[0] != 17.0 || (1..r.len()).any(|t| rtg[t - 1] - rtg[t] != r[t - 1]) {
            return Ok((false, "return-to-go does not telescope".into()));
        }
    }
    let refs: Vec<_> = eps.iter().rev().collect();
    let chain = sort_ascending(&refs)?;
    let best = eps.iter().map(|e| f64::from(e.total_return)).fold(f64::MIN, f64::max);
    let ascending = chain.episodes.windows(2).all(|w| w[0].total_return <= w[1].total_return);
    let shared = chain.target == best && chain.rtg.iter().all(|r| r[0] == best);
    if !(ascending && shared) {
        return Ok((false, format!("chain ascending {ascending}, shared target {shared}")));
    }
    let cases = [(10, 20, 5), (4, 200, 10), (3, 17, 4), (1, 9, 9), (2, 30, 1)];
    for (n, t, c) in cases {
        let (high, low, review) = common::instrumented_context_tokens(n, t, c)?;
        let want = (5 * n * t.div_ceil(c), 4 * c, 2 * c);
        let formula = (token_count(TokenMethod::IdtHigh, n, t, c), token_count(TokenMethod::IdtLow, n, t, c), token_count(TokenMethod::IdtReview, n, t, c));
        if (high as usize, low as usize, review as usize) != want || formula != want {
            return Ok((false, format!("n {n} T {t} c {c}: counted {high}/{low}/{review}, expected {want:?}")));
        }
    }
    Ok((true, format!("RTG telescopes, chain sorted with shared target {best}, token counts exact for {} (n, T, c) cases", cases.len())))
}

fn connectivity() -> Verdict {
    let model = IdtModel::<f32>::new(IdtConfig::default(), 4)?;
    let eps = common::random_episodes(2 * model.config.n, model.config.episode_len, GRID, 5);
    let chains = common::chains(&eps, model.config.n);
    let norms = common::module_grad_norms(&model, &chains, 6)?;
    let pass = norms.iter().all(|(_, n)| *n > 0.0 && n.is_finite());
    let detail = norms.iter().map(|(m, n)| format!("{}{n:.3e}", m.replace('.', " |g| "))).collect::<Vec<_>>().join(", ");
    Ok((pass, detail))
}

fn no_update() -> Verdict {
    let model = IdtModel::<f32>::new(IdtConfig::default(), 7)?;
    let task = GridTask::darkroom(GRID, (2, 6), 0);
    let before = model.store.fingerprint();
    let r = rollout_idt(&model, &task, &EvalConfig { episodes: EPISODES, ..Default::default() })?;
    let after = model.store.fingerprint();
    Ok((before == after && r.returns.len() == EPISODES, format!("{} episodes, parameter hash {}... unchanged: {}", r.returns.len(), &before[..12], before == after)))
}

fn token_budget() -> Verdict {
    let (size, n) = (40, 4);
    let t = EnvKind::Darkroom.default_episode_len(size);
    let c = EnvKind::default_decision_interval(size);
    let ad = token_accounting(Method::FlatAd, n, t, c);
    let idt = token_accounting(Method::Idt, n, t, c);
    let ratio = ad.max_context as f64 / idt.max_context as f64;

    let tf = TransformerConfig { max_tokens: 5 * n * t, ..Default::default() };
    let task = GridTask { episode_len: t, ..GridTask::darkroom(size, (30, 9), 0) };
    let obs = ObsSpace::Grid { size };
    let actions = ActionSpace::Discrete { n: 5 };
    let scale = EnvKind::Darkroom.default_target_return(size);
    let eval = EvalConfig { episodes: n, ..Default::default() };
    let idt_model = IdtModel::<f32>::new(IdtConfig { transformer: tf.clone(), z_dim: 128, c, n, episode_len: t, obs, actions, return_scale: scale }, 0)?;
    let flat_model = FlatModel::<f32>::new(FlatConfig { transformer: tf, layout: FlatLayout::Ad, n, episode_len: t, obs, actions, return_scale: scale }, 0)?;
    let idt_run = rollout_idt(&idt_model, &task, &eval)?;
    let ad_run = rollout_flat_baseline(&flat_model, &task, &eval)?;
    let full = |r: &EvalReport| r.wall_ms[n - 1];
    let wall = full(&ad_run) / full(&idt_run);
    let exact = ad.max_context == 4 * n * t && ad_run.max_context() == ad.max_context && idt_run.max_context() == idt.max_context;
    let pass = exact && ratio >= 5.0 && wall >= 3.0;
    Ok((
        pass,
        format!(
            "T {t} n {n} c {c}: flat-AD {} vs IDT {} max context tokens ({ratio:.1}x, >= 5x); full-context episode {:.0} ms vs {:.0} ms ({wall:.1}x, >= 3x)",
            ad.max_context,
            idt.max_context,
            full(&ad_run),
            full(&idt_run)
        ),
    ))
}

fn small_pipeline(dir: &std::path::Path) -> Result<(Vec<u8>, Vec<u64>, Vec<f64>)> {
    let (train, test) = sample_tasks(EnvKind::Darkroom, GRID, 4, 2, 10)?;
    let data = collect_dataset(&train, &CollectorConfig { total_steps: 4_000, ..Default::default() }, 11)?;
    let path = dir.join("d.idt");
    write_dataset(&path, &data)?;
    let bytes = std::fs::read(&path)?;
    let data = read_dataset(&path)?;
    let hist = Histories::from_dataset(&data)?;
    let cfg = IdtConfig {
        transformer: TransformerConfig { n_layers: 1, n_heads: 2, embed_dim: 32, max_tokens: 256, ..Default::default() },
        z_dim: 16,
        n: 4,
        ..IdtConfig::default()
    };
    let mut model = IdtModel::<f32>::new(cfg, 12)?;
    let tc = TrainConfig { batch_size: 4, lr: 1e-3, warmup_steps: 20, max_iters: 500, seed: 13, ..Default::default() };
    let mut trainer = Trainer::new(tc, &model.store)?;
    let mut losses = Vec::new();
    while trainer.step < 500 {
        losses.push(trainer.idt_step(&mut model, &hist)?.loss.to_bits());
    }
    let mut returns = Vec::new();
    for task in &test {
        let r = rollout_idt(&model, task, &EvalConfig { episodes: 5, seed: 14, sample_actions: true, ..Default::default() })?;
        returns.extend(r.returns);
    }
    save_checkpoint(dir.join("m.idtc"), &model, Some(&trainer))?;
    Ok((bytes, losses, returns))
}

fn forward_outputs(model: &IdtModel<f32>) -> Result<Vec<f32>> {
    let cfg = &model.config;
    let (od, ad, steps) = (cfg.obs.dim(), cfg.actions.dim(), cfg.n * cfg.segments());
    let mut rng = common::rng(15);
    let mut rand = |len: usize| Tensor::<f32>::randn(&[len], 1.0, &mut rng).into_data();
    let mut g = Graph::inference();
    let hb = HighBatch { seqs: 1, steps, rtg: rand(steps), obs: rand(steps * od), reward_sum: rand(steps), done: rand(steps) };
    let z = g.constant(Tensor::new(&[steps, cfg.z_dim], rand(steps * cfg.z_dim))?);
    let (mu, ls) = model.make(&mut g, &hb, z)?;
    let lb = LowBatch { windows: 2, len: cfg.c, obs: rand(2 * cfg.c * od), act: rand(2 * cfg.c * ad), rew: rand(2 * cfg.c) };
    let zl = g.constant(Tensor::new(&[2, cfg.z_dim], rand(2 * cfg.z_dim))?);
    let logits = model.decide(&mut g, &lb, zl)?;
    let rb = ReviewBatch { windows: 2, len: cfg.c, obs: rand(2 * cfg.c * od), act: rand(2 * cfg.c * ad) };
    let zr = model.review(&mut g, &rb)?;
    Ok([mu, ls, logits, zr].iter().flat_map(|v| g.value(*v).data().to_vec()).collect())
}

fn determinism() -> Verdict {
    let a = tempfile::tempdir()?;
    let b = tempfile::tempdir()?;
    let first = small_pipeline(a.path())?;
    let second = small_pipeline(b.path())?;
    let same_data = first.0 == second.0;
    let same_losses = first.1 == second.1;
    let same_returns = first.2.iter().map(|r| r.to_bits()).eq(second.2.iter().map(|r| r.to_bits()));
    let ck_a = std::fs::read(a.path().join("m.idtc"))?;
    let ck_b = std::fs::read(b.path().join("m.idtc"))?;

    let (loaded, trainer) = load_checkpoint::<f32, IdtModel<f32>>(a.path().join("m.idtc"))?;
    let (again, _) = load_checkpoint::<f32, IdtModel<f32>>(b.path().join("m.idtc"))?;
    save_checkpoint(a.path().join("copy.idtc"), &loaded, trainer.as_ref())?;
    let (copy, _) = load_checkpoint::<f32, IdtModel<f32>>(a.path().join("copy.idtc"))?;
    let outputs = forward_outputs(&loaded)?;
    let round_trip = outputs.iter().map(|v| v.to_bits()).eq(forward_outputs(&copy)?.iter().map(|v| v.to_bits()))
        && outputs.iter().map(|v| v.to_bits()).eq(forward_outputs(&again)?.iter().map(|v| v.to_bits()))
        && copy.store.fingerprint() == loaded.store.fingerprint();
    let pass = same_data && same_losses && same_returns && ck_a == ck_b && round_trip;
    Ok((
        pass,
        format!(
            "dataset bytes equal {same_data}, 500 losses bit-equal {same_losses}, {} eval returns bit-equal {same_returns}, checkpoints equal {}, round-trip outputs exact {round_trip}",
            first.2.len(),
            ck_a == ck_b
        ),
    ))
}

struct Fixture {
    data: DatasetFile,
    test: Vec<GridTask>,
}

impl Fixture {
    fn new() -> Result<Self> {
        let (train, test) = sample_tasks(EnvKind::Darkroom, GRID, TRAIN_TASKS, TEST_TASKS, 0)?;
        let data = collect_dataset(&train, &CollectorConfig::default(), 1)?;
        Ok(Self { data, test })
    }

    fn train(&self, n: usize, seed: u64) -> Result<IdtModel<f32>> {
        let hist = Histories::from_dataset(&self.data)?;
        let mut model = IdtModel::<f32>::new(IdtConfig { n, ..IdtConfig::default() }, seed)?;
        let mut trainer = Trainer::new(train_config(MAIN_ITERS, seed), &model.store)?;
        while trainer.step < MAIN_ITERS {
            let m = trainer.idt_step(&mut model, &hist)?;
            if m.step % 100 == 0 {
                eprintln!("  n = {n}: step {} loss {:.4}", m.step, m.loss);
            }
        }
        Ok(model)
    }

    /// Return curves per `(task, seed)`, in task-major order.
    fn evaluate(&self, model: &IdtModel<f32>, context: usize, prefill: bool) -> Result<Vec<EvalReport>> {
        let mut out = Vec::new();
        for task in &self.test {
            for seed in 0..EVAL_SEEDS {
                let cfg = eval_config(seed, context);
                let r = if prefill {
                    let demos = demonstrations(task, context - 1, 0.0, seed)?;
                    let ctx = prefill_context(model, task, &demos, &cfg)?;
                    rollout_idt_from(model, task, &cfg, ctx)?
                } else {
                    rollout_idt(model, task, &cfg)?
                };
                out.push(r);
            }
        }
        Ok(out)
    }
}

fn eval_config(seed: u64, context: usize) -> EvalConfig {
    EvalConfig { episodes: EPISODES, context_episodes: Some(context), seed, ..Default::default() }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn curve(reports: &[&EvalReport]) -> Vec<f64> {
    (0..EPISODES).map(|e| mean(reports.iter().map(|r| r.returns[e]))).collect()
}

fn in_context_improvement(fx: &Fixture, cold: &[EvalReport]) -> Verdict {
    let c = curve(&cold.iter().collect::<Vec<_>>());
    let first = mean(c[..10].iter().copied());
    let last = mean(c[40..].iter().copied());
    let best = mean(cold.iter().map(|r| r.best_return));
    let spawn = (GRID / 2, GRID / 2);
    let oracle = mean(fx.test.iter().map(|t| (t.episode_len - (t.goal.0.abs_diff(spawn.0) + t.goal.1.abs_diff(spawn.1))) as f64));
    let pass = last - first >= 3.0 && best >= 0.5 * oracle;
    Ok((
        pass,
        format!("episodes 1-10 mean {first:.2}, 41-50 mean {last:.2} (gain {:.2}, >= 3.0); mean best {best:.2} vs 0.5 x oracle {:.2}", last - first, 0.5 * oracle),
    ))
}

fn context_ablation(fx: &Fixture, model: &IdtModel<f32>) -> Verdict {
    let four = fx.evaluate(model, 4, false)?;
    let single = fx.train(1, 21)?;
    let one = fx.evaluate(&single, 1, false)?;
    let b4 = mean(four.iter().map(|r| r.best_return));
    let b1 = mean(one.iter().map(|r| r.best_return));
    Ok((b4 - b1 >= 2.0, format!("mean best return n = 4: {b4:.2}, n = 1: {b1:.2} (gap {:.2}, >= 2.0)", b4 - b1)))
}

/// First episode (1-based) whose return reaches `target`; one past the end
/// when it never does.
fn episodes_to_reach(c: &[f64], target: f64) -> usize {
    c.iter().position(|&v| v >= target).map_or(c.len() + 1, |i| i + 1)
}

fn demonstration_prefill(fx: &Fixture, model: &IdtModel<f32>, cold: &[EvalReport]) -> Verdict {
    let n = model.config.n;
    let warm = fx.evaluate(model, n, true)?;
    let (mut cold_eps, mut warm_eps) = (Vec::new(), Vec::new());
    for seed in 0..EVAL_SEEDS {
        let pick = |rs: &[EvalReport]| -> Vec<f64> {
            let own: Vec<&EvalReport> = rs.iter().filter(|r| r.seed == seed).collect();
            curve(&own)
        };
        let (c, w) = (pick(cold), pick(&warm));
        let target = mean(c[40..].iter().copied());
        cold_eps.push(episodes_to_reach(&c, target) as f64);
        warm_eps.push(episodes_to_reach(&w, target) as f64);
    }
    let (c, w) = (mean(cold_eps.iter().copied()), mean(warm_eps.iter().copied()));
    let drop = 1.0 - w / c;
    Ok((drop >= 0.3, format!("episodes to reach the cold-start final mean: cold {c:.1}, expert prefill {w:.1} ({:.0}% fewer, >= 30%)", 100.0 * drop)))
}

fn main() -> ExitCode {
    let mut all = true;
    let t = Instant::now();
    all &= report(1, "gradient integrity", t, gradient_integrity());
    let t = Instant::now();
    all &= report(2, "causality", t, causality());
    let t = Instant::now();
    all &= report(3, "sequence construction", t, sequence_construction());
    let t = Instant::now();
    all &= report(4, "end-to-end connectivity", t, connectivity());
    let t = Instant::now();
    all &= report(5, "no-update evaluation", t, no_update());
    let t = Instant::now();
    all &= report(8, "token budget", t, token_budget());
    let t = Instant::now();
    all &= report(10, "determinism and persistence", t, determinism());

    let t = Instant::now();
    let heavy = Fixture::new().and_then(|fx| {
        let model = fx.train(IdtConfig::default().n, 0)?;
        let cold = fx.evaluate(&model, model.config.n, false)?;
        Ok((fx, model, cold))
    });
    match heavy {
        Ok((fx, model, cold)) => {
            all &= report(6, "in-context improvement", t, in_context_improvement(&fx, &cold));
            let t = Instant::now();
            all &= report(7, "context-size ablation", t, context_ablation(&fx, &model));
            let t = Instant::now();
            all &= report(9, "demonstration prefill", t, demonstration_prefill(&fx, &model, &cold));
        }
        Err(e) => {
            for (id, name) in [(6, "in-context improvement"), (7, "context-size ablation"), (9, "demonstration prefill")] {
                all &= report(id, name, t, Err(idt_core::Error::InvalidConfig(format!("fixture failed: {e}"))));
            }
        }
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
