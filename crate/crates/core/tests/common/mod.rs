#![allow(dead_code)]

use idt_core::data::Trajectory;
use idt_core::model::{ActionSpace, HighBatch, IdtConfig, IdtModel, LowBatch, ObsSpace, ReviewBatch, MODULE_PREFIXES};
use idt_core::model::train::{idt_loss, DecisionSource};
use idt_core::sequence::{sort_ascending, ChainOfExperience};
use idt_core::tensor::gradcheck::{self, LossFn};
use idt_core::tensor::{Graph, ParamStore, Tensor, Var};
use idt_core::transformer::{Transformer, TransformerConfig};
use idt_core::{Graph64, Result, Scalar, Tensor64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const OP_TOL: f64 = 1e-4;
pub const COMPOSITE_TOL: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor64 {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

/// Reduces any output to a scalar with fixed random weights so every
/// element of the output gets a distinct upstream gradient.
pub fn project(g: &mut Graph64, out: Var, seed: u64) -> Result<Var> {
    let w = g.constant(randn(g.shape(out), seed ^ 0x5eed));
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

type BoxedLoss = Box<dyn Fn(&mut Graph64, &[Var]) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    pub f: BoxedLoss,
    pub inputs: Vec<Tensor64>,
    pub train: bool,
}

fn case(name: &'static str, inputs: Vec<Tensor64>, f: impl Fn(&mut Graph64, &[Var]) -> Result<Var> + 'static) -> OpCase {
    OpCase { name, f: Box::new(f), inputs, train: false }
}

/// One finite-difference case per differentiable graph operation.
pub fn op_cases() -> Vec<OpCase> {
    let mut cases = vec![
        case("matmul_shared", vec![randn(&[2, 3, 4], 1), randn(&[4, 5], 2)], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, 3)
        }),
        case("matmul_batched", vec![randn(&[2, 3, 4], 4), randn(&[2, 4, 2], 5)], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, 6)
        }),
        case("linear_bias", vec![randn(&[5, 3], 7), randn(&[3, 4], 8), randn(&[4], 9)], |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            project(g, y, 10)
        }),
        case("linear_no_bias", vec![randn(&[2, 3, 3], 11), randn(&[3, 2], 12)], |g, v| {
            let y = g.linear(v[0], v[1], None)?;
            project(g, y, 13)
        }),
        case("add_broadcast", vec![randn(&[3, 4], 14), randn(&[4], 15)], |g, v| {
            let y = g.add(v[0], v[1])?;
            project(g, y, 16)
        }),
        case("sub_broadcast", vec![randn(&[2, 3, 4], 17), randn(&[3, 4], 18)], |g, v| {
            let y = g.sub(v[0], v[1])?;
            project(g, y, 19)
        }),
        case("mul", vec![randn(&[3, 4], 20), randn(&[3, 4], 21)], |g, v| {
            let y = g.mul(v[0], v[1])?;
            project(g, y, 22)
        }),
        case("mul_broadcast", vec![randn(&[3, 4], 23), randn(&[4], 24)], |g, v| {
            let y = g.mul(v[0], v[1])?;
            project(g, y, 25)
        }),
        case("scale", vec![randn(&[6], 26)], |g, v| {
            let y = g.scale(v[0], -1.7);
            project(g, y, 27)
        }),
        case("add_scalar", vec![randn(&[6], 28)], |g, v| {
            let y = g.add_scalar(v[0], 0.3);
            let y = g.mul(y, y)?;
            project(g, y, 29)
        }),
        case("relu", vec![randn(&[4, 5], 30)], |g, v| {
            let y = g.relu(v[0]);
            project(g, y, 31)
        }),
        case("exp", vec![randn(&[4, 3], 32)], |g, v| {
            let y = g.exp(v[0]);
            project(g, y, 33)
        }),
        case("clamp", vec![randn(&[20], 34)], |g, v| {
            let y = g.clamp(v[0], -0.5, 0.7);
            project(g, y, 35)
        }),
        case("reshape", vec![randn(&[2, 6], 36)], |g, v| {
            let y = g.reshape(v[0], &[3, 4])?;
            let w = g.constant(randn(&[4, 2], 37));
            let y = g.matmul(y, w)?;
            project(g, y, 38)
        }),
        case("layer_norm", vec![randn(&[4, 6], 39), randn(&[6], 40), randn(&[6], 41)], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            project(g, y, 42)
        }),
        case("softmax", vec![randn(&[3, 5], 43)], |g, v| {
            let y = g.softmax(v[0])?;
            project(g, y, 44)
        }),
        case("causal_attention", vec![randn(&[2 * 4, 6], 45), randn(&[2 * 4, 6], 46), randn(&[2 * 4, 6], 47)], |g, v| {
            let y = g.causal_attention(v[0], v[1], v[2], 2, 4, 2, 3)?;
            project(g, y, 48)
        }),
        case("gather_rows", vec![randn(&[4, 3], 49)], |g, v| {
            let y = g.gather_rows(v[0], &[3, 0, 3, 1])?;
            project(g, y, 50)
        }),
        case("concat_rows", vec![randn(&[2, 3], 51), randn(&[3, 3], 52)], |g, v| {
            let y = g.concat_rows(&[v[0], v[1], v[0]])?;
            project(g, y, 53)
        }),
        case("sum", vec![randn(&[3, 3], 54)], |g, v| {
            let y = g.mul(v[0], v[0])?;
            Ok(g.sum(y))
        }),
        case("mean", vec![randn(&[3, 3], 55)], |g, v| {
            let y = g.exp(v[0]);
            Ok(g.mean(y))
        }),
        case("cross_entropy", vec![randn(&[4, 5], 56)], |g, v| g.cross_entropy(v[0], &[0, 4, 2, 2])),
        case("mse", vec![randn(&[3, 2], 57)], |g, v| g.mse(v[0], randn(&[6], 58).data())),
        case("gaussian_sample", vec![randn(&[3, 4], 59), randn(&[3, 4], 60)], |g, v| {
            let (z, _) = g.gaussian_sample(v[0], v[1], Some(randn(&[3, 4], 61)))?;
            project(g, z, 62)
        }),
    ];
    let mut dropout = case("dropout", vec![randn(&[5, 6], 63)], |g, v| {
        let y = g.dropout(v[0], 0.3);
        project(g, y, 64)
    });
    dropout.train = true;
    cases.push(dropout);
    cases
}

fn loss_value(f: &impl LossFn, inputs: &[Tensor64], train: bool, seed: u64) -> Result<f64> {
    let mut g = Graph::new(train, seed);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let l = f(&mut g, &vars)?;
    Ok(g.value(l).item())
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// Central differences in a training-mode graph; the graph seed fixes the
/// dropout mask across evaluations.
fn check_train_mode(f: &impl LossFn, inputs: &[Tensor64], h: f64, seed: u64) -> Result<f64> {
    let mut g = Graph::new(true, seed);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone().with_grad())).collect();
    let l = f(&mut g, &vars)?;
    let grads = g.backward(l)?;
    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.of(*v).unwrap_or_default().to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = loss_value(f, &work, true, seed)?;
            work[i].data_mut()[j] = orig - h;
            let minus = loss_value(f, &work, true, seed)?;
            work[i].data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * h);
        }
        let err = norm(analytic.iter().zip(&numeric).map(|(a, n)| a - n)) / norm(numeric.iter().copied()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

pub fn op_error(c: &OpCase) -> Result<f64> {
    if c.train {
        check_train_mode(&c.f, &c.inputs, H, 99)
    } else {
        Ok(gradcheck::check(&c.f, &c.inputs, H, 99)?.max_relative_error())
    }
}

pub fn tiny_transformer(layers: usize, heads: usize, dim: usize) -> TransformerConfig {
    TransformerConfig { n_layers: layers, n_heads: heads, embed_dim: dim, max_tokens: 64, dropout_p: 0.0, ..Default::default() }
}

pub fn composite_config() -> IdtConfig {
    IdtConfig {
        transformer: tiny_transformer(1, 2, 8),
        z_dim: 3,
        c: 2,
        n: 2,
        episode_len: 4,
        obs: ObsSpace::Grid { size: 3 },
        actions: ActionSpace::Discrete { n: 5 },
        return_scale: 4.0,
    }
}

/// Random but well-formed grid episodes.
pub fn random_episodes(count: usize, len: usize, grid: usize, seed: u64) -> Vec<Trajectory> {
    let mut r = rng(seed);
    (0..count)
        .map(|_| {
            let rewards: Vec<f32> = (0..len).map(|_| if r.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
            Trajectory {
                task_id: 0,
                observations: (0..len).map(|_| [r.random_range(0..grid) as u16, r.random_range(0..grid) as u16]).collect(),
                actions: (0..len).map(|_| r.random_range(0..5) as u16).collect(),
                total_return: rewards.iter().sum(),
                rewards,
                dones: (0..len).map(|t| t + 1 == len).collect(),
            }
        })
        .collect()
}

pub fn chains(episodes: &[Trajectory], per_chain: usize) -> Vec<ChainOfExperience<'_>> {
    episodes
        .chunks_exact(per_chain)
        .map(|c| sort_ascending(&c.iter().collect::<Vec<_>>()).expect("non-empty chain"))
        .collect()
}

fn composite_loss(model: &IdtModel<f64>, chains: &[ChainOfExperience<'_>], grad: bool) -> Result<(f64, Option<idt_core::tensor::Gradients<f64>>)> {
    let mut g = Graph::new(false, 5);
    let l = idt_loss(model, &mut g, chains, None, DecisionSource::Sampled)?;
    let v = g.value(l).item();
    Ok((v, if grad { Some(g.backward(l)?) } else { None }))
}

/// Worst relative error of the full three-module action loss over
/// parameter coordinates drawn from every module.
pub fn composite_error(samples_per_module: usize) -> Result<f64> {
    let mut model = IdtModel::<f64>::new(composite_config(), 11)?;
    let eps = random_episodes(4, 4, 3, 12);
    let ch = chains(&eps, 2);
    let (_, grads) = composite_loss(&model, &ch, true)?;
    let grads = grads.expect("gradients requested");
    let mut r = rng(13);
    let mut worst: f64 = 0.0;
    for prefix in MODULE_PREFIXES {
        let ids: Vec<_> = model.store.ids_with_prefix(prefix).collect();
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for _ in 0..samples_per_module {
            let id = ids[r.random_range(0..ids.len())];
            let j = r.random_range(0..model.store.get(id).numel());
            analytic.push(grads.param(id).map_or(0.0, |g| g[j]));
            let orig = model.store.get(id).data()[j];
            model.store.get_mut(id).data_mut()[j] = orig + H;
            let plus = composite_loss(&model, &ch, false)?.0;
            model.store.get_mut(id).data_mut()[j] = orig - H;
            let minus = composite_loss(&model, &ch, false)?.0;
            model.store.get_mut(id).data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * H));
        }
        let err = norm(analytic.iter().zip(&numeric).map(|(a, n)| a - n)) / norm(numeric.iter().copied()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Perturbs every token from a random position onward and returns the
/// largest change seen at earlier positions.
pub fn causality_instance(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let heads = r.random_range(1..=3);
    let dim = heads * r.random_range(2..=4);
    let cfg = tiny_transformer(r.random_range(1..=2), heads, dim);
    let mut store = ParamStore::<f64>::new();
    let tf = Transformer::new(&mut store, "tf", cfg, &mut r)?;
    let (batch, len) = (r.random_range(1..=3), r.random_range(2..=12));
    let x = Tensor::<f64>::randn(&[batch * len, dim], 1.0, &mut r);
    let cut = r.random_range(1..len);
    let mut y = x.clone();
    for b in 0..batch {
        for t in cut..len {
            for k in 0..dim {
                y.data_mut()[(b * len + t) * dim + k] += r.random_range(-3.0..3.0);
            }
        }
    }
    let run = |input: Tensor64| -> Result<Vec<f64>> {
        let mut g = Graph::inference();
        let v = g.input(input);
        let out = tf.forward(&mut g, &store, v, batch, len)?;
        Ok(g.value(out).data().to_vec())
    };
    let (a, b) = (run(x)?, run(y)?);
    let mut worst: f64 = 0.0;
    for bi in 0..batch {
        for t in 0..cut {
            for k in 0..dim {
                let i = (bi * len + t) * dim + k;
                worst = worst.max((a[i] - b[i]).abs());
            }
        }
    }
    Ok(worst)
}

/// Sum of squared gradient entries per module for the action loss.
pub fn module_grad_norms<T: Scalar>(model: &IdtModel<T>, chains: &[ChainOfExperience<'_>], seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut g = Graph::new(true, seed);
    let l = idt_loss(model, &mut g, chains, None, DecisionSource::Sampled)?;
    let grads = g.backward(l)?;
    Ok(MODULE_PREFIXES
        .iter()
        .map(|p| {
            let s: f64 = model
                .store
                .ids_with_prefix(p)
                .filter_map(|id| grads.param(id))
                .flat_map(|g| g.iter().map(|v| v.to_f64_lossy().powi(2)))
                .sum();
            (*p, s.sqrt())
        })
        .collect())
}

/// Token positions pushed through each decoder for one full-context call:
/// `(high level, low level, reviewing)`.
pub fn instrumented_context_tokens(n: usize, t: usize, c: usize) -> Result<(u64, u64, u64)> {
    let mut tf = tiny_transformer(1, 1, 4);
    let steps = n * t.div_ceil(c);
    tf.max_tokens = (5 * steps).max(4 * c);
    let cfg = IdtConfig { transformer: tf, z_dim: 2, c, n, episode_len: t, obs: ObsSpace::Grid { size: 2 }, actions: ActionSpace::Discrete { n: 5 }, return_scale: 1.0 };
    let model = IdtModel::<f32>::new(cfg, 0)?;
    let (od, ad) = (model.config.obs.dim(), model.config.actions.dim());

    let mut g = Graph::inference();
    let hb = HighBatch { seqs: 1, steps, rtg: vec![0.0; steps], obs: vec![0.0; steps * od], reward_sum: vec![0.0; steps], done: vec![0.0; steps] };
    let z = g.constant(Tensor::zeros(&[steps, 2]));
    model.make(&mut g, &hb, z)?;
    let high = g.counters().token_positions;

    let mut g = Graph::inference();
    let lb = LowBatch { windows: 1, len: c, obs: vec![0.0; c * od], act: vec![0.0; c * ad], rew: vec![0.0; c] };
    model.decide_with(&mut g, &lb, Tensor::zeros(&[1, 2]))?;
    let low = g.counters().token_positions;

    let mut g = Graph::inference();
    let rb = ReviewBatch { windows: 1, len: c, obs: vec![0.0; c * od], act: vec![0.0; c * ad] };
    model.review(&mut g, &rb)?;
    Ok((high, low, g.counters().token_positions))
}
