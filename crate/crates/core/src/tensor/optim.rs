//! Adam with decoupled weight decay, global-norm clipping and linear warmup.

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// Per-parameter moments plus the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    /// Zero moments for parameters of the given element counts.
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            t: 0,
        }
    }

    pub fn for_store(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let sizes: Vec<usize> = store.iter().map(|(_, _, t)| t.numel()).collect();
        Self::new(config, &sizes)
    }
}

/// One bias-corrected Adam update at learning rate `lr`.
///
/// Weight decay shrinks each parameter by `(1 - lr * weight_decay)` before
/// the adaptive step.
pub fn adam_step<T: Scalar>(params: &mut [&mut [T]], grads: &[&[T]], state: &mut AdamState<T>, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(Error::ShapeMismatch(format!(
                "adam slot {i}: param {} grad {} moments {}",
                p.len(),
                g.len(),
                state.m[i].len()
            )));
        }
    }
    state.t += 1;
    let c = state.config;
    let t = state.t as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
    let (ob1, ob2) = (T::one() - b1, T::one() - b2);
    let decay = T::from_f64_lossy(1.0 - lr * c.weight_decay);
    let step = T::from_f64_lossy(lr / bc1);
    let inv_bc2 = T::from_f64_lossy(1.0 / bc2);
    let eps = T::from_f64_lossy(c.eps);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.len() {
            m[j] = b1 * m[j] + ob1 * g[j];
            v[j] = b2 * v[j] + ob2 * g[j] * g[j];
            p[j] *= decay;
            p[j] -= step * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Applies [`adam_step`] to every parameter in the store using its `grad`.
/// Missing gradients count as zero.
pub fn adam_step_store<T: Scalar>(store: &mut ParamStore<T>, state: &mut AdamState<T>, lr: f64) -> Result<()> {
    let mut params: Vec<&mut [T]> = Vec::with_capacity(store.len());
    let mut grads: Vec<Vec<T>> = Vec::with_capacity(store.len());
    for t in store.tensors_mut() {
        let Tensor { data, grad, .. } = t;
        grads.push(grad.clone().unwrap_or_else(|| vec![T::zero(); data.len()]));
        params.push(data.as_mut_slice());
    }
    let grad_refs: Vec<&[T]> = grads.iter().map(Vec::as_slice).collect();
    adam_step(&mut params, &grad_refs, state, lr)
}

/// Global L2 norm of a set of gradients.
pub fn global_norm<T: Scalar>(grads: &[&[T]]) -> f64 {
    grads.iter().flat_map(|g| g.iter()).map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt()
}

/// Scales all gradients by `max_norm / norm` when their global norm exceeds
/// `max_norm`. Returns the norm measured before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [&mut [T]], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.iter()).map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::from_f64_lossy(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Clips the `grad` buffers of a parameter store in place.
pub fn clip_store_grads<T: Scalar>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let ids: Vec<_> = store.ids().collect();
    let mut bufs: Vec<Vec<T>> = ids.iter().map(|&id| store.get_mut(id).grad.take().unwrap_or_default()).collect();
    let norm = {
        let mut refs: Vec<&mut [T]> = bufs.iter_mut().map(Vec::as_mut_slice).collect();
        clip_global_norm(&mut refs, max_norm)
    };
    for (id, b) in ids.into_iter().zip(bufs) {
        store.get_mut(id).grad = Some(b);
    }
    norm
}

/// Linear warmup from zero to `base_lr` over `warmup_steps`; `step` counts
/// optimizer updates starting at 1.
pub fn warmup_lr(base_lr: f64, step: u64, warmup_steps: u64) -> f64 {
    if warmup_steps == 0 {
        return base_lr;
    }
    base_lr * (step.min(warmup_steps) as f64 / warmup_steps as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_without_decay_is_fixed_point() {
        let cfg = AdamConfig { weight_decay: 0.0, ..Default::default() };
        let mut state = AdamState::<f32>::new(cfg, &[3]);
        let mut p = vec![0.5f32, -1.0, 2.0];
        let before = p.clone();
        adam_step(&mut [p.as_mut_slice()], &[&[0.0, 0.0, 0.0]], &mut state, 1e-4).unwrap();
        assert_eq!(p, before);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With g = 1 the bias-corrected moments are both exactly 1.
        let cfg = AdamConfig { weight_decay: 0.0, ..Default::default() };
        let mut state = AdamState::<f64>::new(cfg, &[1]);
        let mut p = vec![0.3f64];
        adam_step(&mut [p.as_mut_slice()], &[&[1.0]], &mut state, 1e-4).unwrap();
        assert!((p[0] - 0.3 + 1e-4).abs() < 1e-8, "{}", p[0]);
    }

    #[test]
    fn identical_calls_are_bitwise_identical() {
        let cfg = AdamConfig::default();
        let run = || {
            let mut state = AdamState::<f32>::new(cfg, &[2]);
            let mut p = vec![0.1f32, 0.2];
            for _ in 0..3 {
                adam_step(&mut [p.as_mut_slice()], &[&[0.5, -0.25]], &mut state, 1e-3).unwrap();
            }
            (p, state)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(sa, sb);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut state = AdamState::<f32>::new(AdamConfig::default(), &[2]);
        let mut p = vec![0.0f32; 3];
        assert!(adam_step(&mut [p.as_mut_slice()], &[&[0.0, 0.0, 0.0]], &mut state, 1e-3).is_err());
        assert!(adam_step(&mut [p.as_mut_slice()], &[&[0.0, 0.0]], &mut state, 1e-3).is_err());
    }

    #[test]
    fn clip_examples() {
        let mut g = vec![0.3f64, 0.4];
        let n = clip_global_norm(&mut [g.as_mut_slice()], 0.25);
        assert!((n - 0.5).abs() < 1e-12);
        assert!((g[0] - 0.15).abs() < 1e-12 && (g[1] - 0.20).abs() < 1e-12);

        let mut g = vec![0.1f64, 0.1];
        clip_global_norm(&mut [g.as_mut_slice()], 0.25);
        assert_eq!(g, vec![0.1, 0.1]);

        let mut g = vec![0.0f64; 4];
        clip_global_norm(&mut [g.as_mut_slice()], 0.25);
        assert_eq!(g, vec![0.0; 4]);
    }

    #[test]
    fn warmup_schedule_is_linear() {
        assert!((warmup_lr(1e-4, 50_000, 100_000) - 0.5e-4).abs() < 1e-9);
        assert_eq!(warmup_lr(1e-4, 200_000, 100_000), 1e-4);
        assert_eq!(warmup_lr(1e-4, 7, 0), 1e-4);
    }
}
