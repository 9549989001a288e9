//! Trainable sequence models: the three-module IDT and the flat AD/AT
//! baselines, with their training loops and checkpoint format.

mod checkpoint;
mod flat;
mod idt;
pub mod train;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_matching, read_checkpoint, save_checkpoint, save_checkpoint_with_meta, Checkpoint, Checkpointable, ModelKind, TrainState,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use flat::{FlatBatch, FlatConfig, FlatLayout, FlatModel};
pub use idt::{HighBatch, IdtConfig, IdtModel, LowBatch, ReviewBatch, LOG_SIGMA_MAX, LOG_SIGMA_MIN, MODULE_PREFIXES};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::Pos;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use crate::transformer::{LayerNorm, Linear, PositionEmbedding};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ObsSpace {
    /// `(x, y)` on a square grid, one-hot per axis.
    Grid { size: usize },
    Vector { dim: usize },
}

impl ObsSpace {
    pub fn dim(self) -> usize {
        match self {
            ObsSpace::Grid { size } => 2 * size,
            ObsSpace::Vector { dim } => dim,
        }
    }

    pub(crate) fn push_grid<T: Scalar>(self, out: &mut Vec<T>, pos: Pos) {
        let ObsSpace::Grid { size } = self else {
            panic!("grid observation pushed into a vector space");
        };
        let start = out.len();
        out.resize(start + 2 * size, T::zero());
        out[start + pos.0] = T::one();
        out[start + size + pos.1] = T::one();
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ActionSpace {
    Discrete { n: usize },
    Continuous { dim: usize },
}

impl ActionSpace {
    /// Width of the action input features and of the prediction head.
    pub fn dim(self) -> usize {
        match self {
            ActionSpace::Discrete { n } => n,
            ActionSpace::Continuous { dim } => dim,
        }
    }

    pub(crate) fn push_discrete<T: Scalar>(self, out: &mut Vec<T>, a: usize) {
        let start = out.len();
        out.resize(start + self.dim(), T::zero());
        out[start + a] = T::one();
    }
}

/// Linear input projection followed by layer norm.
#[derive(Clone, Debug)]
pub(crate) struct Embed {
    lin: Linear,
    ln: LayerNorm,
    in_dim: usize,
}

impl Embed {
    pub(crate) fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, in_dim: usize, dim: usize, rng: &mut R) -> Self {
        let lin = Linear::new(store, &format!("{name}.lin"), in_dim, dim, rng);
        if in_dim == 1 {
            store.get_mut(lin.b).data_mut().copy_from_slice(Tensor::<T>::uniform(&[dim], 1.0, rng).data());
        }
        let ln = LayerNorm::new(store, &format!("{name}.ln"), dim);
        Self { lin, ln, in_dim }
    }

    pub(crate) fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.lin.forward(g, store, x)?;
        self.ln.forward(g, store, h)
    }

    /// Embeds raw feature rows.
    pub(crate) fn forward_data<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, data: Vec<T>) -> Result<Var> {
        if data.is_empty() || data.len() % self.in_dim != 0 {
            return Err(Error::ShapeMismatch(format!("{} values for {}-wide features", data.len(), self.in_dim)));
        }
        let rows = data.len() / self.in_dim;
        let x = g.constant(Tensor::new(&[rows, self.in_dim], data)?);
        self.forward(g, store, x)
    }
}

/// Where a modality's rows come from when tokens are interleaved.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Rows {
    /// One row per `(sequence, step)`.
    PerStep,
    /// One row per sequence, repeated at every step.
    PerSequence,
}

/// Interleaves embedded modalities with a fixed period and adds positions.
///
/// Modality `k` of step `s` in sequence `b` lands at row
/// `(b * steps + s) * period + k`, where `period = parts.len()`.
pub(crate) fn interleave<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    parts: &[(Var, Rows)],
    pos: &PositionEmbedding,
    batch: usize,
    steps: usize,
) -> Result<Var> {
    let period = parts.len();
    let mut offsets = Vec::with_capacity(period);
    let mut total = 0;
    for (v, rows) in parts {
        let expect = match rows {
            Rows::PerStep => batch * steps,
            Rows::PerSequence => batch,
        };
        if g.value(*v).rows() != expect {
            return Err(Error::MalformedSequence(format!("modality has {} rows, layout needs {expect}", g.value(*v).rows())));
        }
        offsets.push(total);
        total += expect;
    }
    let mut idx = Vec::with_capacity(batch * steps * period);
    for b in 0..batch {
        for s in 0..steps {
            for (k, (_, rows)) in parts.iter().enumerate() {
                idx.push(
                    offsets[k]
                        + match rows {
                            Rows::PerStep => b * steps + s,
                            Rows::PerSequence => b,
                        },
                );
            }
        }
    }
    let vars: Vec<Var> = parts.iter().map(|(v, _)| *v).collect();
    let all = g.concat_rows(&vars)?;
    let seq = g.gather_rows(all, &idx)?;
    pos.add(g, store, seq, batch, steps * period)
}

/// Row indices of modality `k` for every step of every sequence.
pub(crate) fn token_rows(batch: usize, steps: usize, period: usize, k: usize) -> Vec<usize> {
    (0..batch * steps).map(|i| i * period + k).collect()
}
