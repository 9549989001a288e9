//! GPT-style causal decoder stack shared by every sequence model here.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub embed_dim: usize,
    pub max_tokens: usize,
    pub dropout_p: f64,
    #[serde(default)]
    pub activation: Activation,
    /// Per-head width. Defaults to `embed_dim / n_heads` (rounded down), so
    /// head counts that do not divide the width still get equal heads.
    #[serde(default)]
    pub head_dim: Option<usize>,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            n_layers: 3,
            n_heads: 3,
            embed_dim: 128,
            max_tokens: 4096,
            dropout_p: 0.1,
            activation: Activation::Relu,
            head_dim: None,
        }
    }
}

impl TransformerConfig {
    pub fn head_dim(&self) -> usize {
        self.head_dim.unwrap_or(self.embed_dim / self.n_heads.max(1))
    }

    /// Width of the concatenated heads.
    pub fn attn_width(&self) -> usize {
        self.n_heads * self.head_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.n_heads == 0 || self.head_dim() == 0 {
            return Err(Error::InvalidConfig(format!(
                "embed_dim {} with {} heads leaves no head width",
                self.embed_dim, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidConfig(format!("dropout_p {} not in [0, 1)", self.dropout_p)));
        }
        if self.max_tokens == 0 {
            return Err(Error::InvalidConfig("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// `x @ w + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let w = store.add_linear_weight(format!("{name}.w"), fan_in, fan_out, rng);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[dim], T::one()));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]));
        Self { gamma, beta }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, Self::EPS)
    }
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    attn: AttentionParams,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Multi-head causal self-attention over `batch` sequences of `len` tokens.
///
/// `x` is `[batch * len, embed_dim]`; position `i` only sees `j <= i`.
pub fn causal_self_attention<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &AttentionParams,
    config: &TransformerConfig,
    x: Var,
    batch: usize,
    len: usize,
) -> Result<Var> {
    if len == 0 {
        return Err(Error::MalformedSequence("empty token sequence".into()));
    }
    if len > config.max_tokens {
        return Err(Error::ContextOverflow { len, max: config.max_tokens });
    }
    let q = params.q.forward(g, store, x)?;
    let k = params.k.forward(g, store, x)?;
    let v = params.v.forward(g, store, x)?;
    let heads = g.causal_attention(q, k, v, batch, len, config.n_heads, config.head_dim())?;
    params.out.forward(g, store, heads)
}

/// Pre-norm decoder stack with a final layer norm.
#[derive(Clone, Debug)]
pub struct Transformer {
    pub config: TransformerConfig,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
}

impl Transformer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, prefix: &str, config: TransformerConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let w = config.attn_width();
        let blocks = (0..config.n_layers)
            .map(|l| {
                let p = format!("{prefix}.h{l}");
                Block {
                    ln1: LayerNorm::new(store, &format!("{p}.ln1"), d),
                    attn: AttentionParams {
                        q: Linear::new(store, &format!("{p}.attn.q"), d, w, rng),
                        k: Linear::new(store, &format!("{p}.attn.k"), d, w, rng),
                        v: Linear::new(store, &format!("{p}.attn.v"), d, w, rng),
                        out: Linear::new(store, &format!("{p}.attn.out"), w, d, rng),
                    },
                    ln2: LayerNorm::new(store, &format!("{p}.ln2"), d),
                    fc1: Linear::new(store, &format!("{p}.mlp.fc1"), d, 4 * d, rng),
                    fc2: Linear::new(store, &format!("{p}.mlp.fc2"), 4 * d, d, rng),
                }
            })
            .collect();
        let ln_f = LayerNorm::new(store, &format!("{prefix}.ln_f"), d);
        Ok(Self { config, blocks, ln_f })
    }

    /// Attention parameters of one layer.
    pub fn attention(&self, layer: usize) -> &AttentionParams {
        &self.blocks[layer].attn
    }

    /// Runs the stack on `[batch * len, embed_dim]` embedded tokens.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, batch: usize, len: usize) -> Result<Var> {
        let c = &self.config;
        if len > c.max_tokens {
            return Err(Error::ContextOverflow { len, max: c.max_tokens });
        }
        if g.value(x).numel() != batch * len * c.embed_dim {
            return Err(Error::ShapeMismatch(format!(
                "transformer input {:?} for batch {batch} len {len} dim {}",
                g.shape(x),
                c.embed_dim
            )));
        }
        let counters = g.counters_mut();
        counters.token_positions += (batch * len) as u64;
        counters.transformer_calls += 1;
        let mut h = x;
        for block in &self.blocks {
            let a = block.ln1.forward(g, store, h)?;
            let a = causal_self_attention(g, store, &block.attn, c, a, batch, len)?;
            let a = g.dropout(a, c.dropout_p);
            h = g.add(h, a)?;
            let m = block.ln2.forward(g, store, h)?;
            let m = block.fc1.forward(g, store, m)?;
            let m = match c.activation {
                Activation::Relu => g.relu(m),
            };
            let m = block.fc2.forward(g, store, m)?;
            let m = g.dropout(m, c.dropout_p);
            h = g.add(h, m)?;
        }
        self.ln_f.forward(g, store, h)
    }
}

/// Learned absolute position table indexed by token position.
#[derive(Clone, Debug)]
pub struct PositionEmbedding {
    pub table: ParamId,
    pub max_tokens: usize,
}

impl PositionEmbedding {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, max_tokens: usize, dim: usize, rng: &mut R) -> Self {
        let table = store.add(name, Tensor::randn(&[max_tokens, dim], 0.02, rng));
        Self { table, max_tokens }
    }

    /// Adds positions `0..len` to each of `batch` sequences in `x`.
    pub fn add<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, batch: usize, len: usize) -> Result<Var> {
        if len > self.max_tokens {
            return Err(Error::ContextOverflow { len, max: self.max_tokens });
        }
        let table = g.param(store, self.table);
        let idx: Vec<usize> = (0..batch).flat_map(|_| 0..len).collect();
        let pos = g.gather_rows(table, &idx)?;
        g.add(x, pos)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(n_layers: usize, heads: usize, dim: usize) -> (ParamStore<f64>, Transformer) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let cfg = TransformerConfig { n_layers, n_heads: heads, embed_dim: dim, max_tokens: 64, dropout_p: 0.0, ..Default::default() };
        let t = Transformer::new(&mut store, "t", cfg, &mut rng).unwrap();
        (store, t)
    }

    #[test]
    fn default_head_split_for_three_heads() {
        let c = TransformerConfig::default();
        assert_eq!(c.head_dim(), 42);
        assert_eq!(c.attn_width(), 126);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn overflow_is_reported() {
        let (store, t) = small(1, 1, 4);
        let mut g = Graph::<f64>::inference();
        let x = g.input(Tensor::zeros(&[65, 4]));
        let err = t.forward(&mut g, &store, x, 1, 65).unwrap_err();
        assert!(err.to_string().starts_with("context overflow"));
    }

    #[test]
    fn zero_layers_is_final_norm_only() {
        let (store, t) = small(0, 1, 4);
        let mut g = Graph::<f64>::inference();
        let x = g.input(Tensor::new(&[2, 4], vec![1.0, 2.0, 3.0, 4.0, 0.0, -1.0, 5.0, 2.0]).unwrap());
        let y = t.forward(&mut g, &store, x, 1, 2).unwrap();
        let gamma = g.input(Tensor::full(&[4], 1.0));
        let beta = g.input(Tensor::zeros(&[4]));
        let expect = g.layer_norm(x, gamma, beta, LayerNorm::EPS).unwrap();
        assert_eq!(g.value(y), g.value(expect));
    }

    #[test]
    fn single_token_attention_is_projected_value() {
        let (store, t) = small(1, 2, 4);
        let mut g = Graph::<f64>::inference();
        let x = g.input(Tensor::new(&[1, 4], vec![0.3, -0.2, 0.9, 0.1]).unwrap());
        let attn = causal_self_attention(&mut g, &store, t.attention(0), &t.config, x, 1, 1).unwrap();
        let v = t.attention(0).v.forward(&mut g, &store, x).unwrap();
        let expect = t.attention(0).out.forward(&mut g, &store, v).unwrap();
        for (a, b) in g.value(attn).data().iter().zip(g.value(expect).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
