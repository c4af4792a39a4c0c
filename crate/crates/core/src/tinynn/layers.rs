//! Building blocks composed from graph operations.

use rand::Rng;

use super::graph::{Graph, Var};
use super::matrix::Matrix;
use super::params::{ParamId, ParamKind, ParameterSet};
use crate::error::NnError;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        params: &mut ParameterSet,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, NnError> {
        let weight = params.add_uniform(&format!("{name}.weight"), d_in, d_out, rng)?;
        let bias = params.add(&format!("{name}.bias"), ParamKind::Bias, Matrix::zeros(1, d_out))?;
        Ok(Self {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &ParameterSet, x: Var) -> Result<Var, NnError> {
        let w = g.param(p, self.weight);
        let b = g.param(p, self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(params: &mut ParameterSet, name: &str, dim: usize) -> Result<Self, NnError> {
        Ok(Self {
            gain: params.add(&format!("{name}.gain"), ParamKind::Norm, Matrix::filled(1, dim, 1.0))?,
            bias: params.add(&format!("{name}.bias"), ParamKind::Norm, Matrix::zeros(1, dim))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &ParameterSet, x: Var) -> Result<Var, NnError> {
        let n = g.layer_norm(x)?;
        let gain = g.param(p, self.gain);
        let bias = g.param(p, self.bias);
        let y = g.mul_row(n, gain)?;
        g.add_row(y, bias)
    }
}

/// Two dense layers with a GELU in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        params: &mut ParameterSet,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, NnError> {
        Ok(Self {
            fc1: Linear::new(params, &format!("{name}.fc1"), d_in, hidden, rng)?,
            fc2: Linear::new(params, &format!("{name}.fc2"), hidden, d_out, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &ParameterSet, x: Var) -> Result<Var, NnError> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, p, h)
    }
}

/// Learnable positional embedding: `3 → hidden → dim`.
pub type PositionalMlp = Mlp;

pub fn positional_mlp(
    params: &mut ParameterSet,
    name: &str,
    hidden: usize,
    dim: usize,
    rng: &mut impl Rng,
) -> Result<PositionalMlp, NnError> {
    Mlp::new(params, name, 3, hidden, dim, rng)
}

/// Multi-head scaled dot-product attention with a learned null value used
/// when every key is masked (or there are no keys at all).
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub null_value: ParamId,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        params: &mut ParameterSet,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, NnError> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(NnError::ShapeMismatch(format!(
                "model dim {dim} not divisible by {heads} heads"
            )));
        }
        let null_data = (0..dim).map(|_| rng.random_range(-0.1..0.1)).collect();
        Ok(Self {
            q: Linear::new(params, &format!("{name}.q"), dim, dim, rng)?,
            k: Linear::new(params, &format!("{name}.k"), dim, dim, rng)?,
            v: Linear::new(params, &format!("{name}.v"), dim, dim, rng)?,
            o: Linear::new(params, &format!("{name}.o"), dim, dim, rng)?,
            null_value: params.add(
                &format!("{name}.null_value"),
                ParamKind::Bias,
                Matrix::from_vec(1, dim, null_data),
            )?,
            heads,
            dim,
        })
    }

    /// Attends from `queries` to `keys` (`None` means no keys).
    /// `key_mask[j] == false` excludes key `j`.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &ParameterSet,
        queries: Var,
        keys: Option<Var>,
        key_mask: Option<&[bool]>,
    ) -> Result<Var, NnError> {
        let (nq, dq) = g.shape(queries);
        if dq != self.dim {
            return Err(NnError::ShapeMismatch(format!(
                "attention query width {dq}, expected {}",
                self.dim
            )));
        }
        let any_key = match (keys, key_mask) {
            (None, _) => false,
            (Some(_), Some(m)) => m.iter().any(|&b| b),
            (Some(k), None) => g.shape(k).0 > 0,
        };
        let Some(kv) = keys.filter(|_| any_key) else {
            let zeros = g.constant(Matrix::zeros(nq, self.dim))?;
            let null = g.param(p, self.null_value);
            let ctx = g.add_row(zeros, null)?;
            return self.o.forward(g, p, ctx);
        };
        if g.shape(kv).1 != self.dim {
            return Err(NnError::ShapeMismatch(format!(
                "attention key width {}, expected {}",
                g.shape(kv).1,
                self.dim
            )));
        }
        let q = self.q.forward(g, p, queries)?;
        let k = self.k.forward(g, p, kv)?;
        let v = self.v.forward(g, p, kv)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, dh)?,
                    g.slice_cols(k, h * dh, dh)?,
                    g.slice_cols(v, h * dh, dh)?,
                )
            };
            let s = g.matmul_bt(qh, kh)?;
            let s = g.scale(s, scale)?;
            let a = g.softmax(s, key_mask)?;
            outs.push(g.matmul(a, vh)?);
        }
        let ctx = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        self.o.forward(g, p, ctx)
    }

    /// Attention weights of head `head` (for inspection and tests).
    pub fn weights(
        &self,
        g: &mut Graph,
        p: &ParameterSet,
        queries: Var,
        keys: Var,
        key_mask: Option<&[bool]>,
        head: usize,
    ) -> Result<Matrix, NnError> {
        let dh = self.dim / self.heads;
        let q = self.q.forward(g, p, queries)?;
        let k = self.k.forward(g, p, keys)?;
        let qh = g.slice_cols(q, head * dh, dh)?;
        let kh = g.slice_cols(k, head * dh, dh)?;
        let s = g.matmul_bt(qh, kh)?;
        let s = g.scale(s, 1.0 / (dh as f64).sqrt())?;
        let a = g.softmax(s, key_mask)?;
        Ok(g.value(a).clone())
    }
}

/// Pre-norm residual attention: `x + attn(ln(x), kv)`.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub norm: LayerNorm,
    pub attn: MultiHeadAttention,
}

impl AttentionBlock {
    pub fn new(
        params: &mut ParameterSet,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, NnError> {
        Ok(Self {
            norm: LayerNorm::new(params, &format!("{name}.ln"), dim)?,
            attn: MultiHeadAttention::new(params, &format!("{name}.attn"), dim, heads, rng)?,
        })
    }

    /// Self-attention when `kv` is `None` and `cross` is false; cross
    /// attention to `kv` (possibly absent) otherwise.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &ParameterSet,
        x: Var,
        kv: Option<Var>,
        cross: bool,
        key_mask: Option<&[bool]>,
    ) -> Result<Var, NnError> {
        let h = self.norm.forward(g, p, x)?;
        let keys = if cross { kv } else { Some(h) };
        let a = self.attn.forward(g, p, h, keys, key_mask)?;
        g.add(x, a)
    }
}

/// Pre-norm residual feed-forward: `x + mlp(ln(x))`.
#[derive(Debug, Clone)]
pub struct FeedForwardBlock {
    pub norm: LayerNorm,
    pub mlp: Mlp,
}

impl FeedForwardBlock {
    pub fn new(
        params: &mut ParameterSet,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, NnError> {
        Ok(Self {
            norm: LayerNorm::new(params, &format!("{name}.ln"), dim)?,
            mlp: Mlp::new(params, &format!("{name}.mlp"), dim, hidden, dim, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &ParameterSet, x: Var) -> Result<Var, NnError> {
        let h = self.norm.forward(g, p, x)?;
        let h = self.mlp.forward(g, p, h)?;
        g.add(x, h)
    }
}
