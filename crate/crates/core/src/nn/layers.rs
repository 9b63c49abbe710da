use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Segment, Var};
use crate::nn::params::{ParamId, ParamStore};
use crate::nn::tensor::Tensor;

/// `y = x·W + b` with `W` stored as `in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights drawn from `N(0, gain²/in_dim)`, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let std = gain / (in_dim.max(1) as f64).sqrt();
        let w = store.add(format!("{name}.w"), Tensor::randn(in_dim, out_dim, std, rng))?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(1, out_dim))?;
        Ok(Linear { w, b, in_dim, out_dim })
    }

    pub fn from_store(store: &ParamStore, name: &str) -> Result<Self> {
        let w = lookup(store, &format!("{name}.w"))?;
        let b = lookup(store, &format!("{name}.b"))?;
        let (in_dim, out_dim) = store.value(w).shape();
        Ok(Linear { w, b, in_dim, out_dim })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (_, cols) = g.shape(x);
        if cols != self.in_dim {
            return Err(Error::Shape {
                op: "linear",
                detail: format!("input width {cols}, expected {}", self.in_dim),
            });
        }
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

pub(crate) fn lookup(store: &ParamStore, name: &str) -> Result<ParamId> {
    store
        .id(name)
        .ok_or_else(|| Error::Incompatible(format!("checkpoint lacks parameter {name}")))
}

/// Layer normalization with learned per-channel gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gain = store.add(format!("{name}.gain"), Tensor::filled(1, dim, 1.0))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, dim))?;
        Ok(LayerNorm { gain, bias })
    }

    pub fn from_store(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(LayerNorm {
            gain: lookup(store, &format!("{name}.gain"))?,
            bias: lookup(store, &format!("{name}.bias"))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let n = g.layernorm(x);
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let y = g.mul_row(n, gain)?;
        g.add_bias(y, bias)
    }
}

/// `(1 + γ) ⊙ layernorm(h) + δ`, with `γ`, `δ` given per row.
pub fn adaln_modulate(g: &mut Graph, h: Var, gamma: Var, delta: Var) -> Result<Var> {
    let n = g.layernorm(h);
    let scale = g.add_scalar(gamma, 1.0);
    let y = g.mul(n, scale)?;
    g.add(y, delta)
}

/// Adaptive layer norm: `γ` and `δ` come from a learned projection of a
/// conditioning embedding. The projection starts at zero so the layer begins
/// as a plain layer norm.
#[derive(Clone, Debug)]
pub struct AdaLn {
    pub proj: Linear,
    pub dim: usize,
}

impl AdaLn {
    pub fn new(store: &mut ParamStore, name: &str, cond_dim: usize, dim: usize) -> Result<Self> {
        let w = store.add(format!("{name}.w"), Tensor::zeros(cond_dim, 2 * dim))?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(1, 2 * dim))?;
        Ok(AdaLn {
            proj: Linear {
                w,
                b,
                in_dim: cond_dim,
                out_dim: 2 * dim,
            },
            dim,
        })
    }

    pub fn from_store(store: &ParamStore, name: &str) -> Result<Self> {
        let proj = Linear::from_store(store, name)?;
        Ok(AdaLn {
            dim: proj.out_dim / 2,
            proj,
        })
    }

    pub fn forward(&self, g: &mut Graph, h: Var, cond: Var) -> Result<Var> {
        let gd = self.proj.forward(g, cond)?;
        let gamma = g.slice_cols(gd, 0, self.dim)?;
        let delta = g.slice_cols(gd, self.dim, self.dim)?;
        adaln_modulate(g, h, gamma, delta)
    }
}

/// Sinusoidal embedding: entries `2i` and `2i + 1` are `sin(t·f_i)` and
/// `cos(t·f_i)` with `f_i = 10000^(−2i/dim)`.
pub fn time_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "time embedding dimension must be even and positive, got {dim}"
        )));
    }
    let mut out = vec![0.0; dim];
    for i in 0..dim / 2 {
        let f = 10000f64.powf(-2.0 * i as f64 / dim as f64);
        let (s, c) = (t as f64 * f).sin_cos();
        out[2 * i] = s;
        out[2 * i + 1] = c;
    }
    Ok(out)
}

/// Pre-norm transformer block: multi-head self-attention then a 4× SiLU MLP,
/// each with a residual connection.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub out: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(TransformerBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, 1.0, rng)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim, 0.5, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, 4 * dim, 1.0, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), 4 * dim, dim, 0.5, rng)?,
            heads,
        })
    }

    pub fn from_store(store: &ParamStore, name: &str, heads: usize) -> Result<Self> {
        Ok(TransformerBlock {
            ln1: LayerNorm::from_store(store, &format!("{name}.ln1"))?,
            qkv: Linear::from_store(store, &format!("{name}.qkv"))?,
            out: Linear::from_store(store, &format!("{name}.out"))?,
            ln2: LayerNorm::from_store(store, &format!("{name}.ln2"))?,
            fc1: Linear::from_store(store, &format!("{name}.fc1"))?,
            fc2: Linear::from_store(store, &format!("{name}.fc2"))?,
            heads,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, segments: &[Segment]) -> Result<Var> {
        let dim = self.out.out_dim;
        let h = self.ln1.forward(g, x)?;
        let qkv = self.qkv.forward(g, h)?;
        let q = g.slice_cols(qkv, 0, dim)?;
        let k = g.slice_cols(qkv, dim, dim)?;
        let v = g.slice_cols(qkv, 2 * dim, dim)?;
        let a = g.attention(q, k, v, segments, self.heads)?;
        let a = self.out.forward(g, a)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, x)?;
        let h = self.fc1.forward(g, h)?;
        let h = g.silu(h);
        let h = self.fc2.forward(g, h)?;
        g.add(x, h)
    }
}
