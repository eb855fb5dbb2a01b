//! Standard trunk layers built from tape primitives: linear maps, layer
//! normalization, multi-head causal self-attention, and the GELU MLP.
//!
//! Layer structs hold parameter handles only; the same layer definitions run
//! at any element precision against a matching [`ParamStore`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::scalar::Scalar;
use super::session::{Session, Var};
use super::tensor::Tensor;
use super::NnError;

/// Layer normalization epsilon.
pub const LN_EPS: f64 = 1e-5;
/// Weight initialization standard deviation.
pub const INIT_STD: f64 = 0.02;

/// One standard normal draw (Box-Muller), scaled by `std`.
pub fn normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Affine map `x W + b` over rank-2 inputs `[rows, d_in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, NnError> {
        let w = store.add(
            format!("{name}.w"),
            Tensor::from_fn(&[d_in, d_out], |_| S::from_f64(normal(rng, INIT_STD))),
        )?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[d_out]))?;
        Ok(Linear { w, b, d_in, d_out })
    }

    pub fn forward<S: Scalar>(
        &self,
        s: &mut Session<S>,
        store: &ParamStore<S>,
        x: Var,
    ) -> Result<Var, NnError> {
        let w = s.param(store, self.w);
        let b = s.param(store, self.b);
        let y = s.matmul(x, w)?;
        s.add_bias(y, b)
    }
}

/// Learned per-feature scale and shift around last-axis normalization.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        d: usize,
    ) -> Result<Self, NnError> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[d], S::one()))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[d]))?;
        Ok(LayerNorm { gamma, beta })
    }

    pub fn forward<S: Scalar>(
        &self,
        s: &mut Session<S>,
        store: &ParamStore<S>,
        x: Var,
    ) -> Result<Var, NnError> {
        let gamma = s.param(store, self.gamma);
        let beta = s.param(store, self.beta);
        s.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Multi-head causal self-attention with separate query/key/value/output
/// projections and dropout after the output projection.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub width: usize,
    pub dropout_p: f64,
}

impl SelfAttention {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        width: usize,
        heads: usize,
        dropout_p: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, NnError> {
        if heads == 0 || width % heads != 0 {
            return Err(NnError::Shape {
                op: "attention",
                context: format!("width {width} not divisible by heads {heads}"),
            });
        }
        Ok(SelfAttention {
            wq: Linear::new(store, &format!("{name}.wq"), width, width, rng)?,
            wk: Linear::new(store, &format!("{name}.wk"), width, width, rng)?,
            wv: Linear::new(store, &format!("{name}.wv"), width, width, rng)?,
            wo: Linear::new(store, &format!("{name}.wo"), width, width, rng)?,
            heads,
            width,
            dropout_p,
        })
    }

    /// `x` is `[batch, tokens, width]`; output has the same shape.
    pub fn forward<S: Scalar>(
        &self,
        s: &mut Session<S>,
        store: &ParamStore<S>,
        x: Var,
    ) -> Result<Var, NnError> {
        let shape = s.value(x).shape().to_vec();
        if shape.len() != 3 || shape[2] != self.width {
            return Err(NnError::Shape {
                op: "attention",
                context: format!("want [b, t, {}], got {:?}", self.width, shape),
            });
        }
        let (b, t, e) = (shape[0], shape[1], shape[2]);
        let (h, hd) = (self.heads, e / self.heads);

        let flat = s.reshape(x, &[b * t, e])?;
        let split = |s: &mut Session<S>, lin: &Linear| -> Result<Var, NnError> {
            let y = lin.forward(s, store, flat)?;
            let y = s.reshape(y, &[b, t, h, hd])?;
            let y = s.permute(y, &[0, 2, 1, 3])?;
            s.reshape(y, &[b * h, t, hd])
        };
        let q = split(s, &self.wq)?;
        let k = split(s, &self.wk)?;
        let v = split(s, &self.wv)?;

        let scores = s.bmm_nt(q, k)?;
        let scores = s.scale(scores, 1.0 / (hd as f64).sqrt())?;
        let masked = s.causal_mask(scores)?;
        let attn = s.softmax_last(masked)?;

        let ctx = s.bmm(attn, v)?;
        let ctx = s.reshape(ctx, &[b, h, t, hd])?;
        let ctx = s.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = s.reshape(ctx, &[b * t, e])?;
        let out = self.wo.forward(s, store, ctx)?;
        let out = s.dropout(out, self.dropout_p)?;
        s.reshape(out, &[b, t, e])
    }
}

/// Two-layer GELU feed-forward with 4x hidden expansion.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub dropout_p: f64,
}

impl Mlp {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        width: usize,
        dropout_p: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, NnError> {
        Ok(Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), width, 4 * width, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), 4 * width, width, rng)?,
            dropout_p,
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        s: &mut Session<S>,
        store: &ParamStore<S>,
        x: Var,
    ) -> Result<Var, NnError> {
        let shape = s.value(x).shape().to_vec();
        let (b, t, e) = (shape[0], shape[1], shape[2]);
        let flat = s.reshape(x, &[b * t, e])?;
        let hidden = self.fc1.forward(s, store, flat)?;
        let act = s.gelu(hidden)?;
        let out = self.fc2.forward(s, store, act)?;
        let out = s.dropout(out, self.dropout_p)?;
        s.reshape(out, &[b, t, e])
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: SelfAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        width: usize,
        heads: usize,
        dropout_p: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, NnError> {
        Ok(Block {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), width)?,
            attn: SelfAttention::new(store, &format!("{name}.attn"), width, heads, dropout_p, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), width, dropout_p, rng)?,
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        s: &mut Session<S>,
        store: &ParamStore<S>,
        x: Var,
    ) -> Result<Var, NnError> {
        let normed = self.ln1.forward(s, store, x)?;
        let attn = self.attn.forward(s, store, normed)?;
        let x = s.add(x, attn)?;
        let normed = self.ln2.forward(s, store, x)?;
        let mlp = self.mlp.forward(s, store, normed)?;
        s.add(x, mlp)
    }
}
