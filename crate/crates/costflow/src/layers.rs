//! Neural-net building blocks over the tensor core: linear maps, 2-D
//! convolutions (im2col + matmul composition), affine layer norm, feed-forward
//! blocks, and multi-head scaled dot-product attention.

use rand::Rng;

use crate::params::{Forward, ParamId, ParamStore};
use crate::tensor::{Result, Tensor, TensorError};

pub const LN_EPS: f64 = 1e-5;

/// Uniform init in (-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn uniform_fan_in(rng: &mut impl Rng, fan_in: usize, n: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// Gaussian init via Box-Muller (keeps the crate free of distribution deps).
pub fn normal(rng: &mut impl Rng, mean: f64, std: f64, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    while out.len() < n {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (2.0 * std::f64::consts::PI * u2).sin_cos();
        out.push(mean + std * r * c);
        out.push(mean + std * r * s);
    }
    out.truncate(n);
    out
}

pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Linear> {
        let w = store.register(
            format!("{name}.weight"),
            uniform_fan_in(rng, in_dim, in_dim * out_dim),
            &[in_dim, out_dim],
            true,
        )?;
        let b = if bias {
            Some(store.register(
                format!("{name}.bias"),
                uniform_fan_in(rng, in_dim, out_dim),
                &[out_dim],
                true,
            )?)
        } else {
            None
        };
        Ok(Linear { w, b })
    }

    /// `[..., in] -> [..., out]`
    pub fn apply(&self, fw: &Forward, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&fw.param(self.w))?;
        match self.b {
            Some(b) => y.add(&fw.param(b)),
            None => Ok(y),
        }
    }
}

pub fn conv_out_size(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

pub struct Conv2d {
    w: ParamId,
    b: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Conv2d> {
        let fan_in = cin * k * k;
        let w = store.register(
            format!("{name}.weight"),
            uniform_fan_in(rng, fan_in, cout * fan_in),
            &[cout, cin * k * k],
            true,
        )?;
        let b = store.register(
            format!("{name}.bias"),
            uniform_fan_in(rng, fan_in, cout),
            &[cout],
            true,
        )?;
        Ok(Conv2d {
            w,
            b,
            cin,
            cout,
            k,
            stride,
            pad,
        })
    }

    /// `[B, Cin, H, W] -> [B, Cout, H', W']` with zero padding.
    pub fn apply(&self, fw: &Forward, x: &Tensor) -> Result<Tensor> {
        let shape = x.shape().to_vec();
        if shape.len() != 4 || shape[1] != self.cin {
            return Err(TensorError::Shape(format!(
                "conv2d expects [B, {}, H, W], got {:?}",
                self.cin, shape
            )));
        }
        let (b, h, w) = (shape[0], shape[2], shape[3]);
        let ho = conv_out_size(h, self.k, self.stride, self.pad);
        let wo = conv_out_size(w, self.k, self.stride, self.pad);
        let cols = x.im2col(self.k, self.k, self.stride, self.pad)?; // [B, Cin*k*k, Ho*Wo]
        let out = fw.param(self.w).matmul(&cols)?; // [B, Cout, Ho*Wo]
        let bias = fw.param(self.b).reshape(&[1, self.cout, 1])?;
        out.add(&bias)?.reshape(&[b, self.cout, ho, wo])
    }
}

/// Layer norm over the last axis with learned scale and shift.
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<LayerNorm> {
        let gamma = store.register(format!("{name}.scale"), vec![1.0; dim], &[dim], true)?;
        let beta = store.register(format!("{name}.shift"), vec![0.0; dim], &[dim], true)?;
        Ok(LayerNorm { gamma, beta })
    }

    pub fn apply(&self, fw: &Forward, x: &Tensor) -> Result<Tensor> {
        x.layer_norm_lastdim(LN_EPS)?
            .mul(&fw.param(self.gamma))?
            .add(&fw.param(self.beta))
    }
}

/// Two-layer feed-forward block with ReLU in between.
pub struct Ffn {
    fc1: Linear,
    fc2: Linear,
}

impl Ffn {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
    ) -> Result<Ffn> {
        Ok(Ffn {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), in_dim, hidden, true)?,
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, out_dim, true)?,
        })
    }

    pub fn apply(&self, fw: &Forward, x: &Tensor) -> Result<Tensor> {
        self.fc2.apply(fw, &self.fc1.apply(fw, x)?.relu()?)
    }
}

fn split_heads(t: &Tensor, heads: usize) -> Result<Tensor> {
    let s = t.shape().to_vec(); // [B, L, D]
    let dh = s[2] / heads;
    if heads == 1 {
        return t.reshape(&[s[0], 1, s[1], s[2]]);
    }
    t.reshape(&[s[0], s[1], heads, dh])?
        .permute(&[0, 2, 1, 3])
}

fn merge_heads(t: &Tensor) -> Result<Tensor> {
    let s = t.shape().to_vec(); // [B, h, L, dh]
    if s[1] == 1 {
        return t.reshape(&[s[0], s[2], s[3]]);
    }
    t.permute(&[0, 2, 1, 3])?.reshape(&[s[0], s[2], s[1] * s[3]])
}

/// Scaled dot-product attention over rank-3 inputs.
///
/// `q: [B, Lq, D]`, `k: [B, Lk, D]`, `v: [B, Lk, Dv]`; `heads` must divide
/// both `D` and `Dv`. `bias` (if any) is added to the score logits and must
/// broadcast against `[B, heads, Lq, Lk]`. Returns `[B, Lq, Dv]`.
pub fn scaled_dot_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    bias: Option<&Tensor>,
) -> Result<Tensor> {
    let (dq, dv) = (q.shape()[2], v.shape()[2]);
    if heads == 0 || dq % heads != 0 || dv % heads != 0 {
        return Err(TensorError::Invalid(format!(
            "{heads} heads do not divide dims {dq}/{dv}"
        )));
    }
    let qh = split_heads(q, heads)?;
    let kh = split_heads(k, heads)?;
    let vh = split_heads(v, heads)?;
    let dh = dq / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut scores = qh.matmul_nt(&kh)?.scale(scale)?; // [B, h, Lq, Lk]
    if let Some(b) = bias {
        scores = scores.add(b)?;
    }
    merge_heads(&scores.softmax_lastdim()?.matmul(&vh)?)
}

/// Pre-norm multi-head attention block: projections for Q, K, V plus an
/// output projection. Normalization and residuals belong to the caller.
pub struct Mha {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl Mha {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Mha> {
        Ok(Mha {
            wq: Linear::new(store, rng, &format!("{name}.q"), dim, dim, true)?,
            wk: Linear::new(store, rng, &format!("{name}.k"), dim, dim, true)?,
            wv: Linear::new(store, rng, &format!("{name}.v"), dim, dim, true)?,
            wo: Linear::new(store, rng, &format!("{name}.out"), dim, dim, true)?,
            heads,
        })
    }

    pub fn apply(
        &self,
        fw: &Forward,
        xq: &Tensor,
        xkv: &Tensor,
        bias: Option<&Tensor>,
    ) -> Result<Tensor> {
        let q = self.wq.apply(fw, xq)?;
        let k = self.wk.apply(fw, xkv)?;
        let v = self.wv.apply(fw, xkv)?;
        let attn = scaled_dot_attention(&q, &k, &v, self.heads, bias)?;
        self.wo.apply(fw, &attn)
    }
}
